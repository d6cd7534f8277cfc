use rand::Rng;
use rand_distr::{Distribution, Geometric};

use super::{greedy_actions_toward, FiniteCmp, TabularPolicy};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn is_valid_for(&self, env: &FiniteCmp) -> bool {
        self.states.len() == self.actions.len() + 1
            && self.states.iter().all(|&s| s < env.n_states())
            && self.actions.iter().all(|&a| a < env.n_actions())
            && self
                .actions
                .iter()
                .enumerate()
                .all(|(t, &a)| env.prob(a, self.states[t], self.states[t + 1]) > 0.0)
    }
}

/// Immutable collection of offline trajectories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub env_fingerprint: u64,
    pub seed: u64,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, env_fingerprint: u64, seed: u64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if trajectories
            .iter()
            .any(|t| t.states.len() != t.actions.len() + 1)
        {
            return Err(Error::Format(
                "trajectory needs exactly one more state than actions".into(),
            ));
        }
        Ok(Self {
            trajectories,
            env_fingerprint,
            seed,
        })
    }

    /// Check the fingerprint and every transition against `env`.
    pub fn validate_against(&self, env: &FiniteCmp) -> Result<()> {
        if self.env_fingerprint != env.fingerprint() {
            return Err(Error::Format(format!(
                "dataset fingerprint {:016x} does not match environment {:016x}",
                self.env_fingerprint,
                env.fingerprint()
            )));
        }
        if let Some(i) = self.trajectories.iter().position(|t| !t.is_valid_for(env)) {
            return Err(Error::Format(format!(
                "trajectory {i} is inconsistent with the environment"
            )));
        }
        Ok(())
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Sorted distinct states visited anywhere in the dataset.
    pub fn distinct_states(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .trajectories
            .iter()
            .flat_map(|t| t.states.iter().copied())
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

fn rollout<R: Rng + ?Sized>(
    env: &FiniteCmp,
    len: usize,
    rng: &mut R,
    mut choose: impl FnMut(usize, &mut R) -> usize,
) -> Trajectory {
    let mut x = rng.random_range(0..env.n_states());
    let mut states = Vec::with_capacity(len + 1);
    let mut actions = Vec::with_capacity(len);
    states.push(x);
    for _ in 0..len {
        let a = choose(x, rng);
        x = env.step(x, a, rng);
        actions.push(a);
        states.push(x);
    }
    Trajectory { states, actions }
}

/// Roll out `n` trajectories of exactly `len` transitions from uniformly
/// random start states.
pub fn sample_trajectories(
    env: &FiniteCmp,
    policy: &TabularPolicy,
    n: usize,
    len: usize,
    seed: u64,
) -> Result<Dataset> {
    policy.check_shape(env)?;
    let mut rng = rng::stream(seed, "collect");
    let trajectories = (0..n)
        .map(|_| rollout(env, len, &mut rng, |x, r| policy.sample(x, r)))
        .collect();
    Dataset::new(trajectories, env.fingerprint(), seed)
}

/// Higher-quality behavior data: each trajectory chases a random goal with
/// an ε-greedy shortest-path policy and draws a fresh goal on arrival.
pub fn sample_goal_seeking_trajectories(
    env: &FiniteCmp,
    epsilon: f64,
    n: usize,
    len: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0, 1], got {epsilon}"
        )));
    }
    let greedy: Vec<Vec<usize>> = (0..env.n_states())
        .map(|g| greedy_actions_toward(env, g))
        .collect();
    let m = env.n_actions();
    let mut rng = rng::stream(seed, "collect");
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let mut goal = rng.random_range(0..env.n_states());
        let traj = rollout(env, len, &mut rng, |x, r| {
            if x == goal {
                goal = r.random_range(0..env.n_states());
            }
            if r.random::<f64>() < epsilon {
                r.random_range(0..m)
            } else {
                greedy[goal][x]
            }
        });
        trajectories.push(traj);
    }
    Dataset::new(trajectories, env.fingerprint(), seed)
}

/// Hindsight goal relabeling: with weight `future_weight` the goal is a later
/// state on the same trajectory at a geometric offset, otherwise a uniformly
/// random dataset state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoalScheme {
    pub future_weight: f64,
    pub random_weight: f64,
    pub future_p: f64,
}

impl Default for GoalScheme {
    fn default() -> Self {
        Self {
            future_weight: 0.7,
            random_weight: 0.3,
            future_p: 0.1,
        }
    }
}

impl GoalScheme {
    fn validate(&self) -> Result<()> {
        let ok = self.future_weight >= 0.0
            && self.random_weight >= 0.0
            && self.future_weight + self.random_weight > 0.0
            && self.future_p > 0.0
            && self.future_p <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid goal scheme {self:?}"
            )))
        }
    }
}

/// Relabeled `(s, u, h, s', g)` tuples; `u` is `h` steps after `s`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TupleBatch {
    pub s: Vec<usize>,
    pub u: Vec<usize>,
    pub h: Vec<u32>,
    pub s_next: Vec<usize>,
    pub g: Vec<usize>,
    /// Source `(trajectory, position of s)` for each tuple.
    pub origin: Vec<(usize, usize)>,
}

impl TupleBatch {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

pub fn extract_tuples(
    data: &Dataset,
    batch: usize,
    h_max: usize,
    scheme: GoalScheme,
    seed: u64,
) -> Result<TupleBatch> {
    let mut rng = rng::stream(seed, "tuples");
    extract_tuples_with(data, batch, h_max, scheme, &mut rng)
}

pub fn extract_tuples_with(
    data: &Dataset,
    batch: usize,
    h_max: usize,
    scheme: GoalScheme,
    rng: &mut StreamRng,
) -> Result<TupleBatch> {
    if h_max < 1 {
        return Err(Error::InvalidArgument("h_max must be at least 1".into()));
    }
    scheme.validate()?;
    if let Some((index, t)) = data
        .trajectories
        .iter()
        .enumerate()
        .find(|(_, t)| t.len() <= h_max)
    {
        return Err(Error::TrajectoryTooShort {
            index,
            len: t.len(),
            h_max,
        });
    }
    let geometric = Geometric::new(scheme.future_p)
        .map_err(|e| Error::InvalidArgument(format!("future_p: {e}")))?;
    let p_future = scheme.future_weight / (scheme.future_weight + scheme.random_weight);
    let n_traj = data.trajectories.len();

    let mut out = TupleBatch::default();
    for _ in 0..batch {
        let ti = rng.random_range(0..n_traj);
        let traj = &data.trajectories[ti];
        let len = traj.len();
        let h = rng.random_range(0..=h_max);
        let t = rng.random_range(0..=len - h.max(1));
        let g = if rng.random::<f64>() < p_future {
            let offset = geometric.sample(rng) as usize;
            traj.states[t.saturating_add(offset).min(len)]
        } else {
            let other = &data.trajectories[rng.random_range(0..n_traj)];
            other.states[rng.random_range(0..=other.len())]
        };
        out.s.push(traj.states[t]);
        out.u.push(traj.states[t + h]);
        out.h.push(h as u32);
        out.s_next.push(traj.states[t + 1]);
        out.g.push(g);
        out.origin.push((ti, t));
    }
    Ok(out)
}

/// Uniformly sampled `(s, a, s')` transitions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransitionBatch {
    pub s: Vec<usize>,
    pub a: Vec<usize>,
    pub s_next: Vec<usize>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

pub fn sample_transitions(data: &Dataset, batch: usize, rng: &mut StreamRng) -> TransitionBatch {
    let mut out = TransitionBatch::default();
    let n_traj = data.trajectories.len();
    while out.len() < batch {
        let traj = &data.trajectories[rng.random_range(0..n_traj)];
        if traj.is_empty() {
            continue;
        }
        let t = rng.random_range(0..traj.len());
        out.s.push(traj.states[t]);
        out.a.push(traj.actions[t]);
        out.s_next.push(traj.states[t + 1]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_one_way_gridworld, make_random_digraph_cmp};

    fn chain_env() -> FiniteCmp {
        // deterministic 4-state ring 0 -> 1 -> 2 -> 3 -> 0
        let n = 4;
        let mut k = vec![0.0; n * n];
        for x in 0..n {
            k[x * n + (x + 1) % n] = 1.0;
        }
        FiniteCmp::new(n, 1, k, None, "ring").unwrap()
    }

    #[test]
    fn forced_dynamics_give_forced_paths() {
        let env = chain_env();
        let pol = TabularPolicy::uniform(4, 1);
        let d = sample_trajectories(&env, &pol, 5, 12, 1).unwrap();
        for t in &d.trajectories {
            assert_eq!(t.len(), 12);
            for w in t.states.windows(2) {
                assert_eq!(w[1], (w[0] + 1) % 4);
            }
        }
        d.validate_against(&env).unwrap();
    }

    #[test]
    fn sampling_is_deterministic() {
        let env = make_random_digraph_cmp(8, 2, 2, 4).unwrap();
        let pol = TabularPolicy::uniform(8, 2);
        let a = sample_trajectories(&env, &pol, 10, 50, 3).unwrap();
        let b = sample_trajectories(&env, &pol, 10, 50, 3).unwrap();
        assert_eq!(a, b);
        assert!(sample_trajectories(&env, &TabularPolicy::uniform(7, 2), 1, 1, 0).is_err());
    }

    #[test]
    fn empirical_transitions_match_kernel() {
        let env = make_one_way_gridworld(3, 2, &[((0, 0), (1, 0))], 0.3).unwrap();
        let pol = TabularPolicy::uniform(6, 4);
        let d = sample_trajectories(&env, &pol, 100, 1000, 11).unwrap();
        let n = env.n_states();
        let mut counts = vec![0usize; 4 * n * n];
        let mut totals = vec![0usize; 4 * n];
        for t in &d.trajectories {
            for (i, &a) in t.actions.iter().enumerate() {
                counts[(a * n + t.states[i]) * n + t.states[i + 1]] += 1;
                totals[a * n + t.states[i]] += 1;
            }
        }
        for a in 0..4 {
            for x in 0..n {
                let m = totals[a * n + x] as f64;
                assert!(m > 1000.0);
                for y in 0..n {
                    let p = env.prob(a, x, y);
                    let freq = counts[(a * n + x) * n + y] as f64 / m;
                    let se = (p * (1.0 - p) / m).sqrt();
                    assert!(
                        (freq - p).abs() <= 3.0 * se + 1e-12,
                        "({a},{x},{y}) {freq} vs {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn goal_seeking_data_is_valid() {
        let env = make_one_way_gridworld(4, 4, &[((1, 1), (1, 2))], 0.1).unwrap();
        let d = sample_goal_seeking_trajectories(&env, 0.2, 20, 40, 5).unwrap();
        d.validate_against(&env).unwrap();
        assert_eq!(
            d,
            sample_goal_seeking_trajectories(&env, 0.2, 20, 40, 5).unwrap()
        );
    }

    #[test]
    fn tuples_are_consistent_with_source() {
        let env = make_random_digraph_cmp(10, 2, 2, 9).unwrap();
        let d = sample_trajectories(&env, &TabularPolicy::uniform(10, 2), 20, 30, 2).unwrap();
        let b = extract_tuples(&d, 500, 10, GoalScheme::default(), 4).unwrap();
        assert_eq!(b.len(), 500);
        let mut saw_zero = false;
        for i in 0..b.len() {
            let (ti, t) = b.origin[i];
            let tr = &d.trajectories[ti];
            let h = b.h[i] as usize;
            assert!(h <= 10);
            assert_eq!(tr.states[t], b.s[i]);
            assert_eq!(tr.states[t + h], b.u[i]);
            assert_eq!(tr.states[t + 1], b.s_next[i]);
            if h == 0 {
                saw_zero = true;
                assert_eq!(b.u[i], b.s[i]);
            }
        }
        assert!(saw_zero);
    }

    #[test]
    fn chain_offsets_index_stored_sequence() {
        let env = chain_env();
        let d = sample_trajectories(&env, &TabularPolicy::uniform(4, 1), 3, 20, 0).unwrap();
        let b = extract_tuples(&d, 200, 5, GoalScheme::default(), 1).unwrap();
        for i in 0..b.len() {
            assert_eq!(b.u[i], (b.s[i] + b.h[i] as usize) % 4);
        }
    }

    #[test]
    fn short_trajectories_are_rejected() {
        let env = chain_env();
        let d = sample_trajectories(&env, &TabularPolicy::uniform(4, 1), 3, 5, 0).unwrap();
        assert!(matches!(
            extract_tuples(&d, 10, 5, GoalScheme::default(), 1),
            Err(Error::TrajectoryTooShort { .. })
        ));
        assert!(extract_tuples(&d, 10, 4, GoalScheme::default(), 1).is_ok());
    }
}
