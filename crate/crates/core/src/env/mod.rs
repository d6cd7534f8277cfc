//! Finite controlled Markov processes and offline data.

mod dataset;
mod format;

use std::collections::{HashSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{self, sample_categorical};
use crate::{Error, Result};

pub use dataset::{
    extract_tuples, extract_tuples_with, sample_goal_seeking_trajectories, sample_trajectories,
    sample_transitions, Dataset, GoalScheme, Trajectory, TransitionBatch, TupleBatch,
};
pub use format::DATASET_MAGIC;

const ROW_TOL: f64 = 1e-12;
const MAX_GENERATION_ATTEMPTS: usize = 10_000;

/// A grid cell as `(x, y)`, column then row.
pub type Cell = (usize, usize);

/// Gridworld moves, indexed by action id.
pub const GRID_ACTIONS: [(&str, isize, isize); 4] =
    [("N", 0, -1), ("E", 1, 0), ("S", 0, 1), ("W", -1, 0)];

/// Tabular state/action transition kernel.
///
/// `kernel[(a * n + x) * n + y]` is the probability of moving from `x` to `y`
/// under action `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCmp")]
pub struct FiniteCmp {
    n_states: usize,
    n_actions: usize,
    kernel: Vec<f64>,
    coords: Option<Vec<[f64; 2]>>,
    tag: String,
}

#[derive(Deserialize)]
struct RawCmp {
    n_states: usize,
    n_actions: usize,
    kernel: Vec<f64>,
    coords: Option<Vec<[f64; 2]>>,
    tag: String,
}

impl TryFrom<RawCmp> for FiniteCmp {
    type Error = Error;

    fn try_from(raw: RawCmp) -> Result<Self> {
        FiniteCmp::new(raw.n_states, raw.n_actions, raw.kernel, raw.coords, raw.tag)
    }
}

impl FiniteCmp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        kernel: Vec<f64>,
        coords: Option<Vec<[f64; 2]>>,
        tag: impl Into<String>,
    ) -> Result<Self> {
        if n_states < 2 {
            return Err(Error::InvalidEnv(format!(
                "need at least 2 states, got {n_states}"
            )));
        }
        if n_actions < 1 {
            return Err(Error::InvalidEnv("need at least 1 action".into()));
        }
        if kernel.len() != n_actions * n_states * n_states {
            return Err(Error::ShapeMismatch(format!(
                "kernel has {} entries, expected {}",
                kernel.len(),
                n_actions * n_states * n_states
            )));
        }
        if let Some(c) = &coords {
            if c.len() != n_states {
                return Err(Error::ShapeMismatch(format!(
                    "{} coordinates for {n_states} states",
                    c.len()
                )));
            }
        }
        for (r, row) in kernel.chunks(n_states).enumerate() {
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::InvalidEnv(format!(
                    "row {r} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidEnv(format!("row {r} sums to {sum}")));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            kernel,
            coords,
            tag: tag.into(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn coords(&self) -> Option<&[[f64; 2]]> {
        self.coords.as_deref()
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// Next-state distribution for `(x, a)`.
    pub fn row(&self, action: usize, state: usize) -> &[f64] {
        let n = self.n_states;
        let start = (action * n + state) * n;
        &self.kernel[start..start + n]
    }

    pub fn prob(&self, action: usize, from: usize, to: usize) -> f64 {
        self.row(action, from)[to]
    }

    pub fn step<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(action, state), rng)
    }

    /// States reachable in one step from `state` under some action.
    pub fn successors(&self, state: usize) -> Vec<usize> {
        (0..self.n_states)
            .filter(|&y| (0..self.n_actions).any(|a| self.prob(a, state, y) > 0.0))
            .collect()
    }

    /// Strong connectivity of the support graph, i.e. of the chain induced by
    /// the uniform policy.
    pub fn is_strongly_connected(&self) -> bool {
        let n = self.n_states;
        let forward: Vec<Vec<usize>> = (0..n).map(|x| self.successors(x)).collect();
        let mut backward = vec![Vec::new(); n];
        for (x, succ) in forward.iter().enumerate() {
            for &y in succ {
                backward[y].push(x);
            }
        }
        bfs_reach(&forward, 0).iter().all(|&r| r) && bfs_reach(&backward, 0).iter().all(|&r| r)
    }

    /// SHA-256 of the shape and kernel bits, truncated to 64 bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.n_states as u64).to_le_bytes());
        h.update((self.n_actions as u64).to_le_bytes());
        for p in &self.kernel {
            h.update(p.to_bits().to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }
}

pub(crate) fn bfs_reach(adj: &[Vec<usize>], start: usize) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(x) = queue.pop_front() {
        for &y in &adj[x] {
            if !seen[y] {
                seen[y] = true;
                queue.push_back(y);
            }
        }
    }
    seen
}

/// Four-action (N/E/S/W) gridworld with optional one-way passages.
///
/// State `y * width + x` sits at cell `(x, y)`. Moving off the grid or through
/// a blocked passage leaves the agent in place. A one-way edge `(a, b)` keeps
/// the move `a -> b` and blocks `b -> a`; listing both directions walls the
/// passage off entirely. With probability `slip` every action stays put.
pub fn make_one_way_gridworld(
    width: usize,
    height: usize,
    one_way_edges: &[(Cell, Cell)],
    slip: f64,
) -> Result<FiniteCmp> {
    if width * height < 2 {
        return Err(Error::InvalidEnv(format!(
            "grid {width}x{height} has fewer than 2 cells"
        )));
    }
    if !(0.0..1.0).contains(&slip) {
        return Err(Error::InvalidArgument(format!(
            "slip must lie in [0, 1), got {slip}"
        )));
    }
    let mut blocked: HashSet<(usize, usize)> = HashSet::new();
    for &(a, b) in one_way_edges {
        let on_grid = |c: Cell| c.0 < width && c.1 < height;
        let adjacent = a.0.abs_diff(b.0) + a.1.abs_diff(b.1) == 1;
        if !on_grid(a) || !on_grid(b) || !adjacent {
            return Err(Error::InvalidEdge(a, b));
        }
        let ia = a.1 * width + a.0;
        let ib = b.1 * width + b.0;
        blocked.insert((ib, ia));
    }

    let n = width * height;
    let n_actions = GRID_ACTIONS.len();
    let mut kernel = vec![0.0; n_actions * n * n];
    for (a, &(_, dx, dy)) in GRID_ACTIONS.iter().enumerate() {
        for y in 0..height {
            for x in 0..width {
                let from = y * width + x;
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                let mut to = from;
                if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                    let cand = ny as usize * width + nx as usize;
                    if !blocked.contains(&(from, cand)) {
                        to = cand;
                    }
                }
                let row = &mut kernel[(a * n + from) * n..(a * n + from + 1) * n];
                if to == from {
                    row[from] = 1.0;
                } else {
                    row[to] = 1.0 - slip;
                    row[from] = slip;
                }
            }
        }
    }
    let coords = (0..n)
        .map(|s| [(s % width) as f64, (s / width) as f64])
        .collect();
    let env = FiniteCmp::new(n, n_actions, kernel, Some(coords), "one_way_gridworld")?;
    if !env.is_strongly_connected() {
        return Err(Error::NotStronglyConnected);
    }
    Ok(env)
}

/// Random sparse digraph dynamics: every `(state, action)` spreads its mass
/// over `out_degree` distinct successors drawn uniformly. Rejection-samples
/// until the support graph is strongly connected.
pub fn make_random_digraph_cmp(
    n_states: usize,
    n_actions: usize,
    out_degree: usize,
    seed: u64,
) -> Result<FiniteCmp> {
    if n_states < 2 || n_actions < 1 || out_degree < 1 {
        return Err(Error::InvalidArgument(format!(
            "need n_states >= 2, n_actions >= 1, out_degree >= 1 (got {n_states}, {n_actions}, {out_degree})"
        )));
    }
    let k = out_degree.min(n_states);
    let mut rng = rng::stream(seed, "random_digraph");
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let mut kernel = vec![0.0; n_actions * n_states * n_states];
        for row in kernel.chunks_mut(n_states) {
            let succ = rand::seq::index::sample(&mut rng, n_states, k);
            if k == 1 {
                row[succ.index(0)] = 1.0;
            } else {
                let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = w.iter().sum();
                for (j, s) in succ.iter().enumerate() {
                    row[s] = w[j] / total;
                }
            }
        }
        let env = FiniteCmp::new(n_states, n_actions, kernel, None, "random_digraph")?;
        if env.is_strongly_connected() {
            return Ok(env);
        }
    }
    Err(Error::GenerationFailed(MAX_GENERATION_ATTEMPTS))
}

/// Stationary stochastic policy, `probs[x * n_actions + a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for (x, row) in probs.chunks(n_actions).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidArgument(format!(
                    "policy row {x} is not a distribution"
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (x, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidArgument(format!("action {a} out of range")));
            }
            probs[x * n_actions + a] = 1.0;
        }
        Self::new(actions.len(), n_actions, probs)
    }

    /// Random full-support policy with rows drawn from normalized uniforms.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let w: Vec<f64> = (0..n_actions)
                .map(|_| rng.random_range(0.05..1.0))
                .collect();
            let total: f64 = w.iter().sum();
            probs.extend(w.iter().map(|v| v / total));
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    /// ε-greedy policy that descends the shortest-path distance (in support
    /// steps) to `goal`; greedy ties go to the lowest action index.
    pub fn epsilon_greedy_toward(env: &FiniteCmp, goal: usize, epsilon: f64) -> Self {
        let greedy = greedy_actions_toward(env, goal);
        let m = env.n_actions();
        let mut probs = vec![epsilon / m as f64; env.n_states() * m];
        for (x, &a) in greedy.iter().enumerate() {
            probs[x * m + a] += 1.0 - epsilon;
        }
        Self {
            n_states: env.n_states(),
            n_actions: m,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn action_probs(&self, state: usize) -> &[f64] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        sample_categorical(self.action_probs(state), rng)
    }

    pub(crate) fn check_shape(&self, env: &FiniteCmp) -> Result<()> {
        if self.n_states != env.n_states() || self.n_actions != env.n_actions() {
            return Err(Error::ShapeMismatch(format!(
                "policy is {}x{}, environment is {}x{}",
                self.n_states,
                self.n_actions,
                env.n_states(),
                env.n_actions()
            )));
        }
        Ok(())
    }
}

/// Support-graph BFS distance to `goal` for every state.
pub fn support_distances(env: &FiniteCmp, goal: usize) -> Vec<usize> {
    let n = env.n_states();
    let mut backward = vec![Vec::new(); n];
    for x in 0..n {
        for y in env.successors(x) {
            backward[y].push(x);
        }
    }
    let mut dist = vec![usize::MAX; n];
    dist[goal] = 0;
    let mut queue = VecDeque::from([goal]);
    while let Some(y) = queue.pop_front() {
        for &x in &backward[y] {
            if dist[x] == usize::MAX {
                dist[x] = dist[y] + 1;
                queue.push_back(x);
            }
        }
    }
    dist
}

/// Action minimizing expected support distance to `goal`, per state.
pub fn greedy_actions_toward(env: &FiniteCmp, goal: usize) -> Vec<usize> {
    let dist = support_distances(env, goal);
    let big = (env.n_states() + 1) as f64;
    (0..env.n_states())
        .map(|x| {
            let mut best = 0;
            let mut best_val = f64::INFINITY;
            for a in 0..env.n_actions() {
                let val: f64 = env
                    .row(a, x)
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(y, &p)| {
                        p * if dist[y] == usize::MAX {
                            big
                        } else {
                            dist[y] as f64
                        }
                    })
                    .sum();
                if val < best_val {
                    best_val = val;
                    best = a;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_ok(env: &FiniteCmp) {
        for a in 0..env.n_actions() {
            for x in 0..env.n_states() {
                let r = env.row(a, x);
                assert!(r.iter().all(|&p| p >= 0.0));
                assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn two_cell_grid_is_a_walled_chain() {
        let env = make_one_way_gridworld(2, 1, &[], 0.0).unwrap();
        assert_eq!(env.n_states(), 2);
        assert_eq!(env.n_actions(), 4);
        // E moves 0 -> 1, W moves 1 -> 0, everything else hits a wall.
        assert_eq!(env.prob(1, 0, 1), 1.0);
        assert_eq!(env.prob(3, 1, 0), 1.0);
        assert_eq!(env.prob(0, 0, 0), 1.0);
        assert_eq!(env.prob(2, 1, 1), 1.0);
        assert_eq!(env.prob(1, 1, 1), 1.0);
        rows_ok(&env);
    }

    #[test]
    fn one_way_edge_blocks_reverse_move() {
        let env = make_one_way_gridworld(2, 2, &[((0, 0), (0, 1))], 0.0).unwrap();
        // cell (0,1) is state 2, cell (0,0) is state 0
        for a in 0..4 {
            assert_eq!(env.prob(a, 2, 0), 0.0);
        }
        assert_eq!(env.prob(2, 0, 2), 1.0);
    }

    #[test]
    fn slip_rows_match_hand_construction() {
        let env = make_one_way_gridworld(3, 3, &[], 0.2).unwrap();
        rows_ok(&env);
        for y in 0..3usize {
            for x in 0..3usize {
                let s = y * 3 + x;
                for (a, &(_, dx, dy)) in GRID_ACTIONS.iter().enumerate() {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    let mut expect = vec![0.0; 9];
                    if (0..3).contains(&nx) && (0..3).contains(&ny) {
                        expect[(ny * 3 + nx) as usize] = 0.8;
                        expect[s] = 0.2;
                    } else {
                        expect[s] = 1.0;
                    }
                    assert_eq!(env.row(a, s), expect.as_slice(), "state {s} action {a}");
                }
            }
        }
    }

    #[test]
    fn one_way_grid_has_asymmetric_pair() {
        let env = make_one_way_gridworld(3, 3, &[((1, 1), (2, 1)), ((0, 0), (1, 0))], 0.1).unwrap();
        let n = env.n_states();
        let witness = (0..n).any(|a| {
            (0..n).any(|b| {
                a != b
                    && (0..4).any(|u| env.prob(u, a, b) > 0.0)
                    && (0..4).all(|u| env.prob(u, b, a) == 0.0)
            })
        });
        assert!(witness);
    }

    #[test]
    fn grid_rejects_bad_edges_and_disconnection() {
        assert!(matches!(
            make_one_way_gridworld(3, 3, &[((0, 0), (2, 0))], 0.0),
            Err(Error::InvalidEdge(..))
        ));
        assert!(matches!(
            make_one_way_gridworld(3, 3, &[((0, 0), (0, 5))], 0.0),
            Err(Error::InvalidEdge(..))
        ));
        // 2x1 grid with the only passage one-way: 1 can never return to 0.
        assert!(matches!(
            make_one_way_gridworld(2, 1, &[((0, 0), (1, 0))], 0.0),
            Err(Error::NotStronglyConnected)
        ));
    }

    #[test]
    fn random_digraph_is_valid_and_deterministic() {
        let a = make_random_digraph_cmp(5, 2, 1, 7).unwrap();
        rows_ok(&a);
        assert!(a.is_strongly_connected());
        let b = make_random_digraph_cmp(5, 2, 1, 7).unwrap();
        assert_eq!(a.kernel(), b.kernel());
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = make_random_digraph_cmp(12, 3, 3, 1).unwrap();
        rows_ok(&c);
    }

    #[test]
    fn two_state_digraph_is_the_two_cycle() {
        // With one action and out-degree 1, the only strongly connected
        // 2-state digraph is 0 -> 1 -> 0.
        for seed in 0..20 {
            let env = make_random_digraph_cmp(2, 1, 1, seed).unwrap();
            assert_eq!(env.kernel(), &[0.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn policies_validate() {
        assert!(TabularPolicy::new(2, 2, vec![0.5, 0.5, 1.0, 0.1]).is_err());
        let p = TabularPolicy::deterministic(3, &[2, 0]).unwrap();
        assert_eq!(p.action_probs(0), &[0.0, 0.0, 1.0]);
        let env = make_one_way_gridworld(3, 1, &[], 0.0).unwrap();
        let g = TabularPolicy::epsilon_greedy_toward(&env, 2, 0.0);
        assert_eq!(g.action_probs(0)[1], 1.0);
    }

    #[test]
    fn serde_round_trip_validates() {
        let env = make_random_digraph_cmp(6, 2, 2, 3).unwrap();
        let raw = RawCmp {
            n_states: env.n_states,
            n_actions: env.n_actions,
            kernel: env.kernel.clone(),
            coords: None,
            tag: env.tag.clone(),
        };
        assert_eq!(FiniteCmp::try_from(raw).unwrap(), env);
        let bad = RawCmp {
            n_states: 2,
            n_actions: 1,
            kernel: vec![0.5, 0.6, 1.0, 0.0],
            coords: None,
            tag: "x".into(),
        };
        assert!(FiniteCmp::try_from(bad).is_err());
    }
}
