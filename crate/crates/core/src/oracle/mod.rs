//! Closed-form ground truth for policy-induced chains.
//!
//! Everything here is dense 64-bit linear algebra with partial-pivoted LU,
//! meant for chains of at most [`MAX_STATES`] states.

mod bound;
mod fit;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::env::{bfs_reach, FiniteCmp, TabularPolicy};
use crate::par::Exec;
use crate::rng;
use crate::{Error, Result};

pub use bound::{verify_error_bound, BoundReport};
pub use fit::{check_sufficient_capacity, fit_displacement_map, CapacityReport, DisplacementFit};

pub const MAX_STATES: usize = 4096;
/// Smallest admissible |pivot| of `I - P_Q` before the goal counts as unreachable.
pub const SINGULAR_TOL: f64 = 1e-10;
const ROW_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 100_000;
const POWER_REL_TOL: f64 = 1e-10;
const DENSE_EIGEN_MAX_N: usize = 64;

/// Row-stochastic transition matrix of a policy-induced chain.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    p: DMatrix<f64>,
}

impl MarkovChain {
    pub fn from_matrix(p: DMatrix<f64>) -> Result<Self> {
        if p.nrows() != p.ncols() || p.nrows() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} chain",
                p.nrows(),
                p.ncols()
            )));
        }
        if p.nrows() > MAX_STATES {
            return Err(Error::TooManyStates(p.nrows(), MAX_STATES));
        }
        for (i, row) in p.row_iter().enumerate() {
            if row.iter().any(|&v| v.is_nan() || v < 0.0) || (row.sum() - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidArgument(format!(
                    "row {i} is not a distribution"
                )));
            }
        }
        Ok(Self { p })
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn step<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> usize {
        let row: Vec<f64> = self.p.row(x).iter().copied().collect();
        rng::sample_categorical(&row, rng)
    }

    /// Whether every state reaches `goal` with positive probability.
    pub fn goal_reachable(&self, goal: usize) -> bool {
        let n = self.n();
        let mut backward = vec![Vec::new(); n];
        for x in 0..n {
            for (y, preds) in backward.iter_mut().enumerate() {
                if self.p[(x, y)] > 0.0 {
                    preds.push(x);
                }
            }
        }
        bfs_reach(&backward, goal).iter().all(|&r| r)
    }
}

/// `P[x][x'] = sum_a pi(a|x) kernel[a][x][x']`.
pub fn induce_chain(env: &FiniteCmp, policy: &TabularPolicy) -> Result<MarkovChain> {
    policy.check_shape(env)?;
    let n = env.n_states();
    let mut p = DMatrix::zeros(n, n);
    for x in 0..n {
        for (a, &w) in policy.action_probs(x).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (y, &q) in env.row(a, x).iter().enumerate() {
                p[(x, y)] += w * q;
            }
        }
    }
    MarkovChain::from_matrix(p)
}

/// Expected hitting times of a fixed goal.
#[derive(Clone, Debug, PartialEq)]
pub struct HittingTable {
    pub goal: usize,
    pub v: Vec<f64>,
}

impl HittingTable {
    /// Max over transient states of `|v[x] - 1 - sum_x' P[x][x'] v[x']|`.
    pub fn bellman_residual(&self, chain: &MarkovChain) -> f64 {
        let p = chain.matrix();
        (0..chain.n())
            .filter(|&x| x != self.goal)
            .map(|x| {
                let next: f64 = (0..chain.n())
                    .filter(|&y| y != self.goal)
                    .map(|y| p[(x, y)] * self.v[y])
                    .sum();
                (self.v[x] - 1.0 - next).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn transient_index(n: usize, goal: usize) -> Vec<usize> {
    (0..n).filter(|&x| x != goal).collect()
}

/// `P` with the goal row and column deleted.
pub fn killed_matrix(chain: &MarkovChain, goal: usize) -> DMatrix<f64> {
    let idx = transient_index(chain.n(), goal);
    let p = chain.matrix();
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| p[(idx[i], idx[j])])
}

fn check_goal(chain: &MarkovChain, goal: usize) -> Result<()> {
    if goal >= chain.n() {
        return Err(Error::InvalidArgument(format!("goal {goal} out of range")));
    }
    if !chain.goal_reachable(goal) {
        return Err(Error::GoalUnreachable(goal));
    }
    Ok(())
}

/// Solve `a x = b` by partial-pivoted LU, failing if any pivot is below
/// [`SINGULAR_TOL`].
pub(crate) fn pivoted_solve(a: DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let lu = a.lu();
    let u = lu.u();
    if u.diagonal().iter().any(|d| d.abs() < SINGULAR_TOL) {
        return None;
    }
    lu.solve(b)
}

/// Solve the Poisson equation `(I - P_Q) v_Q = 1` with `v[goal] = 0`.
pub fn solve_hitting_times(chain: &MarkovChain, goal: usize) -> Result<HittingTable> {
    check_goal(chain, goal)?;
    let pq = killed_matrix(chain, goal);
    let m = pq.nrows();
    let a = DMatrix::identity(m, m) - pq;
    let ones = DMatrix::from_element(m, 1, 1.0);
    let vq = pivoted_solve(a, &ones).ok_or(Error::GoalUnreachable(goal))?;
    let mut v = vec![0.0; chain.n()];
    for (i, &x) in transient_index(chain.n(), goal).iter().enumerate() {
        v[x] = vq[(i, 0)];
    }
    Ok(HittingTable { goal, v })
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub episodes: usize,
}

/// Simulate `episodes` walks from `start` until `goal`. Episodes run in
/// fixed-size blocks, each with its own random stream, so the estimate does
/// not depend on `exec`.
pub fn monte_carlo_hitting_time(
    chain: &MarkovChain,
    start: usize,
    goal: usize,
    episodes: usize,
    seed: u64,
    exec: Exec,
) -> Result<McEstimate> {
    check_goal(chain, goal)?;
    if episodes < 2 {
        return Err(Error::InvalidArgument("need at least 2 episodes".into()));
    }
    const BLOCK: usize = 4096;
    let rows: Vec<Vec<f64>> = chain
        .matrix()
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    let n_blocks = episodes.div_ceil(BLOCK);
    let sums = exec.map_range(n_blocks, |b| {
        let mut rng = rng::indexed_stream(seed, "mc_hitting", b as u64);
        let count = BLOCK.min(episodes - b * BLOCK);
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for _ in 0..count {
            let mut x = start;
            let mut steps = 0u64;
            while x != goal {
                x = rng::sample_categorical(&rows[x], &mut rng);
                steps += 1;
            }
            let t = steps as f64;
            s1 += t;
            s2 += t * t;
        }
        (s1, s2)
    });
    let (s1, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = episodes as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_err: (var / n).sqrt(),
        episodes,
    })
}

/// Killed transition operator on the transient states and its spectral radius.
#[derive(Clone, Debug, PartialEq)]
pub struct TransientOperator {
    pub p_q: DMatrix<f64>,
    pub goal: usize,
    pub rho: f64,
}

pub fn transient_operator(chain: &MarkovChain, goal: usize) -> TransientOperator {
    let p_q = killed_matrix(chain, goal);
    let rho = spectral_radius(&p_q);
    TransientOperator { p_q, goal, rho }
}

/// Spectral radius of a nonnegative square matrix.
///
/// Power iteration from the all-ones vector, with convergence certified by
/// the Collatz-Wielandt bracket `min (Av)_i / v_i <= rho <= max (Av)_i / v_i`.
/// A vector that hits zero proves nilpotency. If the plain iteration stalls
/// (periodic or defective spectra), small matrices fall back to a dense
/// eigensolve; larger ones continue on the shifted matrix `A + I`, which has
/// the same Perron vector and a simple dominant eigenvalue.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let plain_iters = if n <= DENSE_EIGEN_MAX_N {
        2_000
    } else {
        POWER_MAX_ITERS / 2
    };
    match power_iteration(a, 0.0, plain_iters) {
        PowerOutcome::Converged(r) => return r,
        PowerOutcome::Nilpotent => return 0.0,
        PowerOutcome::Stalled(_) => {}
    }
    if n <= DENSE_EIGEN_MAX_N {
        if let Some(r) = dense_spectral_radius(a) {
            return r;
        }
    }
    match power_iteration(a, 1.0, POWER_MAX_ITERS) {
        PowerOutcome::Converged(r) | PowerOutcome::Stalled(r) => (r - 1.0).max(0.0),
        PowerOutcome::Nilpotent => 0.0,
    }
}

enum PowerOutcome {
    Converged(f64),
    Nilpotent,
    Stalled(f64),
}

fn power_iteration(a: &DMatrix<f64>, shift: f64, max_iters: usize) -> PowerOutcome {
    let n = a.nrows();
    let mut v = DVector::from_element(n, 1.0);
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let mut w = a * &v;
        if shift != 0.0 {
            w.axpy(shift, &v, 1.0);
        }
        let scale = w.amax();
        if scale == 0.0 {
            return PowerOutcome::Nilpotent;
        }
        if v.iter().all(|&x| x > 0.0) {
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for i in 0..n {
                let r = w[i] / v[i];
                lo = lo.min(r);
                hi = hi.max(r);
            }
            estimate = 0.5 * (lo + hi);
            if hi - lo <= POWER_REL_TOL * hi {
                return PowerOutcome::Converged(estimate);
            }
        }
        v = w / scale;
    }
    PowerOutcome::Stalled(estimate)
}

fn dense_spectral_radius(a: &DMatrix<f64>) -> Option<f64> {
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), 1e-14, 100_000)?;
    let eig = schur.complex_eigenvalues();
    Some(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Adjoint representer for one-hot features, gauged by `omega[goal] = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Representer {
    pub goal: usize,
    pub omega: DVector<f64>,
}

impl Representer {
    /// `<e_goal - e_x, omega>`, the one-hot hitting-time readout.
    pub fn readout(&self, x: usize) -> f64 {
        self.omega[self.goal] - self.omega[x]
    }

    /// `<phi_g - phi_x, omega>` for arbitrary latent vectors.
    pub fn readout_latent(&self, phi_g: &DVector<f64>, phi_x: &DVector<f64>) -> f64 {
        (phi_g - phi_x).dot(&self.omega)
    }
}

/// Solve `(T_Q - I)^T omega_Q = w_1` where `T = P^T` is the one-hot latent
/// transition operator, `T_Q` its compression to the transient span and `w_1`
/// the unit-cost representer (all ones on transient coordinates).
pub fn solve_representer(chain: &MarkovChain, goal: usize) -> Result<Representer> {
    check_goal(chain, goal)?;
    let n = chain.n();
    let latent_op = chain.matrix().transpose();
    let idx = transient_index(n, goal);
    let m = idx.len();
    let t_q = DMatrix::from_fn(m, m, |i, j| latent_op[(idx[i], idx[j])]);
    let adjoint = (t_q - DMatrix::identity(m, m)).transpose();
    let unit_cost = DMatrix::from_element(m, 1, 1.0);
    let omega_q = pivoted_solve(adjoint, &unit_cost).ok_or(Error::GoalUnreachable(goal))?;
    let mut omega = DVector::zeros(n);
    for (i, &x) in idx.iter().enumerate() {
        omega[x] = omega_q[(i, 0)];
    }
    Ok(Representer { goal, omega })
}

/// Random strongly connected chain: a random sparse digraph CMP under a
/// random full-support policy. Used by verification suites and tests.
pub fn random_chain(n: usize, seed: u64) -> Result<MarkovChain> {
    let mut r = rng::stream(seed, "random_chain");
    let n_actions = r.random_range(1..=3);
    let out_degree = r.random_range(1..=3usize).min(n);
    let env = crate::env::make_random_digraph_cmp(n, n_actions, out_degree.max(2), r.random())?;
    let policy = TabularPolicy::random(n, n_actions, &mut r);
    induce_chain(&env, &policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    pub(crate) fn path_chain() -> MarkovChain {
        // 0 -> 1 -> 2, goal 2 absorbing-ish (returns to 0 to stay stochastic)
        MarkovChain::from_matrix(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        ))
        .unwrap()
    }

    #[test]
    fn induced_chain_mixes_slices() {
        let env = crate::env::make_one_way_gridworld(2, 2, &[], 0.1).unwrap();
        let det = TabularPolicy::deterministic(4, &[1, 1, 1, 1]).unwrap();
        let p = induce_chain(&env, &det).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                assert_eq!(p.matrix()[(x, y)], env.prob(1, x, y));
            }
        }
        let env2 = crate::env::make_random_digraph_cmp(6, 2, 2, 3).unwrap();
        let p = induce_chain(&env2, &TabularPolicy::uniform(6, 2)).unwrap();
        for x in 0..6 {
            for y in 0..6 {
                let mean = 0.5 * (env2.prob(0, x, y) + env2.prob(1, x, y));
                assert_abs_diff_eq!(p.matrix()[(x, y)], mean, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn random_induced_rows_are_stochastic() {
        for seed in 0..20 {
            let c = random_chain(3 + (seed as usize % 20), seed).unwrap();
            for row in c.matrix().row_iter() {
                assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn path_hitting_times() {
        let h = solve_hitting_times(&path_chain(), 2).unwrap();
        assert_abs_diff_eq!(h.v[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h.v[1], 1.0, epsilon = 1e-12);
        assert_eq!(h.v[2], 0.0);
    }

    #[test]
    fn geometric_wait_matches_monte_carlo() {
        let c =
            MarkovChain::from_matrix(DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5])).unwrap();
        let h = solve_hitting_times(&c, 1).unwrap();
        assert_abs_diff_eq!(h.v[0], 2.0, epsilon = 1e-12);
        let mc = monte_carlo_hitting_time(&c, 0, 1, 1_000_000, 17, Exec::Parallel).unwrap();
        assert!((mc.mean - 2.0).abs() <= 3.0 * mc.std_err, "{mc:?}");
    }

    #[test]
    fn monte_carlo_is_exec_independent() {
        let c = random_chain(8, 2).unwrap();
        let a = monte_carlo_hitting_time(&c, 0, 5, 10_000, 1, Exec::Sequential).unwrap();
        let b = monte_carlo_hitting_time(&c, 0, 5, 10_000, 1, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_goal_is_reported() {
        // state 1 is absorbing, so goal 0 cannot be hit from 1
        let c =
            MarkovChain::from_matrix(DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0])).unwrap();
        assert!(matches!(
            solve_hitting_times(&c, 0),
            Err(Error::GoalUnreachable(0))
        ));
        assert!(matches!(
            solve_representer(&c, 0),
            Err(Error::GoalUnreachable(0))
        ));
        assert!(transient_operator(&c, 0).rho >= 1.0 - 1e-12);
    }

    #[test]
    fn spectral_radius_cases() {
        let t = transient_operator(&path_chain(), 2);
        assert_eq!(t.rho, 0.0);
        let c =
            MarkovChain::from_matrix(DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.4, 0.6])).unwrap();
        assert_abs_diff_eq!(transient_operator(&c, 1).rho, 0.3, epsilon = 1e-14);
        // periodic block: eigenvalues +-0.9
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 0.9, 0.9, 0.0]);
        assert_abs_diff_eq!(spectral_radius(&m), 0.9, epsilon = 1e-10);
        // Jordan-like reducible block
        let m = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.0, 0.5, 0.4, 0.0, 0.0, 0.2]);
        assert_abs_diff_eq!(spectral_radius(&m), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn rho_below_one_iff_solvable() {
        for seed in 0..40 {
            let c = random_chain(4 + seed as usize % 12, seed).unwrap();
            for goal in 0..c.n() {
                let rho = transient_operator(&c, goal).rho;
                assert_eq!(rho < 1.0 - 1e-12, solve_hitting_times(&c, goal).is_ok());
            }
        }
    }

    #[test]
    fn representer_on_path() {
        let r = solve_representer(&path_chain(), 2).unwrap();
        assert_abs_diff_eq!(r.omega[0], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.omega[1], -1.0, epsilon = 1e-12);
        assert_eq!(r.omega[2], 0.0);
        assert_eq!(r.readout(2), 0.0);
    }

    #[test]
    fn representer_readout_equals_poisson() {
        for seed in 0..20 {
            let c = random_chain(2 + seed as usize % 29, 100 + seed).unwrap();
            for goal in 0..c.n() {
                let h = solve_hitting_times(&c, goal).unwrap();
                let r = solve_representer(&c, goal).unwrap();
                for x in 0..c.n() {
                    assert!((r.readout(x) - h.v[x]).abs() < 1e-8);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn poisson_satisfies_bellman(seed in 0u64..10_000, n in 2usize..40) {
            let c = random_chain(n, seed).unwrap();
            let goal = (seed as usize) % n;
            let h = solve_hitting_times(&c, goal).unwrap();
            prop_assert!(h.bellman_residual(&c) < 1e-9);
            prop_assert_eq!(h.v[goal], 0.0);
            for (x, &v) in h.v.iter().enumerate() {
                if x != goal { prop_assert!(v >= 1.0 - 1e-12); }
            }
        }

        #[test]
        fn self_loop_mass_never_lowers_rho(seed in 0u64..10_000, n in 3usize..20, frac in 0.05f64..1.0) {
            let c = random_chain(n, seed).unwrap();
            let goal = 0;
            let base = transient_operator(&c, goal).rho;
            let mut p = c.matrix().clone();
            // move part of some transient state's goal-bound mass onto a self-loop
            if let Some(x) = (1..n).find(|&x| p[(x, goal)] > 0.0) {
                let delta = frac * p[(x, goal)];
                p[(x, goal)] -= delta;
                p[(x, x)] += delta;
                let c2 = MarkovChain::from_matrix(p).unwrap();
                prop_assert!(transient_operator(&c2, goal).rho >= base - 1e-9);
            }
        }
    }
}
