//! Exact-oracle verification suites behind `hitgeo verify`.
//!
//! Every check produces one row: the measured value, the threshold it is
//! held to, and whether it passed.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use hitgeo_core::env::{make_random_digraph_cmp, TabularPolicy};
use hitgeo_core::oracle::{
    fit_displacement_map, induce_chain, monte_carlo_hitting_time, random_chain,
    solve_hitting_times, solve_representer, verify_error_bound, MarkovChain,
};
use hitgeo_core::par::Exec;
use hitgeo_core::rng::{self, derive_seed};

use crate::error::Result;

pub const BELLMAN_TOL: f64 = 1e-9;
pub const MC_STD_ERRS: f64 = 3.0;
pub const REPRESENTATION_TOL: f64 = 1e-8;
pub const ROTATED_FIT_TOL: f64 = 1e-8;
pub const RANDOM_FIT_FLOOR: f64 = 0.1;
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Poisson,
    MonteCarlo,
    Representation,
    IsoRotated,
    IsoRandom,
    Bound,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Poisson => "poisson",
            Suite::MonteCarlo => "monte_carlo",
            Suite::Representation => "representation",
            Suite::IsoRotated => "iso_rotated",
            Suite::IsoRandom => "iso_random",
            Suite::Bound => "bound",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub suite: Suite,
    pub chain: usize,
    pub n_states: usize,
    pub goal: Option<usize>,
    pub epsilon: Option<f64>,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Chains per suite.
    pub chains: usize,
    pub max_states: usize,
    pub mc_chains: usize,
    pub mc_episodes: usize,
    pub bound_trials: usize,
    pub epsilons: Vec<f64>,
    pub iso_states: usize,
    pub iso_dim: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            chains: 20,
            max_states: 50,
            mc_chains: 3,
            mc_episodes: 100_000,
            bound_trials: 10,
            epsilons: vec![1e-3, 1e-2, 1e-1],
            iso_states: 40,
            iso_dim: 8,
        }
    }
}

fn chain_for(opts: &VerifyOptions, suite: &str, i: usize) -> Result<MarkovChain> {
    let mut r = rng::indexed_stream(opts.seed, suite, i as u64);
    let n = r.random_range(2..=opts.max_states.max(2));
    Ok(random_chain(n, r.random())?)
}

/// Bellman residual of every goal on `chains` random chains, plus Monte
/// Carlo agreement on the first `mc_chains`.
pub fn poisson_suite(opts: &VerifyOptions, exec: Exec) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for i in 0..opts.chains {
        let chain = chain_for(opts, "verify/poisson", i)?;
        let mut worst = 0.0f64;
        for g in 0..chain.n() {
            worst = worst.max(solve_hitting_times(&chain, g)?.bellman_residual(&chain));
        }
        rows.push(CheckRow {
            suite: Suite::Poisson,
            chain: i,
            n_states: chain.n(),
            goal: None,
            epsilon: None,
            value: worst,
            threshold: BELLMAN_TOL,
            pass: worst < BELLMAN_TOL,
        });
    }
    for i in 0..opts.mc_chains.min(opts.chains) {
        let chain = chain_for(opts, "verify/poisson", i)?;
        let mut r = rng::indexed_stream(opts.seed, "verify/mc_pair", i as u64);
        let goal = r.random_range(0..chain.n());
        let start = (goal + r.random_range(1..chain.n())) % chain.n();
        let exact = solve_hitting_times(&chain, goal)?.v[start];
        let seed = derive_seed(opts.seed, &format!("verify/mc/{i}"));
        let est = monte_carlo_hitting_time(&chain, start, goal, opts.mc_episodes, seed, exec)?;
        let diff = (est.mean - exact).abs();
        let thr = MC_STD_ERRS * est.std_err;
        rows.push(CheckRow {
            suite: Suite::MonteCarlo,
            chain: i,
            n_states: chain.n(),
            goal: Some(goal),
            epsilon: None,
            value: diff,
            threshold: thr,
            pass: diff <= thr,
        });
    }
    Ok(rows)
}

/// One-hot representer readouts `<e_g - e_x, omega_g>` against exact
/// hitting times over all pairs of random CMPs under random policies.
pub fn representation_suite(opts: &VerifyOptions) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for i in 0..opts.chains {
        let mut r = rng::indexed_stream(opts.seed, "verify/representation", i as u64);
        let n = r.random_range(2..=opts.max_states.max(2));
        let actions = r.random_range(1..=3);
        let out = r.random_range(2..=3);
        let env = make_random_digraph_cmp(n, actions, out, r.random())?;
        let policy = TabularPolicy::random(n, actions, &mut r);
        let chain = induce_chain(&env, &policy)?;
        let mut worst = 0.0f64;
        for g in 0..n {
            let v = solve_hitting_times(&chain, g)?;
            let rep = solve_representer(&chain, g)?;
            let e = |s: usize| nalgebra::DVector::from_fn(n, |k, _| if k == s { 1.0 } else { 0.0 });
            for x in 0..n {
                worst = worst.max((rep.readout_latent(&e(g), &e(x)) - v.v[x]).abs());
            }
        }
        rows.push(CheckRow {
            suite: Suite::Representation,
            chain: i,
            n_states: n,
            goal: None,
            epsilon: None,
            value: worst,
            threshold: REPRESENTATION_TOL,
            pass: worst < REPRESENTATION_TOL,
        });
    }
    Ok(rows)
}

fn gaussian(rows: usize, cols: usize, r: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

/// Displacement-map fits: a rotated copy of a representation must fit
/// exactly, an independent one must not.
pub fn isomorphism_suite(opts: &VerifyOptions) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let (n, d) = (opts.iso_states, opts.iso_dim);
    let states: Vec<usize> = (0..n).collect();
    for i in 0..opts.chains {
        let mut r = rng::indexed_stream(opts.seed, "verify/isomorphism", i as u64);
        let phi_a = gaussian(n, d, &mut r);
        let rot = gaussian(d, d, &mut r).qr().q();
        // rows are states, so phi_b(x) = R phi_a(x) reads phi_a R^T
        let phi_b = &phi_a * rot.transpose();
        let fit = fit_displacement_map(&phi_a, &phi_b, 0, &states)?;
        rows.push(CheckRow {
            suite: Suite::IsoRotated,
            chain: i,
            n_states: n,
            goal: None,
            epsilon: None,
            value: fit.relative_residual,
            threshold: ROTATED_FIT_TOL,
            pass: fit.relative_residual < ROTATED_FIT_TOL,
        });
        let other = gaussian(n, d, &mut r);
        let fit = fit_displacement_map(&phi_a, &other, 0, &states)?;
        rows.push(CheckRow {
            suite: Suite::IsoRandom,
            chain: i,
            n_states: n,
            goal: None,
            epsilon: None,
            value: fit.relative_residual,
            threshold: RANDOM_FIT_FLOOR,
            pass: fit.relative_residual > RANDOM_FIT_FLOOR,
        });
    }
    Ok(rows)
}

/// Perturbation bound on random chains at every epsilon.
pub fn bound_suite(opts: &VerifyOptions, exec: Exec) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for i in 0..opts.chains {
        let chain = chain_for(opts, "verify/bound", i)?;
        let mut r = rng::indexed_stream(opts.seed, "verify/bound_goal", i as u64);
        let goal = r.random_range(0..chain.n());
        for &eps in &opts.epsilons {
            let seed = derive_seed(opts.seed, &format!("verify/bound/{i}/{eps:e}"));
            let rep = verify_error_bound(&chain, goal, eps, opts.bound_trials, seed, exec)?;
            rows.push(CheckRow {
                suite: Suite::Bound,
                chain: i,
                n_states: chain.n(),
                goal: Some(goal),
                epsilon: Some(eps),
                value: rep.tightest_error,
                threshold: rep.bound + BOUND_SLACK,
                pass: rep.passed(),
            });
        }
    }
    Ok(rows)
}

pub fn run_all(opts: &VerifyOptions, exec: Exec) -> Result<Vec<CheckRow>> {
    let mut rows = poisson_suite(opts, exec)?;
    rows.extend(representation_suite(opts)?);
    rows.extend(isomorphism_suite(opts)?);
    rows.extend(bound_suite(opts, exec)?);
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[CheckRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "suite",
        "chain",
        "n_states",
        "goal",
        "epsilon",
        "value",
        "threshold",
        "pass",
    ])?;
    for row in rows {
        w.write_record([
            row.suite.name().to_string(),
            row.chain.to_string(),
            row.n_states.to_string(),
            row.goal.map(|g| g.to_string()).unwrap_or_default(),
            row.epsilon.map(|e| format!("{e:e}")).unwrap_or_default(),
            format!("{:e}", row.value),
            format!("{:e}", row.threshold),
            if row.pass { "pass" } else { "fail" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line per suite: `suite passed/total`.
pub fn summarize(rows: &[CheckRow]) -> String {
    let mut out = String::new();
    let mut suites: Vec<Suite> = Vec::new();
    for r in rows {
        if !suites.contains(&r.suite) {
            suites.push(r.suite);
        }
    }
    for s in suites {
        let mine: Vec<&CheckRow> = rows.iter().filter(|r| r.suite == s).collect();
        let ok = mine.iter().filter(|r| r.pass).count();
        out.push_str(&format!("{:<15} {ok}/{}\n", s.name(), mine.len()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyOptions {
        VerifyOptions {
            chains: 4,
            max_states: 12,
            mc_chains: 1,
            mc_episodes: 20_000,
            bound_trials: 4,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn small_suites_pass() {
        let rows = run_all(&small(), Exec::Sequential).unwrap();
        assert!(rows.iter().all(|r| r.pass), "{}", summarize(&rows));
        assert_eq!(rows.iter().filter(|r| r.suite == Suite::Bound).count(), 12);
    }

    #[test]
    fn exec_does_not_change_rows() {
        let o = small();
        assert_eq!(
            bound_suite(&o, Exec::Sequential).unwrap(),
            bound_suite(&o, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let rows = isomorphism_suite(&small()).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert!(text.starts_with("suite,chain,n_states,goal,epsilon,value,threshold,pass"));
    }
}
