//! Perturbation check of the effective-horizon error bound.
//!
//! With one-hot features the latent transition operator is `T = P^T`. A
//! representation with one-step latent error at most `eps` is modelled as
//! `T + E` where every column `E e_x` has norm `eps`. Its compressed
//! transient operator gives the adjoint system
//! `(P_Q + F - I) omega_Q = 1` with `F = E_Q^T`, and the predicted hitting
//! time is `-omega_Q[x]`. Subtracting the exact Poisson system yields
//! `V_hat - V = (I - P_Q)^{-1} F V_hat`, so
//! `sup |V_hat - V| <= ||(I - P_Q)^{-1}||_inf * eps * ||omega||_2`, which is
//! `C_H ||omega|| eps / (1 - rho)` with `C_H = ||(I - P_Q)^{-1}||_inf (1 - rho)`.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::{killed_matrix, pivoted_solve, solve_hitting_times, spectral_radius, MarkovChain};
use crate::par::Exec;
use crate::rng;
use crate::{Error, Result};

const SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub goal: usize,
    pub epsilon: f64,
    /// Largest observed `sup_x |V - V_hat|` over trials.
    pub sup_error: f64,
    /// Error of the trial with the least slack `bound - sup_error`.
    pub tightest_error: f64,
    /// Bound of that trial.
    pub bound: f64,
    /// `||omega||_2` of the perturbed representer in that trial.
    pub omega_norm: f64,
    pub c_h: f64,
    pub rho: f64,
    /// `||(I - P_Q)^{-1}||_inf`.
    pub resolvent_norm: f64,
    pub trials: usize,
    /// Trials whose perturbed system was singular and therefore skipped.
    pub skipped: usize,
    pub violations: usize,
}

impl BoundReport {
    /// `C_H ||omega|| eps / (1 - rho)` for the given parameters.
    pub fn bound_formula(c_h: f64, omega_norm: f64, epsilon: f64, rho: f64) -> f64 {
        c_h * omega_norm * epsilon / (1.0 - rho)
    }

    /// The reported bound re-evaluated at another `epsilon` with this
    /// report's representer norm held fixed.
    pub fn bound_at(&self, epsilon: f64) -> f64 {
        Self::bound_formula(self.c_h, self.omega_norm, epsilon, self.rho)
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

pub fn verify_error_bound(
    chain: &MarkovChain,
    goal: usize,
    epsilon: f64,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<BoundReport> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be >= 0, got {epsilon}"
        )));
    }
    let exact = solve_hitting_times(chain, goal)?;
    let n = chain.n();
    let idx: Vec<usize> = (0..n).filter(|&x| x != goal).collect();
    let m = idx.len();
    let p_q = killed_matrix(chain, goal);
    let rho = spectral_radius(&p_q);
    let base = DMatrix::identity(m, m) - &p_q;
    let resolvent = pivoted_solve(base.clone(), &DMatrix::identity(m, m))
        .ok_or(Error::GoalUnreachable(goal))?;
    let resolvent_norm = resolvent
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let c_h = resolvent_norm * (1.0 - rho);
    let ones = DMatrix::from_element(m, 1, 1.0);

    // (sup_error, bound, omega_norm) per trial, None when singular
    let outcomes = exec.map_range(trials, |t| {
        let mut r = rng::indexed_stream(seed, "bound_trial", t as u64);
        let mut f = DMatrix::zeros(m, m);
        for (i, _) in idx.iter().enumerate() {
            // one-step latent error at state idx[i]: a full latent vector of
            // norm eps, of which only the transient coordinates survive
            let e: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, &y) in idx.iter().enumerate() {
                f[(i, j)] = epsilon * e[y] / norm;
            }
        }
        // (T_Q + E_Q - I)^T omega_Q = w_1, i.e. (P_Q + F - I) omega_Q = 1
        let omega_q = pivoted_solve(&f - &base, &ones)?;
        let mut sup = 0.0f64;
        for (i, &x) in idx.iter().enumerate() {
            // readout <e_g - e_x, omega> = -omega[x]
            sup = sup.max((-omega_q[(i, 0)] - exact.v[x]).abs());
        }
        let omega_norm = omega_q.norm();
        let bound = BoundReport::bound_formula(c_h, omega_norm, epsilon, rho);
        Some((sup, bound, omega_norm))
    });

    let mut report = BoundReport {
        goal,
        epsilon,
        sup_error: 0.0,
        tightest_error: 0.0,
        bound: f64::INFINITY,
        omega_norm: exact.v.iter().map(|v| v * v).sum::<f64>().sqrt(),
        c_h,
        rho,
        resolvent_norm,
        trials,
        skipped: 0,
        violations: 0,
    };
    let mut least_slack = f64::INFINITY;
    for o in outcomes {
        let Some((sup, bound, omega_norm)) = o else {
            report.skipped += 1;
            continue;
        };
        report.sup_error = report.sup_error.max(sup);
        if sup > bound + SLACK {
            report.violations += 1;
        }
        if bound - sup < least_slack {
            least_slack = bound - sup;
            report.tightest_error = sup;
            report.bound = bound;
            report.omega_norm = omega_norm;
        }
    }
    if report.bound.is_infinite() {
        report.bound = BoundReport::bound_formula(c_h, report.omega_norm, epsilon, rho);
    }
    Ok(report)
}
