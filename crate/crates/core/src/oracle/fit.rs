//! Least-squares fits between representations.
//!
//! Embeddings are passed as `n_states x d` matrices, one row per state.

use nalgebra::DMatrix;

use super::induce_chain;
use crate::env::{FiniteCmp, TabularPolicy};
use crate::{Error, Result};

const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementFit {
    /// `d_b x d_a` map taking `phi_a` displacements to `phi_b` displacements.
    pub map: DMatrix<f64>,
    /// `sum ||M da - db||^2 / sum ||db||^2` (0 when every `db` vanishes).
    pub relative_residual: f64,
    pub rank_a: usize,
    pub rank_b: usize,
    /// The `phi_a` displacement span cannot carry the `phi_b` span.
    pub rank_deficient: bool,
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top.max(1.0)).count()
}

fn displacements(phi: &DMatrix<f64>, x0: usize, states: &[usize]) -> DMatrix<f64> {
    let d = phi.ncols();
    DMatrix::from_fn(d, states.len(), |i, j| phi[(states[j], i)] - phi[(x0, i)])
}

/// Fit `M` minimizing `sum_g ||M (phi_a(g) - phi_a(x0)) - (phi_b(g) - phi_b(x0))||^2`.
pub fn fit_displacement_map(
    phi_a: &DMatrix<f64>,
    phi_b: &DMatrix<f64>,
    x0: usize,
    states: &[usize],
) -> Result<DisplacementFit> {
    if phi_a.nrows() != phi_b.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} embedded states",
            phi_a.nrows(),
            phi_b.nrows()
        )));
    }
    let n = phi_a.nrows();
    if x0 >= n || states.iter().any(|&s| s >= n) {
        return Err(Error::InvalidArgument("state index out of range".into()));
    }
    if states.len() < phi_b.ncols() {
        return Err(Error::TooFewStates {
            need: phi_b.ncols(),
            got: states.len(),
        });
    }
    let da = displacements(phi_a, x0, states);
    let db = displacements(phi_b, x0, states);
    let pinv = da
        .clone()
        .svd(true, true)
        .pseudo_inverse(RANK_TOL * da.amax().max(1.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let map = &db * pinv;
    let resid = (&map * &da - &db).norm_squared();
    let total = db.norm_squared();
    let relative_residual = if total > 0.0 { resid / total } else { resid };
    let rank_a = numerical_rank(&da);
    let rank_b = numerical_rank(&db);
    Ok(DisplacementFit {
        map,
        relative_residual,
        rank_a,
        rank_b,
        rank_deficient: rank_a == 0 || rank_a < rank_b,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapacityReport {
    /// `max_x ||E[phi(x')|x] - T phi(x)||`.
    pub eps_hat: f64,
    /// Best latent operator `T` (`d x d`, acting on column vectors).
    pub operator: DMatrix<f64>,
    pub displacement_rank: usize,
    /// All states share one embedding, so no displacement readout exists.
    pub degenerate: bool,
}

/// Least-squares latent transition operator for `phi` under the chain
/// induced by `policy`, and its worst one-step residual.
pub fn check_sufficient_capacity(
    env: &FiniteCmp,
    policy: &TabularPolicy,
    phi: &DMatrix<f64>,
) -> Result<CapacityReport> {
    if phi.nrows() != env.n_states() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings for {} states",
            phi.nrows(),
            env.n_states()
        )));
    }
    let chain = induce_chain(env, policy)?;
    let next = chain.matrix() * phi;
    // phi X = next  =>  T = X^T
    let x = phi
        .clone()
        .svd(true, true)
        .solve(&next, RANK_TOL * phi.amax().max(1.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let resid = &next - phi * &x;
    let eps_hat = resid.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let all: Vec<usize> = (0..phi.nrows()).collect();
    let displacement_rank = numerical_rank(&displacements(phi, 0, &all));
    Ok(CapacityReport {
        eps_hat,
        operator: x.transpose(),
        displacement_rank,
        degenerate: displacement_rank == 0,
    })
}
