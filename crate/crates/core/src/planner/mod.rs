//! Test-time planning over a coreset of embedded states.

mod eval;
mod graph;
mod plan;

pub use eval::{evaluate, EvalReport, EvalRow, EvalSpec, PlannerKind};
pub use graph::{
    construct_graph, construct_undirected_graph, cost_matrix, shortest_paths, CostMatrix,
    PlanGraph, ShortestPaths,
};
pub use plan::{rec_mid_plan, GraphPlanner, PlanResult};

use nalgebra::DMatrix;

use crate::train::{directed_score, IelModel};
use crate::{Error, Result};

/// Frozen embeddings of every state: `phi` and `omega`, one column each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub phi: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

impl LatentTable {
    pub fn new(phi: DMatrix<f64>, omega: DMatrix<f64>) -> Result<Self> {
        if phi.shape() != omega.shape() {
            return Err(Error::ShapeMismatch(
                "phi and omega tables differ in shape".into(),
            ));
        }
        Ok(Self { phi, omega })
    }

    pub fn from_model(model: &IelModel) -> Result<Self> {
        Self::new(model.embed_all()?, model.task_all()?)
    }

    pub fn n_states(&self) -> usize {
        self.phi.ncols()
    }

    pub fn phi(&self, s: usize) -> &[f64] {
        let d = self.phi.nrows();
        &self.phi.as_slice()[s * d..(s + 1) * d]
    }

    pub fn omega(&self, s: usize) -> &[f64] {
        let d = self.omega.nrows();
        &self.omega.as_slice()[s * d..(s + 1) * d]
    }

    /// `d(s, t, g)`.
    pub fn score(&self, s: usize, t: usize, g: usize, beta: f64) -> f64 {
        directed_score(self.phi(s), self.phi(t), self.omega(g), beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coreset {
    pub members: Vec<usize>,
    /// `latent_dim x |members|`.
    pub embeddings: DMatrix<f64>,
    pub kernel_sigma: f64,
}

impl Coreset {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Marginal gains below this end the greedy selection.
pub const DPP_MIN_GAIN: f64 = 1e-12;

/// Greedy MAP selection for a DPP with Gaussian kernel
/// `exp(-||x - y||^2 / (2 sigma^2))`, by incremental Cholesky.
///
/// `embeddings` holds one candidate per column and `ids[j]` names column `j`.
/// Each round adds the candidate with the largest conditional variance
/// `d_j^2` (the determinant ratio), lowest index first on ties.
pub fn dpp_greedy_coreset(
    embeddings: &DMatrix<f64>,
    ids: &[usize],
    budget: usize,
    sigma: f64,
) -> Result<Coreset> {
    let m = embeddings.ncols();
    if ids.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{} ids for {m} candidates",
            ids.len()
        )));
    }
    if budget < 2 {
        return Err(Error::InvalidArgument(format!(
            "budget must be >= 2, got {budget}"
        )));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let order = dpp_greedy_order(embeddings, budget, sigma);
    if order.len() < 2 {
        return Err(Error::TooFewCandidates(order.len()));
    }
    Ok(Coreset {
        members: order.iter().map(|&j| ids[j]).collect(),
        embeddings: embeddings.select_columns(order.iter()),
        kernel_sigma: sigma,
    })
}

pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Column indices in selection order.
fn dpp_greedy_order(emb: &DMatrix<f64>, budget: usize, sigma: f64) -> Vec<usize> {
    let m = emb.ncols();
    let col = |j: usize| emb.column(j).as_slice().to_vec();
    let cols: Vec<Vec<f64>> = (0..m).map(col).collect();
    let mut d2: Vec<f64> = vec![1.0; m];
    let mut c: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut chosen = vec![false; m];
    let mut order = Vec::new();
    while order.len() < budget.min(m) {
        let mut best: Option<usize> = None;
        for i in 0..m {
            if !chosen[i] && best.is_none_or(|b| d2[i] > d2[b]) {
                best = Some(i);
            }
        }
        let Some(j) = best else { break };
        if d2[j] < DPP_MIN_GAIN {
            break;
        }
        chosen[j] = true;
        order.push(j);
        let dj = d2[j].sqrt();
        let cj = c[j].clone();
        for i in 0..m {
            if chosen[i] {
                continue;
            }
            let k = gaussian_kernel(&cols[j], &cols[i], sigma);
            let dot: f64 = cj.iter().zip(&c[i]).map(|(a, b)| a * b).sum();
            let e = (k - dot) / dj;
            c[i].push(e);
            d2[i] -= e * e;
        }
    }
    order
}

/// `log det K_S` for the Gaussian kernel restricted to columns `subset`.
pub fn kernel_log_det(emb: &DMatrix<f64>, subset: &[usize], sigma: f64) -> f64 {
    let k = DMatrix::from_fn(subset.len(), subset.len(), |a, b| {
        gaussian_kernel(
            emb.column(subset[a]).as_slice(),
            emb.column(subset[b]).as_slice(),
            sigma,
        )
    });
    match k.cholesky() {
        Some(ch) => 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}
