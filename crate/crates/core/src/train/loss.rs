//! Loss functions with their analytic gradients.

use nalgebra::DMatrix;

use super::{Gathered, LatentPolicy, StateEncoder, TaskEncoder, TrainConfig};
use crate::env::{TransitionBatch, TupleBatch};
use crate::{Error, Result};

/// Stabilizer added to every norm used as a denominator.
pub const NORM_EPS: f64 = 1e-12;
/// Upper clip of the advantage weights.
pub const WEIGHT_CLIP: f64 = 100.0;

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    v.iter().map(|x| x / n).collect()
}

/// Backward pass of `v / (||v|| + eps)`.
fn normalize_backward(v: &[f64], upstream: &[f64]) -> Vec<f64> {
    let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = 1.0 / (r + NORM_EPS);
    let dot: f64 = v.iter().zip(upstream).map(|(a, b)| a * b).sum();
    let k = if r > 0.0 { dot * s * s / r } else { 0.0 };
    v.iter().zip(upstream).map(|(x, u)| s * u - k * x).collect()
}

/// `|tau - 1(residual < 0)|`.
pub fn expectile_weight(tau: f64, residual: f64) -> f64 {
    (tau - if residual < 0.0 { 1.0 } else { 0.0 }).abs()
}

/// `(1 - gamma^h) / (1 - gamma)`.
pub fn discounted_label(gamma: f64, h: u32) -> f64 {
    (1.0 - gamma.powi(h as i32)) / (1.0 - gamma)
}

/// `||t - s|| exp(beta (1 - cos xi))` where `xi` is the angle between the
/// displacement `t - s` and `omega`.
pub fn directed_score(phi_s: &[f64], phi_t: &[f64], omega: &[f64], beta: f64) -> f64 {
    directed_score_grad(phi_s, phi_t, omega, beta).0
}

/// Score and its gradient with respect to the displacement `t - s`.
pub fn directed_score_grad(
    phi_s: &[f64],
    phi_t: &[f64],
    omega: &[f64],
    beta: f64,
) -> (f64, Vec<f64>) {
    let delta: Vec<f64> = phi_t.iter().zip(phi_s).map(|(t, s)| t - s).collect();
    let r = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let a = omega.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    let b = r + NORM_EPS;
    let dot: f64 = delta.iter().zip(omega).map(|(x, w)| x * w).sum();
    let cos = dot / (b * a);
    let e = (beta * (1.0 - cos)).exp();
    let value = r * e;
    let grad = delta
        .iter()
        .zip(omega)
        .map(|(&d, &w)| {
            let dr = if r > 0.0 { d / r } else { 0.0 };
            let dcos = w / (b * a) - dot / (b * b * a) * dr;
            e * dr - value * beta * dcos
        })
        .collect();
    (value, grad)
}

fn cosine(delta: &[f64], omega: &[f64]) -> f64 {
    let r = delta.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    let a = omega.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    delta.iter().zip(omega).map(|(x, w)| x * w).sum::<f64>() / (r * a)
}

/// InfoNCE of paired embeddings (`d x N` each) and its gradients.
///
/// Both sides are unit-normalized, `S = z_hat^T z_hat' / temp`, and the loss
/// is the mean cross-entropy of each row against its diagonal entry.
pub fn info_nce_from_embeddings(
    z: &DMatrix<f64>,
    z_aug: &DMatrix<f64>,
    temp: f64,
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let n = z.ncols();
    let unit = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for mut c in out.column_iter_mut() {
            let v = normalize(c.as_slice());
            c.copy_from_slice(&v);
        }
        out
    };
    let zh = unit(z);
    let zah = unit(z_aug);
    let s = zh.transpose() * &zah / temp;
    let mut loss = 0.0;
    let mut ds = DMatrix::zeros(n, n);
    for i in 0..n {
        let row_max = s.row(i).max();
        let exps: Vec<f64> = s.row(i).iter().map(|v| (v - row_max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += row_max + total.ln() - s[(i, i)];
        for j in 0..n {
            ds[(i, j)] = (exps[j] / total - if i == j { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;
    let dzh = &zah * ds.transpose() / temp;
    let dzah = &zh * &ds / temp;
    let back = |raw: &DMatrix<f64>, up: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(raw.nrows(), raw.ncols());
        for j in 0..raw.ncols() {
            let g = normalize_backward(raw.column(j).as_slice(), up.column(j).as_slice());
            out.column_mut(j).copy_from_slice(&g);
        }
        out
    };
    (loss, back(z, &dzh), back(z_aug, &dzah))
}

/// InfoNCE between clean inputs `x` and `x + noise` (both `feat x N`).
pub fn nce_loss_with_noise(
    enc: &TaskEncoder,
    x: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    temp: f64,
) -> Result<(f64, Vec<f64>)> {
    if x.shape() != noise.shape() {
        return Err(Error::ShapeMismatch(
            "noise shape differs from inputs".into(),
        ));
    }
    let (z, tape) = enc.net.forward_tape(x)?;
    let (za, tape_a) = enc.net.forward_tape(&(x + noise))?;
    let (loss, dz, dza) = info_nce_from_embeddings(&z, &za, temp);
    let mut grads = vec![0.0; enc.net.n_params()];
    enc.net.backward(&tape, &dz, &mut grads)?;
    enc.net.backward(&tape_a, &dza, &mut grads)?;
    Ok((loss, grads))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// `mean(w delta^2)`.
    pub td_term: f64,
    /// `mean(w' l^2)` before the `kappa` factor.
    pub hit_term: f64,
    pub total: f64,
    pub mean_cos: f64,
    pub mean_distance: f64,
}

/// Per-tuple quantities of the embedding loss, exposed for inspection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbTerms {
    pub target: Vec<f64>,
    pub delta: Vec<f64>,
    pub w: Vec<f64>,
    pub ell: Vec<f64>,
    pub w_hit: Vec<f64>,
}

/// Embedding loss over a tuple batch; gradients are for `phi.net` only.
pub fn emb_loss(
    phi: &StateEncoder,
    task: &TaskEncoder,
    features: &DMatrix<f64>,
    batch: &TupleBatch,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, EmbTerms, Vec<f64>)> {
    if !task.frozen {
        return Err(Error::FrozenViolation);
    }
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let online = Gathered::new(features, &[&batch.s, &batch.u, &batch.g]);
    let target = Gathered::new(features, &[&batch.g, &batch.s_next]);
    let omega = Gathered::new(features, &[&batch.g]);
    let (phi_on, tape) = phi.net.forward_tape(&online.inputs)?;
    let phi_tg = phi.target.forward_batch(&target.inputs)?;
    let om = task.net.forward_batch(&omega.inputs)?;

    let col = |m: &DMatrix<f64>, j: usize| m.column(j).as_slice().to_vec();
    let mut up = DMatrix::zeros(phi_on.nrows(), phi_on.ncols());
    let mut out = LossBreakdown::default();
    let mut terms = EmbTerms::default();
    for i in 0..n {
        let (js, ju, jg) = (
            online.col(batch.s[i]),
            online.col(batch.u[i]),
            online.col(batch.g[i]),
        );
        let w_g = col(&om, omega.col(batch.g[i]));
        let w_hat = normalize(&w_g);

        let t = if batch.s[i] == batch.g[i] {
            0.0
        } else {
            let d_next = directed_score(
                &col(&phi_tg, target.col(batch.s_next[i])),
                &col(&phi_tg, target.col(batch.g[i])),
                &w_g,
                cfg.beta,
            );
            1.0 + cfg.gamma * d_next
        };
        let (ps, pu, pg) = (col(&phi_on, js), col(&phi_on, ju), col(&phi_on, jg));
        let (d, dd) = directed_score_grad(&ps, &pg, &w_g, cfg.beta);
        let delta = t - d;
        let w = expectile_weight(cfg.tau_v, delta);

        let proj: f64 = pu
            .iter()
            .zip(&ps)
            .zip(&w_hat)
            .map(|((u, s), w)| (u - s) * w)
            .sum();
        let ell = discounted_label(cfg.gamma, batch.h[i]) - proj;
        let w_hit = expectile_weight(cfg.tau_h, ell);

        out.td_term += w * delta * delta;
        out.hit_term += w_hit * ell * ell;
        let disp: Vec<f64> = pg.iter().zip(&ps).map(|(g, s)| g - s).collect();
        out.mean_cos += cosine(&disp, &w_g);
        out.mean_distance += d;

        // d/dD of w delta^2 is -2 w delta; d/dl of kappa w' l^2 is 2 kappa w' l
        let gd = -2.0 * w * delta / n as f64;
        let gl = 2.0 * cfg.kappa * w_hit * ell / n as f64;
        for k in 0..up.nrows() {
            up[(k, jg)] += gd * dd[k];
            up[(k, js)] -= gd * dd[k];
            up[(k, ju)] -= gl * w_hat[k];
            up[(k, js)] += gl * w_hat[k];
        }
        terms.target.push(t);
        terms.delta.push(delta);
        terms.w.push(w);
        terms.ell.push(ell);
        terms.w_hit.push(w_hit);
    }
    let nf = n as f64;
    out.td_term /= nf;
    out.hit_term /= nf;
    out.mean_cos /= nf;
    out.mean_distance /= nf;
    out.total = out.td_term + cfg.kappa * out.hit_term;
    let mut grads = vec![0.0; phi.net.n_params()];
    phi.net.backward(&tape, &up, &mut grads)?;
    Ok((out, terms, grads))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyLoss {
    pub loss: f64,
    pub mean_weight: f64,
    /// Fraction of weights at the clip.
    pub clipped: f64,
}

/// `r_z(s, s') + gamma V_z(s') - V_z(s)` with `V_z(x) = <phi(x), z>`.
pub fn latent_advantage(phi_s: &[f64], phi_next: &[f64], z: &[f64], gamma: f64) -> f64 {
    let dot = |a: &[f64]| a.iter().zip(z).map(|(x, y)| x * y).sum::<f64>();
    let (vs, vn) = (dot(phi_s), dot(phi_next));
    (vn - vs) + gamma * vn - vs
}

/// Advantage-weighted behavior regression on `(s, a, s')` with directions
/// `z` (`latent_dim x batch`).
pub fn policy_loss(
    policy: &LatentPolicy,
    phi: &StateEncoder,
    features: &DMatrix<f64>,
    batch: &TransitionBatch,
    z: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<(PolicyLoss, Vec<f64>)> {
    if !phi.frozen {
        return Err(Error::NotFrozen);
    }
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if z.ncols() != n || z.nrows() != policy.latent_dim() {
        return Err(Error::ShapeMismatch(format!(
            "z is {}x{}, expected {}x{n}",
            z.nrows(),
            z.ncols(),
            policy.latent_dim()
        )));
    }
    let states = Gathered::new(features, &[&batch.s, &batch.s_next]);
    let emb = phi.net.forward_batch(&states.inputs)?;
    let input = policy.inputs(features, &batch.s, z)?;
    let (logits, tape) = policy.net.forward_tape(&input)?;

    let mut out = PolicyLoss::default();
    let mut up = DMatrix::zeros(logits.nrows(), n);
    for i in 0..n {
        let zi = z.column(i);
        let a = latent_advantage(
            emb.column(states.col(batch.s[i])).as_slice(),
            emb.column(states.col(batch.s_next[i])).as_slice(),
            zi.as_slice(),
            cfg.gamma,
        );
        let raw = (cfg.actor_temp * a).exp();
        let w = raw.min(WEIGHT_CLIP);
        if raw >= WEIGHT_CLIP {
            out.clipped += 1.0;
        }
        let lp = log_softmax(logits.column(i).as_slice());
        out.loss -= w * lp[batch.a[i]];
        out.mean_weight += w;
        for (k, l) in lp.iter().enumerate() {
            let ind = if k == batch.a[i] { 1.0 } else { 0.0 };
            up[(k, i)] = -w * (ind - l.exp()) / n as f64;
        }
    }
    let nf = n as f64;
    out.loss /= nf;
    out.mean_weight /= nf;
    out.clipped /= nf;
    let mut grads = vec![0.0; policy.net.n_params()];
    policy.net.backward(&tape, &up, &mut grads)?;
    Ok((out, grads))
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}
