//! Dense feed-forward nets with hand-written reverse mode, Adam, and
//! finite-difference checking.
//!
//! Parameters live in one flat `Vec<f64>`. Layer `l` stores its weight
//! matrix `W_l` (`out x in`, column-major) followed by its bias `b_l`. Batches
//! are matrices with one sample per column.

mod adam;
mod check;
mod ckpt;

pub use adam::Adam;
pub use check::{grad_check, GradReport, REL_ERR_FLOOR};
pub use ckpt::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, NetRecord};

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            // tanh is saturated to the last bit beyond |x| = 10
            Activation::Gelu if x > 10.0 => 1.0,
            Activation::Gelu if x < -10.0 => 0.0,
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

/// Activations recorded by [`DenseNet::forward_tape`].
#[derive(Clone, Debug, Default)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<DMatrix<f64>>,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.ncols())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    activation: Activation,
    seed: u64,
    params: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    /// Uniform `+-1/sqrt(fan_in)` initialization from `seed`.
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!("bad layer dims {dims:?}")));
        }
        let mut r = rng::stream(seed, "init");
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(r.random_range(-bound..=bound));
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            activation,
            seed,
            params,
        })
    }

    pub fn from_params(
        dims: &[usize],
        activation: Activation,
        seed: u64,
        params: Vec<f64>,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!("bad layer dims {dims:?}")));
        }
        if params.len() != param_count(dims) {
            return Err(Error::ShapeMismatch(format!(
                "{} params for dims {dims:?} (need {})",
                params.len(),
                param_count(dims)
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            activation,
            seed,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Offsets of `(W_l, b_l)` in the flat parameter vector.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let w = param_count(&self.dims[..=l]);
        (w, w + self.dims[l] * self.dims[l + 1])
    }

    fn weight(&self, l: usize) -> DMatrixView<'_, f64> {
        let (w, b) = self.layer_offsets(l);
        DMatrixView::from_slice(&self.params[w..b], self.dims[l + 1], self.dims[l])
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (_, b) = self.layer_offsets(l);
        &self.params[b..b + self.dims[l + 1]]
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} rows, net expects {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.dims[l + 1], x.ncols());
        let b = self.bias(l);
        for mut col in z.column_iter_mut() {
            col.copy_from_slice(b);
        }
        z.gemm(1.0, &self.weight(l), x, 1.0);
        z
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = DMatrix::from_column_slice(x.len(), 1, x);
        Ok(self.forward_batch(&m)?.as_slice().to_vec())
    }

    /// Forward pass over a batch (`input_dim x batch`).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in 0..self.n_layers() {
            let mut z = self.affine(l, &h);
            if l + 1 < self.n_layers() {
                z.apply(|v| *v = self.activation.apply(*v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass that records what [`DenseNet::backward`] needs.
    pub fn forward_tape(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Tape)> {
        self.check_input(x)?;
        let mut tape = Tape::default();
        let mut h = x.clone();
        for l in 0..self.n_layers() {
            let z = self.affine(l, &h);
            tape.inputs.push(h);
            if l + 1 < self.n_layers() {
                h = z.map(|v| self.activation.apply(v));
                tape.pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, tape))
    }

    /// Accumulate parameter gradients for `upstream` (`output_dim x batch`)
    /// into `grads` and return the input gradient.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &DMatrix<f64>,
        grads: &mut [f64],
    ) -> Result<DMatrix<f64>> {
        if tape.is_empty() || tape.inputs.len() != self.n_layers() {
            return Err(Error::NoTape);
        }
        if grads.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient slots for {} params",
                grads.len(),
                self.n_params()
            )));
        }
        if upstream.nrows() != self.output_dim() || upstream.ncols() != tape.batch() {
            return Err(Error::ShapeMismatch(format!(
                "upstream is {}x{}, expected {}x{}",
                upstream.nrows(),
                upstream.ncols(),
                self.output_dim(),
                tape.batch()
            )));
        }
        let mut dz = upstream.clone();
        for l in (0..self.n_layers()).rev() {
            let (wo, bo) = self.layer_offsets(l);
            let (n_out, n_in) = (self.dims[l + 1], self.dims[l]);
            let x = &tape.inputs[l];
            {
                let mut gw = DMatrixViewMut::from_slice(&mut grads[wo..bo], n_out, n_in);
                gw.gemm(1.0, &dz, &x.transpose(), 1.0);
            }
            for (g, row) in grads[bo..bo + n_out].iter_mut().zip(dz.row_iter()) {
                *g += row.sum();
            }
            let mut dx = DMatrix::zeros(n_in, dz.ncols());
            dx.gemm_tr(1.0, &self.weight(l), &dz, 0.0);
            if l > 0 {
                let pre = &tape.pre[l - 1];
                dx.zip_apply(pre, |d, z| *d *= self.activation.derivative(z));
            }
            dz = dx;
        }
        Ok(dz)
    }

    /// `self <- (1 - tau) self + tau other`.
    pub fn polyak_from(&mut self, other: &DenseNet, tau: f64) -> Result<()> {
        if other.dims != self.dims {
            return Err(Error::ShapeMismatch(
                "polyak update between different nets".into(),
            ));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            *p = (1.0 - tau) * *p + tau * q;
        }
        Ok(())
    }
}

/// Helper for callers holding one sample as a vector.
pub fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}
