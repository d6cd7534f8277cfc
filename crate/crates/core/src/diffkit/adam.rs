use crate::{Error, Result};

/// Bias-corrected adaptive-moment optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut opt = Adam::new(3, 1e-2);
        let mut p = vec![1.0, -2.0, 3.0];
        for _ in 0..5 {
            opt.update(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn first_step_closed_form() {
        let lr = 3e-4;
        let mut opt = Adam::new(3, lr);
        let g = [2.0, -0.5, 1e-3];
        let mut p = vec![0.0; 3];
        opt.update(&mut p, &g).unwrap();
        for i in 0..3 {
            // m_hat = g, v_hat = g^2
            let expected = -lr * g[i] / (g[i].abs() + 1e-8);
            assert!(
                (p[i] - expected).abs() < 1e-15,
                "{i}: {} vs {expected}",
                p[i]
            );
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let run = || {
            let mut opt = Adam::new(2, 0.1);
            let mut p = vec![1.0, 1.0];
            for t in 0..20 {
                let g = [p[0] * 2.0, (t as f64).sin()];
                opt.update(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut opt = Adam::new(2, 0.1);
        assert!(opt.update(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
