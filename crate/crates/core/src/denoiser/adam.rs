use serde::{Deserialize, Serialize};

use super::{DenseTensor, Gradients};
use crate::error::{invalid, mismatch, Error, Result};

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn new(params: &[DenseTensor], hyper: AdamHyper) -> Result<Self> {
        if !(hyper.lr > 0.0) || !(0.0..1.0).contains(&hyper.beta1) || !(0.0..1.0).contains(&hyper.beta2) {
            return Err(invalid(format!("bad Adam hyperparameters {hyper:?}")));
        }
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Ok(Self { hyper, step: 0, m: zeros.clone(), v: zeros })
    }

    /// One update. Non-finite gradients are rejected before anything changes.
    pub fn step(&mut self, params: &mut [DenseTensor], grads: &Gradients) -> Result<()> {
        if grads.0.len() != params.len() || grads.0.iter().zip(params.iter()).any(|(g, p)| g.len() != p.len()) {
            return Err(mismatch("gradients do not match the parameters"));
        }
        if let Some((tensor, idx)) = grads
            .0
            .iter()
            .enumerate()
            .find_map(|(i, g)| g.iter().position(|x| !x.is_finite()).map(|j| (i, j)))
        {
            return Err(Error::NonFinite(format!(
                "gradient of parameter tensor {tensor} at index {idx} is {}",
                grads.0[tensor][idx]
            )));
        }
        self.step += 1;
        let AdamHyper { lr, beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Vec<DenseTensor> {
        vec![DenseTensor::from_data(&[1], vec![x]).unwrap()]
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [-3.0, 1e-3, 250.0] {
            let mut p = scalar(1.0);
            let mut adam = Adam::new(&p, AdamHyper::with_lr(0.01)).unwrap();
            adam.step(&mut p, &Gradients(vec![vec![g]])).unwrap();
            let moved = 1.0 - p[0].data[0];
            assert!((moved - 0.01 * g.signum()).abs() < 1e-6, "{g}: {moved}");
            assert_eq!(adam.step, 1);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar(0.25);
        let mut adam = Adam::new(&p, AdamHyper::with_lr(0.1)).unwrap();
        adam.step(&mut p, &Gradients(vec![vec![0.0]])).unwrap();
        assert_eq!(p[0].data[0], 0.25);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = scalar(0.25);
        let mut adam = Adam::new(&p, AdamHyper::with_lr(0.1)).unwrap();
        let err = adam.step(&mut p, &Gradients(vec![vec![f64::NAN]])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!((p[0].data[0], adam.step), (0.25, 0));
    }
}
