//! Adam with bias correction and the exponential moving average of
//! parameters used for evaluation.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<E: Elem> {
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub step: u64,
}

impl<E: Elem> AdamState<E> {
    pub fn new(params: &[Tensor<E>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update in place. Moment math runs in f64 per
/// element and rounds back to storage precision.
pub fn adam_step<E: Elem>(
    params: &mut [Tensor<E>],
    grads: &[Tensor<E>],
    state: &mut AdamState<E>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Internal("adam_step tensor-count mismatch".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (pi, p) in params.iter_mut().enumerate() {
        let g = &grads[pi];
        if g.shape() != p.shape() {
            return Err(Error::Internal(format!(
                "adam_step shape mismatch on tensor {pi}: {:?} vs {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for i in 0..p.data.len() {
            let gi = g.data[i].to_f64();
            let mi = beta1 * m.data[i].to_f64() + (1.0 - beta1) * gi;
            let vi = beta2 * v.data[i].to_f64() + (1.0 - beta2) * gi * gi;
            m.data[i] = E::from_f64(mi);
            v.data[i] = E::from_f64(vi);
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            p.data[i] = E::from_f64(p.data[i].to_f64() - update);
        }
    }
    Ok(())
}

/// Shadow copy of the learnable parameters, updated as
/// shadow ← β·shadow + (1−β)·θ after each optimization step.
#[derive(Debug, Clone)]
pub struct EmaState<E: Elem> {
    pub shadow: Vec<Tensor<E>>,
    pub decay: f64,
}

impl<E: Elem> EmaState<E> {
    /// Iteration 0 of the recursion: shadow = θ₀.
    pub fn new(params: &[Tensor<E>], decay: f64) -> Self {
        EmaState { shadow: params.to_vec(), decay }
    }

    /// shadow ← β·shadow + (1−β)·θ.
    pub fn update(&mut self, params: &[Tensor<E>]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::Internal("ema tensor-count mismatch".into()));
        }
        let b = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sv, &pv) in s.data.iter_mut().zip(&p.data) {
                *sv = E::from_f64(b * sv.to_f64() + (1.0 - b) * pv.to_f64());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(vals: &[f64]) -> Vec<Tensor<f64>> {
        vals.iter().map(|&v| Tensor::scalar(v)).collect()
    }

    #[test]
    fn zero_gradient_or_zero_lr_leaves_params() {
        let mut p = scalars(&[1.5, -0.25]);
        let orig = p.clone();
        let g = scalars(&[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        assert_eq!(p[0].data, orig[0].data);
        assert_eq!(p[1].data, orig[1].data);

        let mut p = scalars(&[1.5]);
        let g = scalars(&[3.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.0, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        assert_eq!(p[0].data, vec![1.5]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // bias-corrected first step: update = lr·g/(|g|+ε') ≈ lr·sign(g)
        let mut p = scalars(&[0.0, 0.0, 0.0]);
        let g = scalars(&[2.0, -0.001, 5000.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.01, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        assert!((p[0].data[0] + 0.01).abs() < 1e-6);
        assert!((p[1].data[0] - 0.01).abs() < 1e-6);
        assert!((p[2].data[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn quadratic_descent_shrinks() {
        // f(x) = x², grad = 2x, from x = 1, lr = 0.1: |x| strictly decreasing
        let mut p = scalars(&[1.0]);
        let mut st = AdamState::new(&p);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let g = scalars(&[2.0 * p[0].data[0]]);
            adam_step(&mut p, &g, &mut st, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
            let x = p[0].data[0].abs();
            assert!(x < prev, "|x| grew: {x} !< {prev}");
            prev = x;
        }
    }

    #[test]
    fn ema_recursion() {
        // scalar sequence θ = (1, 0, 0), β = 0.5 → shadow 0.25 after j = 2
        let theta0 = scalars(&[1.0]);
        let mut ema = EmaState::new(&theta0, 0.5);
        assert_eq!(ema.shadow[0].data, vec![1.0]);
        ema.update(&scalars(&[0.0])).unwrap(); // j = 1
        assert_eq!(ema.shadow[0].data, vec![0.5]);
        ema.update(&scalars(&[0.0])).unwrap(); // j = 2
        assert_eq!(ema.shadow[0].data, vec![0.25]);

        // β = 0 → shadow tracks θ exactly
        let mut ema = EmaState::new(&scalars(&[7.0]), 0.0);
        ema.update(&scalars(&[-3.0])).unwrap();
        assert_eq!(ema.shadow[0].data, vec![-3.0]);

        // constant θ is a fixed point
        let theta = scalars(&[0.6]);
        let mut ema = EmaState::new(&theta, 0.999);
        for _ in 0..5 {
            ema.update(&theta).unwrap();
            assert!((ema.shadow[0].data[0] - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn shadow_lags_live_params() {
        // after the first nonzero update with β = 0.999, shadow ≠ θ
        let mut p = scalars(&[1.0]);
        let mut ema = EmaState::new(&p, 0.999);
        let g = scalars(&[0.5]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.01, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        ema.update(&p).unwrap();
        assert_ne!(ema.shadow[0].data, p[0].data);
    }
}
