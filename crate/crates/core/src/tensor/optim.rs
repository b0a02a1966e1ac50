//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::nn::ParamStore;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter for one parameter set.
#[derive(Clone, Debug)]
pub struct OptimState<T: Scalar = f32> {
    pub config: AdamWConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `p -= lr*wd*p`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::shape(
                "adamw",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (i, (p, g)) in params.values().iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let decay = T::one() - T::lit(c.lr * c.weight_decay);
        let eps = T::lit(c.eps);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *pv *= decay;
                *mv = b1 * *mv + (T::one() - b1) * *gv;
                *vv = b2 * *vv + (T::one() - b2) * *gv * *gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[3], v));
        s
    }

    #[test]
    fn zero_grad_without_decay_leaves_params() {
        let mut p = store(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(&p, cfg);
        for _ in 0..5 {
            st.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert!(p.values()[0].data().iter().all(|&x| x == 0.7));
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        // With constant g the bias-corrected moments are exactly g and g^2,
        // so every step moves by lr * |g| / (|g| + eps) in the -sign(g) direction.
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::full(&[2], 1.0));
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(&p, cfg);
        let g = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let mut prev = p.values()[0].clone();
        for _ in 0..200 {
            st.step(&mut p, std::slice::from_ref(&g)).unwrap();
            let cur = p.values()[0].clone();
            let d0 = prev.data()[0] - cur.data()[0];
            let d1 = prev.data()[1] - cur.data()[1];
            assert!((d0 - 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-9);
            assert!((d1 + 1e-3 * 2.0 / (2.0 + 1e-8)).abs() < 1e-9);
            prev = cur;
        }
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::full(&[4], 2.0));
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(&p, cfg);
        for k in 1..=10 {
            st.step(&mut p, &[Tensor::zeros(&[4])]).unwrap();
            let want = 2.0 * (1.0f64 - 0.01 * 0.1).powi(k);
            assert!((p.values()[0].data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = store(1.0);
        let mut st = OptimState::new(&p, AdamWConfig::default());
        assert!(st.step(&mut p, &[Tensor::zeros(&[4])]).is_err());
        assert!(st.step(&mut p, &[]).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
