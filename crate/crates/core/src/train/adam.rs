use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{GradMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || -> IndexMap<String, Tensor<T>> {
            params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradMap<T>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps) = (T::from_f64_lossy(c.lr), T::from_f64_lossy(c.eps));
        let one = T::one();
        let bc1 = one - T::from_f64_lossy(c.beta1.powf(self.t as f64));
        let bc2 = one - T::from_f64_lossy(c.beta2.powf(self.t as f64));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[(&str, f64)]) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        for (n, v) in vals {
            p.insert(*n, Tensor::from_vec([1], vec![*v]).unwrap()).unwrap();
        }
        p
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut p = store(&[("w", 0.0)]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let mut g = GradMap::new();
        g.insert("w".to_string(), Tensor::from_vec([1], vec![1.0]).unwrap());
        s.step(&mut p, &g).unwrap();
        assert_eq!(s.t, 1);
        assert!((s.m["w"][0] - 0.1).abs() < 1e-15);
        assert!((s.v["w"][0] - 0.001).abs() < 1e-15);
        // m_hat = 1, v_hat = 1 -> -lr / (1 + eps)
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_on_fresh_state_is_a_no_op() {
        let mut p = store(&[("w", 0.7)]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let mut g = GradMap::new();
        g.insert("w".to_string(), Tensor::from_vec([1], vec![0.0]).unwrap());
        s.step(&mut p, &g).unwrap();
        assert_eq!(p.get("w").unwrap()[0], 0.7);
    }

    #[test]
    fn parameter_without_gradient_untouched() {
        let mut p = store(&[("a", 0.3), ("b", -1.25)]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let mut g = GradMap::new();
        g.insert("a".to_string(), Tensor::from_vec([1], vec![2.0]).unwrap());
        s.step(&mut p, &g).unwrap();
        assert_ne!(p.get("a").unwrap()[0], 0.3);
        assert_eq!(p.get("b").unwrap()[0].to_bits(), (-1.25f64).to_bits());
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let mut p = store(&[("a", 0.3), ("b", -1.25)]);
        let before = p.clone();
        let mut s = AdamState::new(
            &p,
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
        );
        let mut g = GradMap::new();
        g.insert("a".to_string(), Tensor::from_vec([1], vec![2.0]).unwrap());
        g.insert("b".to_string(), Tensor::from_vec([1], vec![-3.0]).unwrap());
        for _ in 0..3 {
            s.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = store(&[("a", 0.3)]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let mut g = GradMap::new();
        g.insert("a".to_string(), Tensor::zeros([2]));
        assert!(matches!(s.step(&mut p, &g), Err(Error::ShapeMismatch { .. })));
        assert_eq!(s.t, 0);
    }
}
