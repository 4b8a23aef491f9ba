use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cast, Element, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with decoupled weight decay and bias-corrected moments.
    /// Aborts before touching any parameter if a gradient is non-finite, and
    /// reports a parameter the update itself pushed out of range.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::Config(format!("negative learning rate {lr}")));
        }
        if self.m.len() != store.len() {
            return Err(Error::Config("optimizer state does not match parameters".into()));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.frozen && !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let (b1, b2): (T, T) = (cast(c.beta1), cast(c.beta2));
        let one = T::one();
        let bc1: T = cast(1.0 - c.beta1.powi(t));
        let bc2: T = cast(1.0 - c.beta2.powi(t));
        let decay: T = cast(1.0 - lr * c.weight_decay);
        let lr_t: T = cast(lr);
        let eps: T = cast(c.eps);
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite(format!("update of `{}`", p.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[1], v)).unwrap();
        s
    }

    #[test]
    fn overflowing_update_names_parameter() {
        let mut s = store(1.0);
        s.iter_mut().next().unwrap().grad = Tensor::full(&[1], 1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let err = opt.step(&mut s, 1e308 * 10.0).unwrap_err().to_string();
        assert!(err.contains("update of `w`"), "{err}");
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = store(0.7);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        for _ in 0..3 {
            opt.step(&mut s, 0.001).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[0.7]);
    }

    #[test]
    fn moments_decay_under_zero_grad() {
        let mut s = store(0.7);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.m[0] = Tensor::full(&[1], 0.5);
        opt.v[0] = Tensor::full(&[1], 0.25);
        opt.step(&mut s, 0.0).unwrap();
        assert_eq!(opt.m[0].data()[0], 0.9 * 0.5);
        assert_eq!(opt.v[0].data()[0], 0.999 * 0.25);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(1.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        s.iter_mut().next().unwrap().grad = Tensor::full(&[1], 1.0);
        opt.step(&mut s, 0.001).unwrap();
        let w = s.iter().next().unwrap().1.value.data()[0];
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-15, "{w}");
    }

    #[test]
    fn decoupled_decay_scales_params() {
        let mut s = store(2.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, 0.001).unwrap();
        let w = s.iter().next().unwrap().1.value.data()[0];
        assert!((w - 2.0 * (1.0 - 5e-5)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(1.0);
        s.iter_mut().next().unwrap().grad = Tensor::full(&[1], f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let err = opt.step(&mut s, 0.001).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.0]);
    }
}
