//! Adam with decoupled weight decay, and the warm-up schedule.

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear ramp from 0 to `base_lr` over `warmup_iters`, constant afterwards.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_iters == 0 || iter >= cfg.warmup_iters {
        cfg.base_lr
    } else {
        cfg.base_lr * iter as f64 / cfg.warmup_iters as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Tensor<T>], weight_decay: f64) -> Self {
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.rows(), t.cols());
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "AdamW::update",
                format!("{} params, {} grads, {} states", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let decay = T::of(1.0 - lr * self.weight_decay);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let pd = p.data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                pd[j] = pd[j] * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let cfg = TrainConfig {
            base_lr: 2e-3,
            warmup_iters: 100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(50, &cfg), 1e-3);
        assert_eq!(lr_at(100, &cfg), 2e-3);
        assert_eq!(lr_at(5000, &cfg), 2e-3);
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut p = vec![Tensor::<f64>::from_f64(1, 3, &[1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Some(Tensor::from_f64(1, 3, &[0.3, -4.0, 0.0]).unwrap())];
        let mut opt = AdamW::new(&p, 0.0);
        opt.update(&mut p, &g, 0.1).unwrap();
        let want = [0.9, -1.9, 0.5];
        for (a, b) in p[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut p = vec![Tensor::<f64>::full(1, 1, 2.0), Tensor::full(1, 1, 3.0)];
        let mut opt = AdamW::new(&p, 0.5);
        opt.update(&mut p, &[Some(Tensor::zeros(1, 1)), None], 0.1).unwrap();
        assert!((p[0].item() - 2.0 * 0.95).abs() < 1e-15);
        assert_eq!(p[1].item(), 3.0);
    }
}
