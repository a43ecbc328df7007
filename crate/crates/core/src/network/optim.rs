//! SGD with momentum and L2 weight decay:
//! `v ← μv + g + λw`, `w ← w − lr(iteration)·v`,
//! with a one-step learning-rate decay schedule.

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig<S: Scalar> {
    pub lr_initial: S,
    pub lr_decayed: S,
    pub decay_iteration: u64,
    pub momentum: S,
    pub weight_decay: S,
}

impl<S: Scalar> SgdConfig<S> {
    pub fn from_train(cfg: &crate::config::TrainConfig) -> Self {
        Self {
            lr_initial: S::of(cfg.lr_initial),
            lr_decayed: S::of(cfg.lr_decayed),
            decay_iteration: cfg.lr_decay_iteration,
            momentum: S::of(cfg.momentum),
            weight_decay: S::of(cfg.weight_decay),
        }
    }

    pub fn learning_rate(&self, iteration: u64) -> S {
        if iteration < self.decay_iteration {
            self.lr_initial
        } else {
            self.lr_decayed
        }
    }
}

/// One update over a parameter set. `params`, `grads` and `momentum` must
/// be aligned element for element.
pub fn sgd_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    momentum: &mut [Tensor<S>],
    cfg: &SgdConfig<S>,
    iteration: u64,
) -> Result<()> {
    sgd_step_scaled(params, grads, momentum, None, cfg, iteration)
}

/// [`sgd_step`] with optional per-tensor learning-rate and weight-decay
/// multipliers (per-layer `lr_mult` / `decay_mult`); `None` means 1
/// everywhere.
pub fn sgd_step_scaled<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    momentum: &mut [Tensor<S>],
    mults: Option<(&[S], &[S])>,
    cfg: &SgdConfig<S>,
    iteration: u64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != momentum.len() {
        return Err(Error::LengthMismatch {
            op: "sgd_step",
            left: params.len(),
            right: grads.len(),
        });
    }
    if let Some((lr_m, wd_m)) = mults {
        if lr_m.len() != params.len() || wd_m.len() != params.len() {
            return Err(Error::LengthMismatch {
                op: "sgd_step multipliers",
                left: lr_m.len().min(wd_m.len()),
                right: params.len(),
            });
        }
    }
    let lr = cfg.learning_rate(iteration);
    for (i, ((w, g), v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(momentum.iter_mut())
        .enumerate()
    {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: w.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let lr_here = lr * mults.map_or(S::one(), |(m, _)| m[i]);
        let wd_here = cfg.weight_decay * mults.map_or(S::one(), |(_, m)| m[i]);
        for ((wv, &gv), vv) in w
            .data_mut()
            .iter_mut()
            .zip(g.data().iter())
            .zip(v.data_mut().iter_mut())
        {
            *vv = cfg.momentum * *vv + gv + wd_here * *wv;
            *wv = *wv - lr_here * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(momentum: f64, weight_decay: f64, lr: f64) -> SgdConfig<f64> {
        SgdConfig {
            lr_initial: lr,
            lr_decayed: lr / 10.0,
            decay_iteration: u64::MAX,
            momentum,
            weight_decay,
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut w = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]).unwrap();
        let mut v = vec![Tensor::zeros(&[2]).unwrap()];
        sgd_step(&mut [&mut w], &[g], &mut v, &cfg(0.9, 0.0, 0.1), 0).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn plain_sgd_step() {
        let mut w = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut v = vec![Tensor::zeros(&[1]).unwrap()];
        sgd_step(&mut [&mut w], &[g], &mut v, &cfg(0.0, 0.0, 0.1), 0).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut w = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut v = vec![Tensor::zeros(&[1]).unwrap()];
        let c = cfg(0.9, 0.0, 0.1);
        sgd_step(&mut [&mut w], std::slice::from_ref(&g), &mut v, &c, 0).unwrap();
        assert!((w.data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut [&mut w], std::slice::from_ref(&g), &mut v, &c, 1).unwrap();
        assert!((w.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn learning_rate_decays_once() {
        let c = SgdConfig::<f64> {
            lr_initial: 1e-3,
            lr_decayed: 1e-4,
            decay_iteration: 100,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert_eq!(c.learning_rate(0), 1e-3);
        assert_eq!(c.learning_rate(99), 1e-3);
        assert_eq!(c.learning_rate(100), 1e-4);
        assert_eq!(c.learning_rate(5000), 1e-4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = Tensor::<f64>::zeros(&[2]).unwrap();
        let g = Tensor::<f64>::zeros(&[3]).unwrap();
        let mut v = vec![Tensor::<f64>::zeros(&[2]).unwrap()];
        assert!(sgd_step(&mut [&mut w], &[g], &mut v, &cfg(0.9, 0.0, 0.1), 0).is_err());
    }
}
