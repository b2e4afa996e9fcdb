use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ParamSpec;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moments with bias correction and decoupled decay.
    #[default]
    AdamW,
    /// Plain gradient descent, no momentum.
    Sgd,
}

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr` at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (peak, min) = (cfg.peak_lr, cfg.min_lr);
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    if cfg.steps <= cfg.warmup_steps {
        return peak;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / (cfg.steps - cfg.warmup_steps) as f64).min(1.0);
    min + (peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global ℓ2 norm over all gradient tensors.
pub fn global_norm<F: Scalar>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grads<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Optimizer moments mirroring the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
}

impl<F: Scalar> Moments<F> {
    pub fn zeros_like(params: &[Tensor<F>]) -> Self {
        let z: Vec<Tensor<F>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            first: z.clone(),
            second: z,
        }
    }
}

/// One optimizer step. `step` is the 1-based index of this update;
/// `lr_scale` multiplies the rate per parameter.
#[allow(clippy::too_many_arguments)]
pub fn decayed_update<F: Scalar>(
    params: &mut [Tensor<F>],
    specs: &[ParamSpec],
    moments: &mut Moments<F>,
    grads: &[Tensor<F>],
    lr: f64,
    lr_scale: &[f64],
    step: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || lr_scale.len() != params.len() {
        return Err(Error::dim("decayed_update", "gradients do not mirror parameters"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "gradient" });
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for i in 0..params.len() {
        let rate = lr * lr_scale[i];
        let decay = if specs[i].decay { F::of(1.0 - rate * cfg.weight_decay) } else { F::one() };
        let g = grads[i].data();
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                let r = F::of(rate);
                for (p, &gi) in params[i].data_mut().iter_mut().zip(g) {
                    *p = (*p - r * gi) * decay;
                }
            }
            OptimizerKind::AdamW => {
                let (m, v) = (moments.first[i].data_mut(), moments.second[i].data_mut());
                let (fb1, fb2) = (F::of(b1), F::of(b2));
                let (fc1, fc2) = (F::of(c1), F::of(c2));
                let (r, eps) = (F::of(rate), F::of(cfg.eps));
                for (((p, &gi), mi), vi) in params[i].data_mut().iter_mut().zip(g).zip(m).zip(v) {
                    *mi = fb1 * *mi + (F::one() - fb1) * gi;
                    *vi = fb2 * *vi + (F::one() - fb2) * gi * gi;
                    let mhat = *mi / fc1;
                    let vhat = *vi / fc2;
                    *p = (*p - r * mhat / (vhat.sqrt() + eps)) * decay;
                }
            }
        }
    }
    Ok(())
}
