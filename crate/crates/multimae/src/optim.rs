//! AdamW with decoupled weight decay and the warmup + cosine learning-rate
//! schedule.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::ParamMap;
use crate::tensor::{el, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),
    #[error("gradient shape mismatch for `{name}`: parameter {param:?} vs gradient {grad:?}")]
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Linear lr scaling rule: `lr = base_lr * batch_size / 256`.
pub fn effective_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Learning rate at a step: linear from `warmup_lr` to `peak_lr` over the
/// warmup, then cosine decay from `peak_lr` to 0 at `total_steps`.
pub fn lr_at(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    peak_lr: f64,
    warmup_lr: f64,
) -> f64 {
    assert!(step <= total_steps, "step {step} past total {total_steps}");
    if step < warmup_steps {
        let progress = step as f64 / warmup_steps as f64;
        return warmup_lr + (peak_lr - warmup_lr) * progress;
    }
    if total_steps == warmup_steps {
        return peak_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Parameters that never receive weight decay: norm gains, all biases, the
/// global token, mask tokens, and the embedding tables.
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with(".bias")
        || name.ends_with(".gain")
        || name.ends_with(".mask_token")
        || name.ends_with(".modality_embed")
        || name == "global_token"
        || name == "class_embed.table"
}

/// First/second moment accumulators plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<E: Scalar> {
    pub m: BTreeMap<String, Tensor<E>>,
    pub v: BTreeMap<String, Tensor<E>>,
    pub step: u64,
}

impl<E: Scalar> OptimizerState<E> {
    pub fn new(params: &ParamMap<E>) -> Self {
        let zeros = |p: &ParamMap<E>| {
            p.iter()
                .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        OptimizerState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }
}

/// One AdamW step over every parameter. Decay is decoupled
/// (`p -= lr * wd * p`, skipping the exemption list) and the moment estimates
/// are bias-corrected.
pub fn adamw_step<E: Scalar>(
    params: &mut ParamMap<E>,
    grads: &BTreeMap<String, Tensor<E>>,
    state: &mut OptimizerState<E>,
    lr: f64,
    config: &OptimConfig,
) -> Result<(), OptimError> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - config.beta1.powf(t);
    let bc2 = 1.0 - config.beta2.powf(t);
    let (b1, b2) = (el::<E>(config.beta1), el::<E>(config.beta2));
    let one_m_b1 = el::<E>(1.0 - config.beta1);
    let one_m_b2 = el::<E>(1.0 - config.beta2);
    let eps = el::<E>(config.eps);
    let lr_e = el::<E>(lr);

    for (name, param) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| OptimError::MissingGrad(name.clone()))?;
        if grad.shape() != param.shape() {
            return Err(OptimError::ShapeMismatch {
                name: name.clone(),
                param: param.shape().to_vec(),
                grad: grad.shape().to_vec(),
            });
        }
        if config.weight_decay > 0.0 && !decay_exempt(name) {
            let shrink = el::<E>(1.0 - lr * config.weight_decay);
            for p in param.data_mut() {
                *p = *p * shrink;
            }
        }
        let m = state.m.get_mut(name).expect("state mirrors params");
        let v = state.v.get_mut(name).expect("state mirrors params");
        let inv_bc1 = el::<E>(1.0 / bc1);
        let inv_bc2 = el::<E>(1.0 / bc2);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *m = b1 * *m + one_m_b1 * g;
            *v = b2 * *v + one_m_b2 * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            *p = *p - lr_e * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
