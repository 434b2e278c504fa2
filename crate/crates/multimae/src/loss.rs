//! Target construction and masked-only loss computation.
//!
//! Losses read predictions exclusively at masked grid positions, so visible
//! positions receive exactly zero gradient. Per-task losses average over the
//! masked elements of one sample (pixels for cross-entropy, patch entries for
//! the regression losses, valid entries only for depth); the total is the
//! unweighted mean over the tasks that actually had masked content.

use thiserror::Error;

use crate::mask::MaskPlan;
use crate::model::{Model, PretrainOutput, Task};
use crate::tensor::{el, Scalar, Tape, Tensor, TensorError, Var};
use crate::tokenize::{
    downsample_classes, patch_pixel_order, patchify, robust_standardize_depth, standardize_rgb,
    Modality, Sample, TokenizeError, NUM_CLASSES,
};

/// Epsilon added to the per-patch standard deviation.
pub const PATCH_STD_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss input: {0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
}

/// Per-step loss summary, one entry per configured task.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: usize,
    /// `(task, loss, masked token count)`; the loss is 0 when the count is 0.
    pub per_task: Vec<(Task, f64, usize)>,
    pub total: f64,
}

impl LossReport {
    /// One structured text line: `step=i lr=x rgb=a ... total=t`.
    pub fn render(&self, lr: f64) -> String {
        let mut line = format!("step={} lr={:e}", self.step, lr);
        for (task, loss, count) in &self.per_task {
            line.push_str(&format!(" {}={:.6} n_{}={}", task.name(), loss, task.name(), count));
        }
        line.push_str(&format!(" total={:.6}", self.total));
        line
    }
}

/// Grid positions of one modality the plan leaves masked.
pub fn masked_positions(plan: &MaskPlan, modality_index: usize, cap: usize) -> Vec<usize> {
    let visible = &plan.visible[modality_index];
    let mut vis_flags = vec![false; cap];
    for &i in visible {
        vis_flags[i] = true;
    }
    (0..cap).filter(|&i| !vis_flags[i]).collect()
}

/// Per-patch standardization of target patches: subtract each patch's mean,
/// divide by its population std plus [`PATCH_STD_EPS`].
pub fn per_patch_standardize<E: Scalar>(patches: &Tensor<E>) -> Tensor<E> {
    let shape = patches.shape().to_vec();
    let p = *shape.last().expect("patches have a last axis");
    assert!(p >= 2, "per-patch standardization needs patch dim >= 2");
    let mut data = patches.data().to_vec();
    for patch in data.chunks_mut(p) {
        let mean = patch.iter().fold(E::zero(), |s, &x| s + x) / el(p as f64);
        let var = patch
            .iter()
            .fold(E::zero(), |s, &x| s + (x - mean) * (x - mean))
            / el(p as f64);
        let denom = var.sqrt() + el(PATCH_STD_EPS);
        for x in patch.iter_mut() {
            *x = (*x - mean) / denom;
        }
    }
    Tensor::new(shape, data).expect("same shape")
}

fn gather_rows<E: Scalar>(t: &Tensor<E>, rows: &[usize]) -> Tensor<E> {
    let width: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    Tensor::new(vec![rows.len(), width], data).expect("gathered rows")
}

/// MSE over masked positions only; `None` when nothing is masked.
pub fn masked_mse<E: Scalar>(
    tape: &mut Tape<E>,
    pred: Var,
    target: &Tensor<E>,
    masked: &[usize],
) -> Result<Option<Var>, LossError> {
    if masked.is_empty() {
        return Ok(None);
    }
    if tape.value(pred).shape() != target.shape() {
        return Err(LossError::Data(format!(
            "prediction shape {:?} vs target {:?}",
            tape.value(pred).shape(),
            target.shape()
        )));
    }
    let pred_rows = tape.index_select(pred, 0, masked)?;
    let target_rows = tape.constant(gather_rows(target, masked));
    let diff = tape.sub(pred_rows, target_rows)?;
    let sq = tape.mul(diff, diff)?;
    Ok(Some(tape.mean(sq)))
}

/// L1 over masked positions, with optional 0/1 element weights (invalid depth
/// pixels are excluded from the average). `None` when nothing is masked or
/// every masked element has zero weight.
pub fn masked_l1<E: Scalar>(
    tape: &mut Tape<E>,
    pred: Var,
    target: &Tensor<E>,
    weights: Option<&Tensor<E>>,
    masked: &[usize],
) -> Result<Option<Var>, LossError> {
    if masked.is_empty() {
        return Ok(None);
    }
    if tape.value(pred).shape() != target.shape() {
        return Err(LossError::Data(format!(
            "prediction shape {:?} vs target {:?}",
            tape.value(pred).shape(),
            target.shape()
        )));
    }
    let pred_rows = tape.index_select(pred, 0, masked)?;
    let target_rows = tape.constant(gather_rows(target, masked));
    let diff = tape.sub(pred_rows, target_rows)?;
    let dist = tape.abs(diff);
    match weights {
        None => Ok(Some(tape.mean(dist))),
        Some(w) => {
            let w_rows = gather_rows(w, masked);
            let denom = w_rows.data().iter().fold(E::zero(), |s, &x| s + x);
            if denom <= E::zero() {
                return Ok(None);
            }
            let w_var = tape.constant(w_rows);
            let weighted = tape.mul(dist, w_var)?;
            let total = tape.sum(weighted);
            Ok(Some(tape.scale(total, E::one() / denom)))
        }
    }
}

/// Cross-entropy over the pixels of masked patches. Logits are laid out
/// `[grid^2, patch_px * num_classes]` with the pixel-major order produced by
/// the tokenizer's patchification; targets index the same pixel order over
/// the full grid.
pub fn masked_cross_entropy<E: Scalar>(
    tape: &mut Tape<E>,
    logits: Var,
    target_classes: &[usize],
    masked: &[usize],
    patch_px: usize,
    num_classes: usize,
) -> Result<Option<Var>, LossError> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != patch_px * num_classes {
        return Err(LossError::Data(format!(
            "logits shape {shape:?} does not match {patch_px} px x {num_classes} classes"
        )));
    }
    if target_classes.len() != shape[0] * patch_px {
        return Err(LossError::Data(format!(
            "{} target pixels for {} patches of {} px",
            target_classes.len(),
            shape[0],
            patch_px
        )));
    }
    if let Some(&bad) = target_classes.iter().find(|&&c| c >= num_classes) {
        return Err(LossError::Data(format!(
            "target class {bad} out of range ({num_classes} classes)"
        )));
    }
    if masked.is_empty() {
        return Ok(None);
    }
    let masked_logits = tape.index_select(logits, 0, masked)?;
    let per_pixel = tape.reshape(masked_logits, &[masked.len() * patch_px, num_classes])?;
    let logprobs = tape.log_softmax(per_pixel)?;
    let picked: Vec<usize> = masked
        .iter()
        .flat_map(|&t| (0..patch_px).map(move |q| target_classes[t * patch_px + q]))
        .collect();
    let chosen = tape.pick(logprobs, &picked)?;
    let mean = tape.mean(chosen);
    Ok(Some(tape.scale(mean, -E::one())))
}

/// Equal-weight total: the arithmetic mean of the task losses present.
/// Tasks with nothing masked contribute 0 and leave the denominator.
pub fn total_loss<E: Scalar>(
    tape: &mut Tape<E>,
    step: usize,
    parts: &[(Task, Option<Var>, usize)],
) -> (Var, LossReport) {
    let present: Vec<Var> = parts.iter().filter_map(|&(_, v, _)| v).collect();
    let total = if present.is_empty() {
        tape.constant(Tensor::scalar(E::zero()))
    } else {
        let mut sum = present[0];
        for &v in &present[1..] {
            sum = tape.add(sum, v).expect("scalar add");
        }
        tape.scale(sum, E::one() / el(present.len() as f64))
    };
    let per_task = parts
        .iter()
        .map(|&(task, v, count)| {
            let loss = v.map(|v| tape.value(v).item().to_f64().unwrap()).unwrap_or(0.0);
            (task, loss, count)
        })
        .collect();
    let report = LossReport {
        step,
        per_task,
        total: tape.value(total).item().to_f64().unwrap(),
    };
    (total, report)
}

/// Ground-truth targets for every task of one sample.
pub struct TaskTargets<E: Scalar> {
    pub rgb: Tensor<E>,
    pub rgb_std: Tensor<E>,
    pub depth: Tensor<E>,
    /// 0/1 validity weights aligned with `depth`.
    pub depth_weights: Tensor<E>,
    /// Per-pixel classes of the downsampled map, in token-then-pixel order.
    pub semseg: Vec<usize>,
}

/// Build the target side of every loss from the raw sample, using the same
/// preprocessing as the input path.
pub fn build_targets<E: Scalar>(
    sample: &Sample,
    model: &Model<E>,
) -> Result<TaskTargets<E>, LossError> {
    let rgb_cfg = model
        .config
        .modality_config(Modality::Rgb)
        .ok_or_else(|| LossError::Data("rgb modality not configured".into()))?;
    let depth_cfg = model
        .config
        .modality_config(Modality::Depth)
        .ok_or_else(|| LossError::Data("depth modality not configured".into()))?;
    let semseg_cfg = model
        .config
        .modality_config(Modality::Semseg)
        .ok_or_else(|| LossError::Data("semseg modality not configured".into()))?;

    let (mean, std) = rgb_cfg.rgb_stats.unwrap_or(([0.0; 3], [1.0; 3]));
    let rgb_raster = standardize_rgb(&sample.rgb, mean, std);
    let rgb = patchify::<E>(
        &rgb_raster,
        sample.height,
        sample.width,
        3,
        rgb_cfg.patch_size,
    )?;
    let rgb_std = per_patch_standardize(&rgb);

    let depth_raster = robust_standardize_depth(&sample.depth, &sample.depth_valid, &mut |msg| {
        eprintln!("warning: {msg}")
    })?;
    let depth = patchify::<E>(
        &depth_raster,
        sample.height,
        sample.width,
        1,
        depth_cfg.patch_size,
    )?;
    let valid_raster: Vec<f32> = sample
        .depth_valid
        .iter()
        .map(|&v| if v { 1.0 } else { 0.0 })
        .collect();
    let depth_weights = patchify::<E>(
        &valid_raster,
        sample.height,
        sample.width,
        1,
        depth_cfg.patch_size,
    )?;

    let factor = semseg_cfg.downsample;
    let small = downsample_classes(&sample.semseg, sample.height, sample.width, factor);
    let side = sample.height / factor;
    let order = patch_pixel_order(side, side, semseg_cfg.patch_size);
    let semseg = order.iter().map(|&px| small[px] as usize).collect();

    Ok(TaskTargets {
        rgb,
        rgb_std,
        depth,
        depth_weights,
        semseg,
    })
}

/// Wire every task prediction of a pre-training forward to its masked loss.
pub fn pretrain_losses<E: Scalar>(
    tape: &mut Tape<E>,
    model: &Model<E>,
    output: &PretrainOutput,
    targets: &TaskTargets<E>,
    plan: &MaskPlan,
    step: usize,
) -> Result<(Var, LossReport), LossError> {
    let grid = model.config.grid().map_err(|e| LossError::Data(e.to_string()))?;
    let cap = grid * grid;
    let mut parts = Vec::new();
    for &(task, pred) in &output.predictions {
        let mi = model
            .config
            .modalities
            .iter()
            .position(|c| c.modality == task.modality())
            .expect("validated config");
        let masked = masked_positions(plan, mi, cap);
        let count = masked.len();
        let loss = match task {
            Task::Rgb => masked_mse(tape, pred, &targets.rgb, &masked)?,
            Task::RgbStandardized => masked_mse(tape, pred, &targets.rgb_std, &masked)?,
            Task::Depth => masked_l1(
                tape,
                pred,
                &targets.depth,
                Some(&targets.depth_weights),
                &masked,
            )?,
            Task::Semseg => {
                let cfg = model.config.modality_config(Modality::Semseg).unwrap();
                masked_cross_entropy(
                    tape,
                    pred,
                    &targets.semseg,
                    &masked,
                    cfg.patch_size * cfg.patch_size,
                    cfg.num_classes.unwrap_or(NUM_CLASSES),
                )?
            }
        };
        parts.push((task, loss, count));
    }
    Ok(total_loss(tape, step, &parts))
}
