//! The training loop: batch assembly, masked losses, AdamW updates, and
//! bit-exact checkpointing.
//!
//! Every random draw is a pure function of `(seed, step, sample slot)`, so a
//! checkpoint only needs the seed, the step count and the tensors to resume a
//! run exactly.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{random_resized_crop_flip, AugmentParams, DataError};
use crate::loss::{build_targets, pretrain_losses, LossError, LossReport};
use crate::mask::{build_mask_plan, Alpha, DirichletParams, MaskError};
use crate::model::{forward_pretrain, Model, ModelError, ParamMap, Task};
use crate::optim::{adamw_step, effective_lr, lr_at, OptimConfig, OptimError, OptimizerState};
use crate::rng::{derive_seed, streams, Rng};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::tokenize::Sample;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (lr {lr:e}); per-task: {detail}")]
    NonFinite {
        step: usize,
        lr: f64,
        detail: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Optimization recipe. The published preset and a desk-scale preset keep the
/// same warmup fraction (10% of training).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub alpha: Alpha,
    pub num_visible: usize,
    pub seed: u64,
    /// Micro-batches per optimizer step; gradients accumulate across them.
    pub grad_accum: usize,
    pub augment: bool,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every_epochs: usize,
}

impl TrainConfig {
    /// Published ViT-B recipe.
    pub fn vitb_paper() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 2048,
            epochs: 1600,
            warmup_epochs: 160,
            warmup_lr: 1e-6,
            alpha: Alpha::Concentration(1.0),
            num_visible: 98,
            seed: 0,
            grad_accum: 1,
            augment: true,
            checkpoint_every_epochs: 100,
        }
    }

    /// Laptop-scale preset: 8-sample overfit geometry, no augmentation,
    /// same 10% warmup fraction, peak lr 2e-3 after the scaling rule.
    pub fn desk() -> Self {
        TrainConfig {
            base_lr: 0.064,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 2400,
            warmup_epochs: 240,
            warmup_lr: 1e-6,
            alpha: Alpha::Concentration(1.0),
            num_visible: 16,
            seed: 0,
            grad_accum: 1,
            augment: false,
            checkpoint_every_epochs: 800,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_epochs >= self.epochs {
            return Err(TrainError::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("warmup_lr", self.warmup_lr),
            ("adam_eps", self.adam_eps),
        ] {
            if v <= 0.0 {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.grad_accum == 0 || self.batch_size % self.grad_accum != 0 {
            return Err(TrainError::Config(format!(
                "grad_accum {} must divide batch_size {}",
                self.grad_accum, self.batch_size
            )));
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn peak_lr(&self) -> f64 {
        effective_lr(self.base_lr, self.batch_size)
    }
}

/// Steps per epoch for a dataset size: every sample slot appears once.
pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> usize {
    dataset_len.div_ceil(batch_size)
}

/// Indices of the samples in one batch, from the per-epoch shuffled order.
fn batch_indices(
    seed: u64,
    epoch: usize,
    step_in_epoch: usize,
    batch_size: usize,
    dataset_len: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset_len).collect();
    let mut rng = Rng::stream(seed, &[streams::ORDER, epoch as u64]);
    rng.shuffle(&mut order);
    (0..batch_size)
        .map(|s| order[(step_in_epoch * batch_size + s) % dataset_len])
        .collect()
}

/// One optimizer step over a batch; returns the aggregated report.
/// The batch loss is the mean of per-sample totals, accumulated across
/// `grad_accum` micro-batches before the single AdamW update.
pub fn train_step(
    model: &mut Model<f32>,
    state: &mut OptimizerState<f32>,
    samples: &[(usize, Sample)],
    config: &TrainConfig,
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
) -> Result<LossReport, TrainError> {
    config.validate()?;
    let grid = model.config.grid()?;
    let caps = vec![grid * grid; model.config.modalities.len()];
    let dirichlet = DirichletParams::new(
        config.alpha,
        model.config.modalities.len(),
        config.num_visible,
    )?;
    let lr = lr_at(step, total_steps, warmup_steps, config.peak_lr(), config.warmup_lr);
    let inv_batch = 1.0 / samples.len() as f32;

    let mut grads: BTreeMap<String, Tensor<f32>> = model
        .params
        .iter()
        .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
        .collect();
    let mut task_sums: BTreeMap<Task, (f64, usize)> = BTreeMap::new();
    let mut total_sum = 0.0f64;

    let chunk_len = samples.len() / config.grad_accum;
    for chunk in samples.chunks(chunk_len.max(1)) {
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, true);
        let mut chunk_loss = None;
        for &(slot, ref sample) in chunk {
            let sample = if config.augment {
                let mut rng = Rng::stream(config.seed, &[streams::AUGMENT, step as u64, slot as u64]);
                let res = model.config.modalities[0].input_resolution;
                random_resized_crop_flip(sample, &AugmentParams::paper(res), &mut rng)
            } else {
                sample.clone()
            };
            let plan_seed = derive_seed(config.seed, &[streams::MASK, step as u64, slot as u64]);
            let plan = build_mask_plan(&dirichlet, &caps, plan_seed)?;
            let batch = model.tokenize(&mut tape, &sample, &bound)?;
            let output = forward_pretrain(&mut tape, model, &bound, &batch, &plan)?;
            let targets = build_targets(&sample, model)?;
            let (sample_total, report) =
                pretrain_losses(&mut tape, model, &output, &targets, &plan, step)?;
            total_sum += report.total;
            for (task, loss, count) in report.per_task {
                let entry = task_sums.entry(task).or_insert((0.0, 0));
                if count > 0 {
                    entry.0 += loss;
                    entry.1 += count;
                }
            }
            let scaled = tape.scale(sample_total, inv_batch);
            chunk_loss = Some(match chunk_loss {
                None => scaled,
                Some(acc) => tape.add(acc, scaled)?,
            });
        }
        let chunk_loss = chunk_loss.expect("non-empty chunk");
        if !tape.value(chunk_loss).item().is_finite() {
            return Err(TrainError::NonFinite {
                step,
                lr,
                detail: render_task_sums(&task_sums, samples.len()),
            });
        }
        tape.backward(chunk_loss)?;
        for (name, grad) in grads.iter_mut() {
            if let Some(g) = tape.grad(bound.get(name)) {
                for (acc, &v) in grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
    }

    let total = total_sum / samples.len() as f64;
    if !total.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            lr,
            detail: render_task_sums(&task_sums, samples.len()),
        });
    }
    adamw_step(&mut model.params, &grads, state, lr, &config.optim())?;

    let per_task = model
        .config
        .tasks
        .iter()
        .map(|&task| {
            let (sum, count) = task_sums.get(&task).copied().unwrap_or((0.0, 0));
            let mean = if count > 0 { sum / samples.len() as f64 } else { 0.0 };
            (task, mean, count)
        })
        .collect();
    Ok(LossReport {
        step,
        per_task,
        total,
    })
}

fn render_task_sums(sums: &BTreeMap<Task, (f64, usize)>, batch: usize) -> String {
    sums.iter()
        .map(|(task, (sum, _))| format!("{}={:.6}", task.name(), sum / batch as f64))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Run the loop from `start_step` to the end of the schedule. `sink` sees
/// every step's learning rate and report (the loss log).
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    model: &mut Model<f32>,
    state: &mut OptimizerState<f32>,
    dataset: &[Sample],
    config: &TrainConfig,
    start_step: usize,
    config_text: &str,
    checkpoint_dir: Option<&Path>,
    sink: &mut dyn FnMut(usize, f64, &LossReport),
) -> Result<Vec<LossReport>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    let spe = steps_per_epoch(dataset.len(), config.batch_size);
    let total_steps = config.epochs * spe;
    let warmup_steps = config.warmup_epochs * spe;
    let mut reports = Vec::with_capacity(total_steps.saturating_sub(start_step));

    for step in start_step..total_steps {
        let epoch = step / spe;
        let indices = batch_indices(config.seed, epoch, step % spe, config.batch_size, dataset.len());
        let samples: Vec<(usize, Sample)> = indices
            .iter()
            .enumerate()
            .map(|(slot, &i)| (slot, dataset[i].clone()))
            .collect();
        let lr = lr_at(step, total_steps, warmup_steps, config.peak_lr(), config.warmup_lr);
        let report = train_step(model, state, &samples, config, step, total_steps, warmup_steps)?;
        sink(step, lr, &report);
        reports.push(report);

        if let Some(dir) = checkpoint_dir {
            let done = step + 1;
            let at_epoch_boundary = done % spe == 0;
            let every = config.checkpoint_every_epochs;
            let epoch_done = done / spe;
            if at_epoch_boundary
                && ((every > 0 && epoch_done % every == 0) || done == total_steps)
            {
                let path = dir.join(format!("checkpoint_step{done:07}.ckpt"));
                save_state(&path, model, state, config.seed, done as u64, config_text)?;
            }
        }
    }
    Ok(reports)
}

// ---- checkpoint binding -----------------------------------------------------

/// Everything a checkpoint stores, unpacked.
pub struct TrainState {
    pub params: ParamMap<f32>,
    pub optim: OptimizerState<f32>,
    pub seed: u64,
    pub step: u64,
    pub config_text: String,
}

pub fn save_state(
    path: &Path,
    model: &Model<f32>,
    state: &OptimizerState<f32>,
    seed: u64,
    step: u64,
    config_text: &str,
) -> Result<(), CheckpointError> {
    let mut tensors = model.params.clone();
    for (name, t) in &state.m {
        tensors.insert(format!("optim.m.{name}"), t.clone());
    }
    for (name, t) in &state.v {
        tensors.insert(format!("optim.v.{name}"), t.clone());
    }
    Checkpoint {
        seed,
        step,
        config_text: config_text.to_string(),
        tensors,
    }
    .save(path)
}

pub fn load_state(path: &Path) -> Result<TrainState, CheckpointError> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    let mut params = ParamMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, tensor) in ckpt.tensors {
        if let Some(rest) = name.strip_prefix("optim.m.") {
            m.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("optim.v.") {
            v.insert(rest.to_string(), tensor);
        } else {
            params.insert(name, tensor);
        }
    }
    for name in params.keys() {
        if !m.contains_key(name) || !v.contains_key(name) {
            return Err(CheckpointError::Format {
                offset: 0,
                message: format!("missing optimizer moments for `{name}`"),
            });
        }
    }
    Ok(TrainState {
        optim: OptimizerState {
            m,
            v,
            step: ckpt.step,
        },
        params,
        seed: ckpt.seed,
        step: ckpt.step,
        config_text: ckpt.config_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scene_with;
    use crate::model::{DecoderConfig, EncoderConfig, ModelConfig};
    use crate::optim::lr_at;

    fn tiny_model(seed: u64) -> Model<f32> {
        let mut config = ModelConfig::desk(32);
        config.encoder = EncoderConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        config.decoder = DecoderConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        Model::init(config, seed).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            base_lr: 0.064,
            batch_size: 2,
            epochs: 4,
            warmup_epochs: 1,
            num_visible: 4,
            augment: false,
            checkpoint_every_epochs: 0,
            ..TrainConfig::desk()
        }
    }

    fn tiny_data(n: usize) -> Vec<Sample> {
        (0..n as u64)
            .map(|i| generate_scene_with(i, 32, 3, 0.02))
            .collect()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.warmup_epochs = c.epochs;
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
        let mut c = tiny_config();
        c.base_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.grad_accum = 3; // does not divide batch 2
        assert!(c.validate().is_err());
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::vitb_paper().validate().is_ok());
    }

    #[test]
    fn presets_keep_warmup_fraction() {
        let paper = TrainConfig::vitb_paper();
        let desk = TrainConfig::desk();
        let f1 = paper.warmup_epochs as f64 / paper.epochs as f64;
        let f2 = desk.warmup_epochs as f64 / desk.epochs as f64;
        assert!((f1 - 0.1).abs() < 1e-12);
        assert!((f2 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let data = tiny_data(4);
        let config = tiny_config();
        let run = || {
            let mut model = tiny_model(1);
            let mut state = OptimizerState::new(&model.params);
            let mut lines = Vec::new();
            let reports = train_loop(
                &mut model,
                &mut state,
                &data,
                &config,
                0,
                "cfg",
                None,
                &mut |step, lr, r| lines.push(format!("{step} {lr:e} {}", r.render(lr))),
            )
            .unwrap();
            (lines, reports.last().unwrap().total.to_bits())
        };
        let (lines_a, bits_a) = run();
        let (lines_b, bits_b) = run();
        assert_eq!(lines_a, lines_b);
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn logged_lr_matches_schedule_exactly() {
        let data = tiny_data(4);
        let config = tiny_config();
        let mut model = tiny_model(2);
        let mut state = OptimizerState::new(&model.params);
        let spe = steps_per_epoch(data.len(), config.batch_size);
        let total = config.epochs * spe;
        let warmup = config.warmup_epochs * spe;
        let mut seen = Vec::new();
        train_loop(
            &mut model,
            &mut state,
            &data,
            &config,
            0,
            "cfg",
            None,
            &mut |step, lr, _| seen.push((step, lr)),
        )
        .unwrap();
        assert_eq!(seen.len(), total);
        for (step, lr) in seen {
            assert_eq!(lr, lr_at(step, total, warmup, config.peak_lr(), config.warmup_lr));
        }
    }

    #[test]
    fn gradient_accumulation_matches_single_batch() {
        let data = tiny_data(4);
        let mut config = tiny_config();
        config.batch_size = 4;
        config.epochs = 2;
        let run = |accum: usize| {
            let mut cfg = config.clone();
            cfg.grad_accum = accum;
            let mut model = tiny_model(3);
            let mut state = OptimizerState::new(&model.params);
            train_loop(&mut model, &mut state, &data, &cfg, 0, "cfg", None, &mut |_, _, _| {})
                .unwrap();
            model.params
        };
        let whole = run(1);
        let micro = run(2);
        for (name, a) in &whole {
            let b = &micro[name];
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6, "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn resume_is_bit_exact() {
        let data = tiny_data(4);
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();

        // uninterrupted run
        let mut model_a = tiny_model(4);
        let mut state_a = OptimizerState::new(&model_a.params);
        let mut log_a = Vec::new();
        train_loop(
            &mut model_a,
            &mut state_a,
            &data,
            &config,
            0,
            "cfg",
            None,
            &mut |step, lr, r| log_a.push(r.render(lr) + &format!(" s{step}")),
        )
        .unwrap();

        // interrupted at step 3, checkpointed, resumed
        let mut model_b = tiny_model(4);
        let mut state_b = OptimizerState::new(&model_b.params);
        let mut log_b = Vec::new();
        let spe = steps_per_epoch(data.len(), config.batch_size);
        let total = config.epochs * spe;
        let cut = 3;
        for step in 0..cut {
            let indices =
                batch_indices(config.seed, step / spe, step % spe, config.batch_size, data.len());
            let samples: Vec<(usize, Sample)> = indices
                .iter()
                .enumerate()
                .map(|(slot, &i)| (slot, data[i].clone()))
                .collect();
            let lr = lr_at(step, total, config.warmup_epochs * spe, config.peak_lr(), config.warmup_lr);
            let r = train_step(&mut model_b, &mut state_b, &samples, &config, step, total, config.warmup_epochs * spe).unwrap();
            log_b.push(r.render(lr) + &format!(" s{step}"));
        }
        let ckpt_path = dir.path().join("cut.ckpt");
        save_state(&ckpt_path, &model_b, &state_b, config.seed, cut as u64, "cfg").unwrap();

        let loaded = load_state(&ckpt_path).unwrap();
        assert_eq!(loaded.step, cut as u64);
        let mut model_c = Model {
            config: model_b.config.clone(),
            params: loaded.params,
        };
        let mut state_c = loaded.optim;
        train_loop(
            &mut model_c,
            &mut state_c,
            &data,
            &config,
            cut,
            "cfg",
            None,
            &mut |step, lr, r| log_b.push(r.render(lr) + &format!(" s{step}")),
        )
        .unwrap();
        assert_eq!(log_a, log_b, "resumed log must match the uninterrupted one");
        for (name, a) in &model_a.params {
            assert_eq!(a.data(), model_c.params[name].data(), "{name}");
        }
    }

    #[test]
    fn checkpoints_are_written_at_epoch_boundaries() {
        let data = tiny_data(2);
        let mut config = tiny_config();
        config.epochs = 4;
        config.checkpoint_every_epochs = 2;
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(5);
        let mut state = OptimizerState::new(&model.params);
        train_loop(
            &mut model,
            &mut state,
            &data,
            &config,
            0,
            "cfg",
            Some(dir.path()),
            &mut |_, _, _| {},
        )
        .unwrap();
        let mut files: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        files.sort();
        assert_eq!(files, vec![
            "checkpoint_step0000002.ckpt",
            "checkpoint_step0000004.ckpt",
        ]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut model = tiny_model(6);
        let mut state = OptimizerState::new(&model.params);
        let err = train_loop(
            &mut model,
            &mut state,
            &[],
            &tiny_config(),
            0,
            "cfg",
            None,
            &mut |_, _, _| {},
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }

    #[test]
    fn loss_decreases_on_short_run() {
        let data = tiny_data(2);
        let mut config = tiny_config();
        config.batch_size = 2;
        config.epochs = 60;
        config.warmup_epochs = 6;
        config.num_visible = 4;
        let mut model = tiny_model(7);
        let mut state = OptimizerState::new(&model.params);
        let reports = train_loop(
            &mut model,
            &mut state,
            &data,
            &config,
            0,
            "cfg",
            None,
            &mut |_, _, _| {},
        )
        .unwrap();
        let early: f64 = reports[..5].iter().map(|r| r.total).sum::<f64>() / 5.0;
        let late: f64 = reports[reports.len() - 5..]
            .iter()
            .map(|r| r.total)
            .sum::<f64>()
            / 5.0;
        assert!(
            late < early,
            "loss should trend down: early {early:.4} late {late:.4}"
        );
    }
}
