//! Implementations of the `multimae` subcommands. The binary is a thin
//! argument parser over these; the `examples/` directory calls the same
//! functions.
//!
//! Exit codes: 0 success, 1 invariant-check failure, 2 usage or config
//! error, 3 numeric abort (non-finite loss).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::check;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, Dataset};
use crate::mask::{build_mask_plan, Alpha, DirichletParams, MaskPlan};
use crate::model::{export_single_modal_vit, Model};
use crate::optim::OptimizerState;
use crate::rng::derive_seed;
use crate::tokenize::{Modality, Sample};
use crate::train::{self, load_state, TrainError};
use crate::viz;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config, unreadable/unwritable paths.
    #[error("{0}")]
    Usage(String),
    /// One or more invariant checks failed.
    #[error("{0}")]
    CheckFailed(String),
    /// Training aborted on a non-finite loss.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

/// Every command drops a metadata file next to its outputs: command line
/// summary, crate version, seeds and configs.
fn write_run_metadata(dir: &Path, command: &str, body: &str) -> Result<(), CliError> {
    let text = format!(
        "command={command}\nversion={}\n{body}",
        env!("CARGO_PKG_VERSION")
    );
    fs::write(dir.join("run_metadata.txt"), text)
        .map_err(|e| usage(format!("cannot write run metadata: {e}")))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| usage(format!("cannot create {}: {e}", path.display())))
}

// ---- gen-data -----------------------------------------------------------------

pub struct GenDataArgs {
    pub out: PathBuf,
    pub num: usize,
    pub resolution: usize,
    pub seed: u64,
    pub shapes: usize,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    if args.num == 0 {
        return Err(CliError::Usage("num must be >= 1".into()));
    }
    if args.resolution == 0 || args.resolution % 16 != 0 {
        return Err(CliError::Usage(format!(
            "resolution {} must be a positive multiple of 16",
            args.resolution
        )));
    }
    if args.shapes == 0 {
        return Err(CliError::Usage("shapes must be >= 1".into()));
    }
    ensure_dir(&args.out)?;
    let manifest = data::generate_dataset(&args.out, args.num, args.resolution, args.shapes, args.seed)
        .map_err(usage)?;
    write_run_metadata(
        &args.out,
        "gen-data",
        &format!(
            "seed={}\nnum={}\nresolution={}\nshapes={}\n",
            args.seed, args.num, args.resolution, args.shapes
        ),
    )?;
    println!(
        "wrote {} samples at {}px to {}",
        manifest.ids.len(),
        manifest.resolution,
        args.out.display()
    );
    Ok(())
}

// ---- pretrain ------------------------------------------------------------------

pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub set: Vec<String>,
    pub dry_run: bool,
}

fn load_run_config(args_config: &Option<PathBuf>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut config = match args_config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(usage)?
        }
        None => RunConfig::desk(),
    };
    config.apply_overrides(overrides).map_err(usage)?;
    Ok(config)
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<(), CliError> {
    // validate everything before any side effect
    let (config, mut model, mut state, start_step) = match &args.resume {
        None => {
            let config = load_run_config(&args.config, &args.set)?;
            let model = Model::<f32>::init(config.model.clone(), config.train.seed).map_err(usage)?;
            let state = OptimizerState::new(&model.params);
            (config, model, state, 0usize)
        }
        Some(ckpt_path) => {
            let loaded = load_state(ckpt_path).map_err(usage)?;
            let config = RunConfig::parse(&loaded.config_text).map_err(usage)?;
            if args.config.is_some() || !args.set.is_empty() {
                let requested = load_run_config(&args.config, &args.set)?;
                if requested != config {
                    return Err(CliError::Usage(
                        "resume config differs from the checkpoint's; \
                         resume continues the original run exactly"
                            .into(),
                    ));
                }
            }
            let model = Model {
                config: config.model.clone(),
                params: loaded.params,
            };
            let mut state = loaded.optim;
            state.step = loaded.step;
            (config, model, state, loaded.step as usize)
        }
    };
    let dataset = Dataset::open(&args.data).map_err(usage)?;
    if dataset.manifest.resolution != config.resolution() {
        return Err(CliError::Usage(format!(
            "dataset resolution {} does not match model resolution {}",
            dataset.manifest.resolution,
            config.resolution()
        )));
    }

    println!(
        "effective lr {:e} (base {:e} x batch {} / 256)",
        config.train.peak_lr(),
        config.train.base_lr,
        config.train.batch_size
    );
    let spe = train::steps_per_epoch(dataset.len(), config.train.batch_size);
    println!(
        "schedule: {} epochs x {} steps/epoch, warmup {} epochs, alpha {}, V {}",
        config.train.epochs, spe, config.train.warmup_epochs, config.train.alpha,
        config.train.num_visible
    );
    if args.dry_run {
        return Ok(());
    }

    ensure_dir(&args.out)?;
    let config_text = config.render();
    write_run_metadata(
        &args.out,
        "pretrain",
        &format!("data={}\nseed={}\n\n{config_text}", args.data.display(), config.train.seed),
    )?;

    let samples: Result<Vec<Sample>, _> = (0..dataset.len()).map(|i| dataset.load(i)).collect();
    let samples = samples.map_err(usage)?;

    let log_path = args.out.join("loss_log.txt");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(start_step > 0)
        .truncate(start_step == 0)
        .write(true)
        .open(&log_path)
        .map_err(|e| usage(format!("cannot open loss log: {e}")))?;

    let result = train::train_loop(
        &mut model,
        &mut state,
        &samples,
        &config.train,
        start_step,
        &config_text,
        Some(&args.out),
        &mut |_, lr, report| {
            writeln!(log, "{}", report.render(lr)).expect("loss log writable");
        },
    );
    let reports = match result {
        Ok(reports) => reports,
        Err(TrainError::NonFinite { step, lr, detail }) => {
            return Err(CliError::Numeric(format!(
                "aborted on non-finite loss at step {step} (lr {lr:e}); {detail}"
            )));
        }
        Err(other) => return Err(usage(other)),
    };

    let final_path = args.out.join("checkpoint_final.ckpt");
    let total_steps = (config.train.epochs * spe) as u64;
    train::save_state(&final_path, &model, &state, config.train.seed, total_steps, &config_text)
        .map_err(usage)?;
    if let Some(last) = reports.last() {
        println!("final {}", last.render(0.0));
    }
    println!("checkpoint: {}", final_path.display());
    println!("loss log:   {}", log_path.display());
    Ok(())
}

// ---- reconstruct ---------------------------------------------------------------

pub struct ReconstructArgs {
    pub checkpoint: PathBuf,
    /// Sample path prefix: `<dir>/<id>` with the modality suffixes on disk.
    pub sample: PathBuf,
    pub alpha: String,
    pub seed: u64,
    pub out: PathBuf,
    /// Reuse a serialized mask plan instead of sampling one.
    pub mask_plan: Option<PathBuf>,
}

/// Rebuild a model from a training checkpoint.
pub fn model_from_checkpoint(path: &Path) -> Result<(Model<f32>, RunConfig), CliError> {
    let loaded = load_state(path).map_err(usage)?;
    let config = RunConfig::parse(&loaded.config_text).map_err(usage)?;
    Ok((
        Model {
            config: config.model.clone(),
            params: loaded.params,
        },
        config,
    ))
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<(), CliError> {
    let alpha = Alpha::parse(&args.alpha).map_err(usage)?;
    let (model, config) = model_from_checkpoint(&args.checkpoint)?;
    let dir = args
        .sample
        .parent()
        .ok_or_else(|| CliError::Usage("sample path needs a parent directory".into()))?;
    let id = args
        .sample
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Usage("sample path needs a file-name component".into()))?;
    let sample = data::load_sample(dir, id).map_err(usage)?;
    if sample.height != config.resolution() {
        return Err(CliError::Usage(format!(
            "sample resolution {} does not match checkpoint resolution {}",
            sample.height,
            config.resolution()
        )));
    }

    let grid = model.config.grid().map_err(usage)?;
    let caps = vec![grid * grid; model.config.modalities.len()];
    let plan = match &args.mask_plan {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read mask plan: {e}")))?;
            let plan = MaskPlan::from_text(&text).map_err(usage)?;
            if plan.visible.len() != caps.len()
                || plan.visible.iter().flatten().any(|&i| i >= grid * grid)
            {
                return Err(CliError::Usage("mask plan does not fit this model".into()));
            }
            plan
        }
        None => {
            let params = DirichletParams::new(
                alpha,
                model.config.modalities.len(),
                config.train.num_visible,
            )
            .map_err(usage)?;
            build_mask_plan(&params, &caps, derive_seed(args.seed, &[])).map_err(usage)?
        }
    };

    ensure_dir(&args.out)?;
    let paths = viz::write_triptychs(&model, &sample, &plan, &args.out).map_err(usage)?;
    fs::write(args.out.join("mask_plan.txt"), plan.to_text())
        .map_err(|e| usage(format!("cannot write mask plan: {e}")))?;
    write_run_metadata(
        &args.out,
        "reconstruct",
        &format!(
            "checkpoint={}\nsample={}\nalpha={alpha}\nseed={}\n",
            args.checkpoint.display(),
            args.sample.display(),
            args.seed
        ),
    )?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

// ---- check -------------------------------------------------------------------

pub fn cmd_check(suite: &str) -> Result<(), CliError> {
    let results = check::run_suite(suite).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown suite `{suite}` (available: grads, mask, losses, export, all)"
        ))
    })?;
    let mut failures = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {}: {}", r.name, r.detail);
        if !r.passed {
            failures += 1;
        }
    }
    println!("{} checks, {} failed", results.len(), failures);
    if failures > 0 {
        return Err(CliError::CheckFailed(format!("{failures} checks failed")));
    }
    Ok(())
}

// ---- export-vit ----------------------------------------------------------------

pub struct ExportVitArgs {
    pub checkpoint: PathBuf,
    pub modality: String,
    pub out: PathBuf,
}

pub fn cmd_export_vit(args: &ExportVitArgs) -> Result<(), CliError> {
    let modality = Modality::parse(&args.modality).map_err(usage)?;
    let (model, config) = model_from_checkpoint(&args.checkpoint)?;
    let exported = export_single_modal_vit(&model, modality).map_err(usage)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let ckpt = Checkpoint {
        seed: 0,
        step: 0,
        config_text: format!("exported_modality={}\n{}", modality.name(), config.render()),
        tensors: exported,
    };
    ckpt.save(&args.out).map_err(usage)?;
    let src_len = fs::metadata(&args.checkpoint).map_err(|e| usage(e.to_string()))?.len();
    let dst_len = fs::metadata(&args.out).map_err(|e| usage(e.to_string()))?.len();
    println!(
        "exported {} trunk to {} ({} -> {} bytes)",
        modality.name(),
        args.out.display(),
        src_len,
        dst_len
    );
    Ok(())
}

/// Parse an exported single-modal checkpoint back into (modality, tensors).
pub fn load_exported_vit(
    path: &Path,
) -> Result<(Modality, RunConfig, crate::model::ParamMap<f32>), CliError> {
    let ckpt = Checkpoint::<f32>::load(path).map_err(usage)?;
    let (first, rest) = ckpt
        .config_text
        .split_once('\n')
        .ok_or_else(|| CliError::Usage("exported checkpoint missing modality tag".into()))?;
    let modality = first
        .strip_prefix("exported_modality=")
        .ok_or_else(|| CliError::Usage("exported checkpoint missing modality tag".into()))
        .and_then(|m| Modality::parse(m).map_err(usage))?;
    let config = RunConfig::parse(rest).map_err(usage)?;
    Ok((modality, config, ckpt.tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_data_validation() {
        let dir = tempfile::tempdir().unwrap();
        let bad_num = GenDataArgs {
            out: dir.path().join("d"),
            num: 0,
            resolution: 32,
            seed: 1,
            shapes: 3,
        };
        let err = cmd_gen_data(&bad_num).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("num"));

        let bad_res = GenDataArgs {
            out: dir.path().join("d"),
            num: 2,
            resolution: 50,
            seed: 1,
            shapes: 3,
        };
        assert_eq!(cmd_gen_data(&bad_res).unwrap_err().exit_code(), 2);
        // nothing was written by the failed commands
        assert!(!dir.path().join("d").exists());
    }

    #[test]
    fn gen_data_writes_dataset_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        cmd_gen_data(&GenDataArgs {
            out: out.clone(),
            num: 2,
            resolution: 32,
            seed: 9,
            shapes: 3,
        })
        .unwrap();
        assert!(out.join("manifest.txt").exists());
        assert!(out.join("run_metadata.txt").exists());
        assert!(Dataset::open(&out).is_ok());
    }

    #[test]
    fn check_command_rejects_unknown_suite() {
        assert_eq!(cmd_check("zebra").unwrap_err().exit_code(), 2);
    }
}
