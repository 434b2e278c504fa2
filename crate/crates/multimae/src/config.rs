//! Run configuration: a key=value text format with section headers, embedded
//! presets, and strict validation (unknown keys are rejected before any work
//! starts).
//!
//! ```text
//! preset=desk            # optional, must come first; "desk" or "vitb-paper"
//!
//! [model]
//! resolution=64
//! encoder_dim=64
//! ...
//!
//! [train]
//! base_lr=6.4e-2
//! ...
//! ```

use thiserror::Error;

use crate::mask::Alpha;
use crate::model::{DecoderConfig, EncoderConfig, ModelConfig, Task};
use crate::tokenize::ModalityConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("unknown preset `{0}` (available: desk, vitb-paper)")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Everything a run needs: architecture plus optimization recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(64),
            train: TrainConfig::desk(),
        }
    }

    pub fn vitb_paper() -> Self {
        RunConfig {
            model: ModelConfig::vit_b_paper(),
            train: TrainConfig::vitb_paper(),
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "vitb-paper" => Ok(Self::vitb_paper()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.modalities[0].input_resolution % 16 != 0 {
            return Err(ConfigError::Invalid(format!(
                "resolution {} must be divisible by 16",
                self.model.modalities[0].input_resolution
            )));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.model.modalities[0].input_resolution
    }

    /// Normalized text form; `parse(render())` round-trips.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let (mean, std) = m.modalities[0].rgb_stats.unwrap_or(([0.0; 3], [1.0; 3]));
        let triple = |v: [f32; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        format!(
            "[model]\n\
             resolution={}\n\
             encoder_dim={}\nencoder_depth={}\nencoder_heads={}\nencoder_mlp_ratio={}\n\
             decoder_dim={}\ndecoder_depth={}\ndecoder_heads={}\ndecoder_mlp_ratio={}\n\
             rgb_mean={}\nrgb_std={}\n\
             \n[train]\n\
             base_lr={}\nweight_decay={}\nbeta1={}\nbeta2={}\nadam_eps={}\n\
             batch_size={}\nepochs={}\nwarmup_epochs={}\nwarmup_lr={}\n\
             alpha={}\nnum_visible={}\nseed={}\ngrad_accum={}\naugment={}\n\
             checkpoint_every_epochs={}\n",
            self.resolution(),
            m.encoder.dim,
            m.encoder.depth,
            m.encoder.heads,
            m.encoder.mlp_ratio,
            m.decoder.dim,
            m.decoder.depth,
            m.decoder.heads,
            m.decoder.mlp_ratio,
            triple(mean),
            triple(std),
            t.base_lr,
            t.weight_decay,
            t.beta1,
            t.beta2,
            t.adam_eps,
            t.batch_size,
            t.epochs,
            t.warmup_epochs,
            t.warmup_lr,
            t.alpha,
            t.num_visible,
            t.seed,
            t.grad_accum,
            t.augment,
            t.checkpoint_every_epochs,
        )
    }

    /// Parse config text, starting from the preset named inside (or desk).
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::desk();
        let mut section = String::new();
        let mut seen_any_key = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if section != "model" && section != "train" {
                    return Err(ConfigError::Parse {
                        line: lineno + 1,
                        message: format!("unknown section `[{section}]`"),
                    });
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: lineno + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() && key == "preset" {
                if seen_any_key {
                    return Err(ConfigError::Parse {
                        line: lineno + 1,
                        message: "preset must come before other keys".into(),
                    });
                }
                config = Self::preset(value)?;
                continue;
            }
            seen_any_key = true;
            config.apply(&section, key, value).map_err(|e| match e {
                ConfigError::UnknownKey(_) => e,
                other => ConfigError::Parse {
                    line: lineno + 1,
                    message: other.to_string(),
                },
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Apply one `section.key=value` override.
    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        let bad = |what: &str| ConfigError::Invalid(format!("bad {what} `{value}` for {full}"));
        let parse_usize = || value.parse::<usize>().map_err(|_| bad("integer"));
        let parse_f64 = || value.parse::<f64>().map_err(|_| bad("number"));
        let parse_u64 = || value.parse::<u64>().map_err(|_| bad("integer"));
        let parse_bool = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("bool (true/false)")),
        };
        let parse_triple = || -> Result<[f32; 3], ConfigError> {
            let parts: Vec<&str> = value.split(',').collect();
            if parts.len() != 3 {
                return Err(bad("triple a,b,c"));
            }
            let mut out = [0.0f32; 3];
            for (o, p) in out.iter_mut().zip(parts) {
                *o = p.trim().parse().map_err(|_| bad("triple a,b,c"))?;
            }
            Ok(out)
        };

        match full.as_str() {
            "model.resolution" => {
                let res = parse_usize()?;
                let stats = self.model.modalities[0].rgb_stats;
                self.model.modalities = ModalityConfig::standard(res);
                self.model.modalities[0].rgb_stats = stats;
            }
            "model.encoder_dim" => self.model.encoder.dim = parse_usize()?,
            "model.encoder_depth" => self.model.encoder.depth = parse_usize()?,
            "model.encoder_heads" => self.model.encoder.heads = parse_usize()?,
            "model.encoder_mlp_ratio" => self.model.encoder.mlp_ratio = parse_usize()?,
            "model.decoder_dim" => self.model.decoder.dim = parse_usize()?,
            "model.decoder_depth" => self.model.decoder.depth = parse_usize()?,
            "model.decoder_heads" => self.model.decoder.heads = parse_usize()?,
            "model.decoder_mlp_ratio" => self.model.decoder.mlp_ratio = parse_usize()?,
            "model.rgb_mean" => {
                let mean = parse_triple()?;
                let (_, std) = self.model.modalities[0].rgb_stats.unwrap_or(([0.5; 3], [0.5; 3]));
                self.model.modalities[0].rgb_stats = Some((mean, std));
            }
            "model.rgb_std" => {
                let std = parse_triple()?;
                let (mean, _) = self.model.modalities[0].rgb_stats.unwrap_or(([0.5; 3], [0.5; 3]));
                self.model.modalities[0].rgb_stats = Some((mean, std));
            }
            "train.base_lr" => self.train.base_lr = parse_f64()?,
            "train.weight_decay" => self.train.weight_decay = parse_f64()?,
            "train.beta1" => self.train.beta1 = parse_f64()?,
            "train.beta2" => self.train.beta2 = parse_f64()?,
            "train.adam_eps" => self.train.adam_eps = parse_f64()?,
            "train.batch_size" => self.train.batch_size = parse_usize()?,
            "train.epochs" => self.train.epochs = parse_usize()?,
            "train.warmup_epochs" => self.train.warmup_epochs = parse_usize()?,
            "train.warmup_lr" => self.train.warmup_lr = parse_f64()?,
            "train.alpha" => {
                self.train.alpha =
                    Alpha::parse(value).map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
            "train.num_visible" => self.train.num_visible = parse_usize()?,
            "train.seed" => self.train.seed = parse_u64()?,
            "train.grad_accum" => self.train.grad_accum = parse_usize()?,
            "train.augment" => self.train.augment = parse_bool()?,
            "train.checkpoint_every_epochs" => {
                self.train.checkpoint_every_epochs = parse_usize()?
            }
            _ => return Err(ConfigError::UnknownKey(full)),
        }
        Ok(())
    }

    /// Apply `section.key=value` strings (command-line overrides).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for item in overrides {
            let (path, value) = item.split_once('=').ok_or_else(|| {
                ConfigError::Invalid(format!("override `{item}` is not section.key=value"))
            })?;
            let (section, key) = path.split_once('.').ok_or_else(|| {
                ConfigError::Invalid(format!("override key `{path}` needs a section prefix"))
            })?;
            self.apply(section, key, value)?;
        }
        self.validate()
    }

    /// The four standard tasks are fixed; exposed for completeness.
    pub fn tasks(&self) -> &[Task] {
        &self.model.tasks
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.model.encoder
    }

    pub fn decoder(&self) -> &DecoderConfig {
        &self.model.decoder
    }
}
