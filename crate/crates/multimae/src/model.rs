//! The multi-modal encoder, per-task decoders, and the forward passes that
//! tie them together.
//!
//! Pre-training: tokens from every modality are tokenized, a mask plan picks
//! the visible subset, the encoder sees only those plus a learned global
//! token, and one shallow decoder per task reconstructs the full patch grid
//! from mask tokens + the task's visible tokens, cross-attending into all
//! encoded tokens.
//!
//! Transfer: the same trunk runs over the full concatenated token sequence
//! with no masking. The trunk weights can be exported as a standard
//! single-modal ViT by keeping one input projection and dropping the rest.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::mask::MaskPlan;
use crate::rng::{streams, Rng};
use crate::tensor::{el, Scalar, Tape, Tensor, TensorError, Var};
use crate::tokenize::{
    self, Modality, ModalityConfig, ProjectionVars, Sample, TokenBatch, TokenizeError,
    CLASS_EMBED_DIM, NUM_CLASSES,
};

/// Layer-norm epsilon used by every block.
pub const LN_EPS: f64 = 1e-6;
/// Initialization scale for projections, tokens and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("mask plan inconsistent with token batch: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
}

/// Reconstruction tasks; `RgbStandardized` shares the rgb modality and exists
/// only as an output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    Rgb,
    RgbStandardized,
    Depth,
    Semseg,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Rgb, Task::RgbStandardized, Task::Depth, Task::Semseg];

    pub fn name(self) -> &'static str {
        match self {
            Task::Rgb => "rgb",
            Task::RgbStandardized => "rgb_std",
            Task::Depth => "depth",
            Task::Semseg => "semseg",
        }
    }

    pub fn parse(s: &str) -> Result<Task, ModelError> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| ModelError::UnknownTask(s.to_string()))
    }

    /// The input modality whose grid this task reconstructs.
    pub fn modality(self) -> Modality {
        match self {
            Task::Rgb | Task::RgbStandardized => Modality::Rgb,
            Task::Depth => Modality::Depth,
            Task::Semseg => Modality::Semseg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn vit_b() -> Self {
        EncoderConfig {
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    /// Trailing self-attention blocks after the cross-attention + MLP stage.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        DecoderConfig {
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn paper() -> Self {
        DecoderConfig {
            dim: 256,
            depth: 2,
            heads: 8,
            mlp_ratio: 4,
        }
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub modalities: Vec<ModalityConfig>,
    pub tasks: Vec<Task>,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Small configuration for laptop-scale training.
    pub fn desk(resolution: usize) -> Self {
        ModelConfig {
            modalities: ModalityConfig::standard(resolution),
            tasks: Task::ALL.to_vec(),
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
        }
    }

    /// ViT-B preset with the published pre-training geometry.
    pub fn vit_b_paper() -> Self {
        ModelConfig {
            modalities: ModalityConfig::standard(224),
            tasks: Task::ALL.to_vec(),
            encoder: EncoderConfig::vit_b(),
            decoder: DecoderConfig::paper(),
        }
    }

    pub fn grid(&self) -> Result<usize, ModelError> {
        Ok(tokenize::validate_configs(&self.modalities)?)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.grid()?;
        for (name, dim, heads) in [
            ("encoder", self.encoder.dim, self.encoder.heads),
            ("decoder", self.decoder.dim, self.decoder.heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(ModelError::Config(format!(
                    "{name} dim {dim} not divisible by {heads} heads"
                )));
            }
            if dim % 4 != 0 {
                return Err(ModelError::Config(format!(
                    "{name} dim {dim} must be a multiple of 4 for positional embeddings"
                )));
            }
        }
        if self.tasks.is_empty() {
            return Err(ModelError::Config("no tasks configured".into()));
        }
        for task in &self.tasks {
            if !self.modalities.iter().any(|m| m.modality == task.modality()) {
                return Err(ModelError::Config(format!(
                    "task {} needs modality {}",
                    task.name(),
                    task.modality().name()
                )));
            }
        }
        Ok(())
    }

    pub fn modality_config(&self, m: Modality) -> Option<&ModalityConfig> {
        self.modalities.iter().find(|c| c.modality == m)
    }

    /// Output dimension of one decoded patch for a task.
    pub fn task_out_dim(&self, task: Task) -> usize {
        let cfg = self
            .modality_config(task.modality())
            .expect("validated config");
        match task {
            Task::Rgb | Task::RgbStandardized | Task::Depth => cfg.patch_dim(),
            Task::Semseg => cfg.patch_size * cfg.patch_size * cfg.num_classes.unwrap_or(NUM_CLASSES),
        }
    }
}

/// Named parameter tensors, ordered by name.
pub type ParamMap<E> = BTreeMap<String, Tensor<E>>;

/// A model is its configuration plus the named tensors.
#[derive(Clone)]
pub struct Model<E: Scalar> {
    pub config: ModelConfig,
    pub params: ParamMap<E>,
}

/// Parameters resolved to tape vars for one forward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl<E: Scalar> Model<E> {
    /// Fresh model with truncated-normal(0.02) projections and embeddings,
    /// zero biases and unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::stream(seed, &[streams::INIT]);
        let mut params = ParamMap::new();
        let mut trunc = |shape: &[usize]| -> Tensor<E> {
            let n: usize = shape.iter().product();
            let data: Vec<E> = (0..n)
                .map(|_| el(rng.truncated_normal() * INIT_STD))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape/data agree")
        };

        let d = config.encoder.dim;
        for m in &config.modalities {
            let name = m.modality.name();
            params.insert(
                format!("input_proj.{name}.weight"),
                trunc(&[m.patch_dim(), d]),
            );
            params.insert(format!("input_proj.{name}.bias"), Tensor::zeros(&[d]));
        }
        if config
            .modalities
            .iter()
            .any(|m| m.modality == Modality::Semseg)
        {
            params.insert(
                "class_embed.table".into(),
                trunc(&[NUM_CLASSES, CLASS_EMBED_DIM]),
            );
        }
        params.insert("global_token".into(), trunc(&[d]));
        for i in 0..config.encoder.depth {
            insert_block_params(&mut params, &format!("encoder.block{i}"), d, config.encoder.mlp_ratio, &mut trunc);
        }
        params.insert("encoder.final_norm.gain".into(), Tensor::filled(&[d], E::one()));
        params.insert("encoder.final_norm.bias".into(), Tensor::zeros(&[d]));

        let dd = config.decoder.dim;
        let num_modalities = config.modalities.len();
        for task in &config.tasks {
            let t = task.name();
            params.insert(format!("decoder.{t}.input_proj.weight"), trunc(&[d, dd]));
            params.insert(format!("decoder.{t}.input_proj.bias"), Tensor::zeros(&[dd]));
            params.insert(format!("decoder.{t}.mask_token"), trunc(&[dd]));
            params.insert(
                format!("decoder.{t}.modality_embed"),
                trunc(&[num_modalities, dd]),
            );
            insert_attn_params(&mut params, &format!("decoder.{t}.cross"), dd, &mut trunc);
            params.insert(
                format!("decoder.{t}.cross.norm_q.gain"),
                Tensor::filled(&[dd], E::one()),
            );
            params.insert(format!("decoder.{t}.cross.norm_q.bias"), Tensor::zeros(&[dd]));
            params.insert(
                format!("decoder.{t}.cross.norm_kv.gain"),
                Tensor::filled(&[dd], E::one()),
            );
            params.insert(format!("decoder.{t}.cross.norm_kv.bias"), Tensor::zeros(&[dd]));
            insert_mlp_params(
                &mut params,
                &format!("decoder.{t}.cross_mlp"),
                dd,
                config.decoder.mlp_ratio,
                &mut trunc,
            );
            params.insert(
                format!("decoder.{t}.cross_mlp.norm.gain"),
                Tensor::filled(&[dd], E::one()),
            );
            params.insert(format!("decoder.{t}.cross_mlp.norm.bias"), Tensor::zeros(&[dd]));
            for i in 0..config.decoder.depth {
                insert_block_params(
                    &mut params,
                    &format!("decoder.{t}.block{i}"),
                    dd,
                    config.decoder.mlp_ratio,
                    &mut trunc,
                );
            }
            params.insert(
                format!("decoder.{t}.final_norm.gain"),
                Tensor::filled(&[dd], E::one()),
            );
            params.insert(format!("decoder.{t}.final_norm.bias"), Tensor::zeros(&[dd]));
            let out_dim = config.task_out_dim(*task);
            params.insert(format!("decoder.{t}.out.weight"), trunc(&[dd, out_dim]));
            params.insert(format!("decoder.{t}.out.bias"), Tensor::zeros(&[out_dim]));
        }
        Ok(Model { config, params })
    }

    /// Insert every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }

    /// Tokenizer vars for the configured modalities.
    pub fn projection_vars(&self, bound: &BoundParams) -> ProjectionVars {
        let proj = self
            .config
            .modalities
            .iter()
            .map(|m| {
                let name = m.modality.name();
                (
                    bound.get(&format!("input_proj.{name}.weight")),
                    bound.get(&format!("input_proj.{name}.bias")),
                )
            })
            .collect();
        let class_embed = bound.var("class_embed.table");
        ProjectionVars { proj, class_embed }
    }

    pub fn tokenize(
        &self,
        tape: &mut Tape<E>,
        sample: &Sample,
        bound: &BoundParams,
    ) -> Result<TokenBatch, ModelError> {
        let vars = self.projection_vars(bound);
        Ok(tokenize::tokenize_sample(
            tape,
            sample,
            &self.config.modalities,
            &vars,
            self.config.encoder.dim,
        )?)
    }
}

fn insert_attn_params<E: Scalar>(
    params: &mut ParamMap<E>,
    prefix: &str,
    dim: usize,
    trunc: &mut dyn FnMut(&[usize]) -> Tensor<E>,
) {
    for part in ["q", "k", "v", "out"] {
        params.insert(format!("{prefix}.{part}.weight"), trunc(&[dim, dim]));
        params.insert(format!("{prefix}.{part}.bias"), Tensor::zeros(&[dim]));
    }
}

fn insert_mlp_params<E: Scalar>(
    params: &mut ParamMap<E>,
    prefix: &str,
    dim: usize,
    ratio: usize,
    trunc: &mut dyn FnMut(&[usize]) -> Tensor<E>,
) {
    params.insert(format!("{prefix}.fc1.weight"), trunc(&[dim, dim * ratio]));
    params.insert(format!("{prefix}.fc1.bias"), Tensor::zeros(&[dim * ratio]));
    params.insert(format!("{prefix}.fc2.weight"), trunc(&[dim * ratio, dim]));
    params.insert(format!("{prefix}.fc2.bias"), Tensor::zeros(&[dim]));
}

fn insert_block_params<E: Scalar>(
    params: &mut ParamMap<E>,
    prefix: &str,
    dim: usize,
    ratio: usize,
    trunc: &mut dyn FnMut(&[usize]) -> Tensor<E>,
) {
    params.insert(format!("{prefix}.norm1.gain"), Tensor::filled(&[dim], E::one()));
    params.insert(format!("{prefix}.norm1.bias"), Tensor::zeros(&[dim]));
    insert_attn_params(params, &format!("{prefix}.attn"), dim, trunc);
    params.insert(format!("{prefix}.norm2.gain"), Tensor::filled(&[dim], E::one()));
    params.insert(format!("{prefix}.norm2.bias"), Tensor::zeros(&[dim]));
    insert_mlp_params(params, &format!("{prefix}.mlp"), dim, ratio, trunc);
}

// ---- attention and blocks ---------------------------------------------------

fn linear<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
) -> Result<Var, TensorError> {
    let w = bound.get(&format!("{prefix}.weight"));
    let b = bound.get(&format!("{prefix}.bias"));
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Multi-head attention from `q_in` (`[Tq, D]`) over `kv_in` (`[Tk, D]`).
fn attention<E: Scalar>(
    tape: &mut Tape<E>,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    bound: &BoundParams,
    prefix: &str,
) -> Result<Var, TensorError> {
    let tq = tape.value(q_in).shape()[0];
    let tk = tape.value(kv_in).shape()[0];
    let d = tape.value(q_in).shape()[1];
    let dh = d / heads;

    let split = |tape: &mut Tape<E>, x: Var, t: usize| -> Result<Var, TensorError> {
        let r = tape.reshape(x, &[t, heads, dh])?;
        tape.transpose(r, 0, 1) // [H, T, dh]
    };
    let q = linear(tape, q_in, bound, &format!("{prefix}.q"))?;
    let k = linear(tape, kv_in, bound, &format!("{prefix}.k"))?;
    let v = linear(tape, kv_in, bound, &format!("{prefix}.v"))?;
    let qh = split(tape, q, tq)?;
    let kh = split(tape, k, tk)?;
    let vh = split(tape, v, tk)?;

    let kt = tape.transpose(kh, 1, 2)?; // [H, dh, Tk]
    let scores = tape.matmul(qh, kt)?; // [H, Tq, Tk]
    let scaled = tape.scale(scores, el::<E>(1.0 / (dh as f64).sqrt()));
    let attn = tape.softmax(scaled)?;
    let ctx = tape.matmul(attn, vh)?; // [H, Tq, dh]
    let merged = tape.transpose(ctx, 0, 1)?;
    let flat = tape.reshape(merged, &[tq, d])?;
    linear(tape, flat, bound, &format!("{prefix}.out"))
}

fn mlp<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
) -> Result<Var, TensorError> {
    let h = linear(tape, x, bound, &format!("{prefix}.fc1"))?;
    let h = tape.gelu(h);
    linear(tape, h, bound, &format!("{prefix}.fc2"))
}

fn layer_norm_named<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
) -> Result<Var, TensorError> {
    let g = bound.get(&format!("{prefix}.gain"));
    let b = bound.get(&format!("{prefix}.bias"));
    tape.layer_norm(x, g, b, el(LN_EPS))
}

/// Pre-norm Transformer block: x + Attn(LN(x)), then x + Mlp(LN(x)).
fn transformer_block<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    heads: usize,
    bound: &BoundParams,
    prefix: &str,
) -> Result<Var, TensorError> {
    let n1 = layer_norm_named(tape, x, bound, &format!("{prefix}.norm1"))?;
    let a = attention(tape, n1, n1, heads, bound, &format!("{prefix}.attn"))?;
    let x = tape.add(x, a)?;
    let n2 = layer_norm_named(tape, x, bound, &format!("{prefix}.norm2"))?;
    let m = mlp(tape, n2, bound, &format!("{prefix}.mlp"))?;
    tape.add(x, m)
}

/// The shared trunk: pre-norm blocks plus a final layer norm. An empty stack
/// is the identity (no final norm), so a depth-0 encoder passes tokens
/// through unchanged.
pub fn encoder_stack<E: Scalar>(
    tape: &mut Tape<E>,
    mut x: Var,
    depth: usize,
    heads: usize,
    bound: &BoundParams,
    prefix: &str,
) -> Result<Var, TensorError> {
    for i in 0..depth {
        x = transformer_block(tape, x, heads, bound, &format!("{prefix}.block{i}"))?;
    }
    if depth > 0 {
        x = layer_norm_named(tape, x, bound, &format!("{prefix}.final_norm"))?;
    }
    Ok(x)
}

// ---- forwards ---------------------------------------------------------------

/// Encoder output plus the bookkeeping decoders need to address it.
pub struct Encoded {
    /// `[V + 1, D_enc]`: global token first, then visible tokens in
    /// (modality, index) order.
    pub seq: Var,
    /// (modality, local index) per visible token, in sequence order.
    pub order: Vec<(Modality, usize)>,
}

impl Encoded {
    /// Sequence positions (offset by the global token) holding a modality's
    /// visible tokens.
    pub fn positions_of(&self, modality: Modality) -> Vec<usize> {
        self.order
            .iter()
            .enumerate()
            .filter(|(_, (m, _))| *m == modality)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

fn check_plan<E: Scalar>(
    batch: &TokenBatch,
    plan: &MaskPlan,
    tape: &Tape<E>,
) -> Result<(), ModelError> {
    let cap = batch.tokens_per_modality();
    if plan.visible.len() != batch.modalities.len() {
        return Err(ModelError::PlanMismatch(format!(
            "plan covers {} modalities, batch has {}",
            plan.visible.len(),
            batch.modalities.len()
        )));
    }
    for (m, indices) in plan.visible.iter().enumerate() {
        if let Some(&bad) = indices.iter().find(|&&i| i >= cap) {
            return Err(ModelError::PlanMismatch(format!(
                "index {bad} exceeds {cap} tokens of modality {}",
                batch.modalities[m].name()
            )));
        }
    }
    let n = tape.value(batch.tokens).shape()[0];
    if n != batch.total_tokens() {
        return Err(ModelError::PlanMismatch(format!(
            "token tensor has {n} rows, metadata says {}",
            batch.total_tokens()
        )));
    }
    Ok(())
}

/// Gather the plan's visible tokens, prepend the global token, and run the
/// encoder. The sequence length is always `V + 1` regardless of the total
/// token count.
pub fn encode_visible<E: Scalar>(
    tape: &mut Tape<E>,
    model: &Model<E>,
    bound: &BoundParams,
    batch: &TokenBatch,
    plan: &MaskPlan,
) -> Result<Encoded, ModelError> {
    check_plan(batch, plan, tape)?;
    let per = batch.tokens_per_modality();
    let mut flat = Vec::new();
    let mut order = Vec::new();
    for (m, indices) in plan.visible.iter().enumerate() {
        for &i in indices {
            flat.push(m * per + i);
            order.push((batch.modalities[m], i));
        }
    }
    let visible = tape.index_select(batch.tokens, 0, &flat)?;
    let global = bound.get("global_token");
    let global_row = tape.reshape(global, &[1, model.config.encoder.dim])?;
    let seq = tape.concat(&[global_row, visible], 0)?;
    assert_eq!(
        tape.value(seq).shape()[0],
        plan.num_visible() + 1,
        "encoder sequence length must be V + 1"
    );
    let seq = encoder_stack(
        tape,
        seq,
        model.config.encoder.depth,
        model.config.encoder.heads,
        bound,
        "encoder",
    )?;
    Ok(Encoded { seq, order })
}

/// Decode one task: project all encoded tokens to the decoder width, build
/// the query grid (mask token everywhere, the task modality's visible tokens
/// scattered in), add positional + modality embeddings to both sides, then
/// cross-attend, MLP, self-attention blocks, and the output projection.
pub fn decode_task<E: Scalar>(
    tape: &mut Tape<E>,
    model: &Model<E>,
    bound: &BoundParams,
    task: Task,
    encoded: &Encoded,
    plan: &MaskPlan,
    grid: usize,
) -> Result<Var, ModelError> {
    if !model.config.tasks.contains(&task) {
        return Err(ModelError::UnknownTask(task.name().to_string()));
    }
    let dd = model.config.decoder.dim;
    let t = task.name();
    let prefix = format!("decoder.{t}");

    // (1) every encoded token enters the decoder dimension
    let projected = linear(tape, encoded.seq, bound, &format!("{prefix}.input_proj"))?;

    // (2) query grid: mask token everywhere, then the task modality's
    // projected visible tokens overwrite their own positions
    let cells = grid * grid;
    let zeros = tape.constant(Tensor::zeros(&[cells, dd]));
    let mask_token = bound.get(&format!("{prefix}.mask_token"));
    let mut queries = tape.add(zeros, mask_token)?;
    let modality = task.modality();
    let modality_index = batch_modality_index(model, modality)?;
    let seq_positions = encoded.positions_of(modality);
    if !seq_positions.is_empty() {
        let local: Vec<usize> = plan.visible[modality_index].clone();
        debug_assert_eq!(local.len(), seq_positions.len());
        let rows = tape.index_select(projected, 0, &seq_positions)?;
        queries = tape.scatter_rows(queries, &local, rows)?;
    }

    // (3) positional + modality embeddings on queries and keys/values;
    // the global token has no spatial position and carries neither
    let pos = tokenize::pos_embed_2d::<E>(dd, grid)?;
    let pos_q = tape.constant(pos.clone());
    queries = tape.add(queries, pos_q)?;
    let mod_embed = bound.get(&format!("{prefix}.modality_embed"));
    let own = tape.index_select(mod_embed, 0, &[modality_index])?;
    let own_row = tape.reshape(own, &[dd])?;
    queries = tape.add(queries, own_row)?;

    let kv = {
        let mut pos_rows = vec![E::zero(); dd]; // global token row
        let mut mod_indices = Vec::with_capacity(encoded.order.len());
        for &(m, i) in &encoded.order {
            pos_rows.extend_from_slice(&pos.data()[i * dd..(i + 1) * dd]);
            mod_indices.push(batch_modality_index(model, m)?);
        }
        let pos_kv = tape.constant(Tensor::new(
            vec![encoded.order.len() + 1, dd],
            pos_rows,
        )?);
        let with_pos = tape.add(projected, pos_kv)?;
        if mod_indices.is_empty() {
            with_pos
        } else {
            let mod_rows = tape.index_select(mod_embed, 0, &mod_indices)?;
            let zero_row = tape.constant(Tensor::zeros(&[1, dd]));
            let mod_full = tape.concat(&[zero_row, mod_rows], 0)?;
            tape.add(with_pos, mod_full)?
        }
    };

    // (4) cross-attention into all encoded tokens, MLP, then self-attention
    let nq = layer_norm_named(tape, queries, bound, &format!("{prefix}.cross.norm_q"))?;
    let nkv = layer_norm_named(tape, kv, bound, &format!("{prefix}.cross.norm_kv"))?;
    let ca = attention(
        tape,
        nq,
        nkv,
        model.config.decoder.heads,
        bound,
        &format!("{prefix}.cross"),
    )?;
    let mut x = tape.add(queries, ca)?;
    let nm = layer_norm_named(tape, x, bound, &format!("{prefix}.cross_mlp.norm"))?;
    let m = mlp(tape, nm, bound, &format!("{prefix}.cross_mlp"))?;
    x = tape.add(x, m)?;
    for i in 0..model.config.decoder.depth {
        x = transformer_block(
            tape,
            x,
            model.config.decoder.heads,
            bound,
            &format!("{prefix}.block{i}"),
        )?;
    }
    x = layer_norm_named(tape, x, bound, &format!("{prefix}.final_norm"))?;

    // (5) patch values
    Ok(linear(tape, x, bound, &format!("{prefix}.out"))?)
}

fn batch_modality_index<E: Scalar>(model: &Model<E>, m: Modality) -> Result<usize, ModelError> {
    model
        .config
        .modalities
        .iter()
        .position(|c| c.modality == m)
        .ok_or_else(|| ModelError::Config(format!("modality {} not configured", m.name())))
}

/// Predictions of every configured task for one sample.
pub struct PretrainOutput {
    pub encoded: Encoded,
    /// `(task, [grid^2, task_out_dim])` in config task order.
    pub predictions: Vec<(Task, Var)>,
}

/// Pre-training forward: encode the visible subset, then decode every task.
pub fn forward_pretrain<E: Scalar>(
    tape: &mut Tape<E>,
    model: &Model<E>,
    bound: &BoundParams,
    batch: &TokenBatch,
    plan: &MaskPlan,
) -> Result<PretrainOutput, ModelError> {
    let grid = batch.grid;
    let encoded = encode_visible(tape, model, bound, batch, plan)?;
    let mut predictions = Vec::with_capacity(model.config.tasks.len());
    for &task in &model.config.tasks {
        let pred = decode_task(tape, model, bound, task, &encoded, plan, grid)?;
        predictions.push((task, pred));
    }
    Ok(PretrainOutput {
        encoded,
        predictions,
    })
}

/// Mask-free forward for transfer: the full concatenated token sequence
/// (all modalities, all positions) plus the global token.
pub fn forward_transfer<E: Scalar>(
    tape: &mut Tape<E>,
    model: &Model<E>,
    bound: &BoundParams,
    batch: &TokenBatch,
) -> Result<Encoded, ModelError> {
    let plan = MaskPlan::all_visible(batch.modalities.len(), batch.tokens_per_modality());
    encode_visible(tape, model, bound, batch, &plan)
}

// ---- single-modal export ------------------------------------------------------

/// Keep one input projection plus the shared trunk; drop the decoders and the
/// other projections. Exporting semseg keeps its class-embedding table.
pub fn export_single_modal_vit<E: Scalar>(
    model: &Model<E>,
    modality: Modality,
) -> Result<ParamMap<E>, ModelError> {
    batch_modality_index(model, modality)?;
    let keep_prefix = format!("input_proj.{}.", modality.name());
    let mut out = ParamMap::new();
    for (name, tensor) in &model.params {
        let keep = name.starts_with(&keep_prefix)
            || name == "global_token"
            || name.starts_with("encoder.")
            || (modality == Modality::Semseg && name.starts_with("class_embed."));
        if keep {
            out.insert(name.clone(), tensor.clone());
        }
    }
    Ok(out)
}

/// Standard single-modal ViT forward over an exported parameter map:
/// tokenize one modality, prepend the global token, run the trunk.
pub fn single_modal_forward<E: Scalar>(
    exported: &ParamMap<E>,
    encoder: &EncoderConfig,
    modality_cfg: &ModalityConfig,
    sample: &Sample,
) -> Result<Tensor<E>, ModelError> {
    let single = ModelConfig {
        modalities: vec![modality_cfg.clone()],
        tasks: vec![match modality_cfg.modality {
            Modality::Rgb => Task::Rgb,
            Modality::Depth => Task::Depth,
            Modality::Semseg => Task::Semseg,
        }],
        encoder: encoder.clone(),
        decoder: DecoderConfig::desk(),
    };
    // a throwaway Model shell: decoders are initialized but never bound into
    // the forward; only the exported trunk tensors are used
    let mut shell = Model::<E>::init(single, 0)?;
    for (name, tensor) in exported {
        shell.params.insert(name.clone(), tensor.clone());
    }
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = exported
        .iter()
        .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
        .collect();
    let bound = BoundParams { vars };
    let proj = ProjectionVars {
        proj: vec![(
            bound.get(&format!("input_proj.{}.weight", modality_cfg.modality.name())),
            bound.get(&format!("input_proj.{}.bias", modality_cfg.modality.name())),
        )],
        class_embed: bound.var("class_embed.table"),
    };
    let batch = tokenize::tokenize_sample(
        &mut tape,
        sample,
        std::slice::from_ref(modality_cfg),
        &proj,
        encoder.dim,
    )?;
    let global = bound.get("global_token");
    let global_row = tape.reshape(global, &[1, encoder.dim])?;
    let seq = tape.concat(&[global_row, batch.tokens], 0)?;
    let out = encoder_stack(&mut tape, seq, encoder.depth, encoder.heads, &bound, "encoder")?;
    Ok(tape.value(out).clone())
}
