//! Rasters to positioned token sequences.
//!
//! Each modality is preprocessed (RGB channel-standardized, depth robustly
//! standardized, segmentation replaced by learned class embeddings),
//! patchified, linearly projected to the encoder dimension and tagged with
//! shared 2D sine-cosine positional embeddings. Modalities always appear in
//! the fixed order rgb, depth, semseg.

use thiserror::Error;

use crate::tensor::{el, Scalar, Tape, Tensor, TensorError, Var};

/// Number of semantic classes in the segmentation vocabulary.
pub const NUM_CLASSES: usize = 133;
/// Dimension of the learned per-class embedding.
pub const CLASS_EMBED_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("invalid modality config: {0}")]
    Config(String),
    #[error("invalid sample data: {0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The three raster modalities, in their fixed sequence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Depth,
    Semseg,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Semseg];

    pub fn index(self) -> usize {
        match self {
            Modality::Rgb => 0,
            Modality::Depth => 1,
            Modality::Semseg => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Semseg => "semseg",
        }
    }

    pub fn parse(s: &str) -> Result<Modality, TokenizeError> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            "semseg" => Ok(Modality::Semseg),
            other => Err(TokenizeError::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Reconstruction loss attached to a task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    MseStandardized,
    L1,
    CrossEntropy,
}

/// Declarative description of one modality's geometry and preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityConfig {
    pub modality: Modality,
    pub channels: usize,
    pub input_resolution: usize,
    pub patch_size: usize,
    /// Integer factor applied before patching (4 for semseg, else 1).
    pub downsample: usize,
    pub loss_kind: LossKind,
    pub num_classes: Option<usize>,
    /// Channel statistics for RGB standardization; `(mean, std)` per channel.
    pub rgb_stats: Option<([f32; 3], [f32; 3])>,
}

impl ModalityConfig {
    pub fn rgb(input_resolution: usize) -> Self {
        ModalityConfig {
            modality: Modality::Rgb,
            channels: 3,
            input_resolution,
            patch_size: 16,
            downsample: 1,
            loss_kind: LossKind::Mse,
            num_classes: None,
            // Desk-scale default; ImageNet statistics would go here instead.
            rgb_stats: Some(([0.5; 3], [0.5; 3])),
        }
    }

    pub fn depth(input_resolution: usize) -> Self {
        ModalityConfig {
            modality: Modality::Depth,
            channels: 1,
            input_resolution,
            patch_size: 16,
            downsample: 1,
            loss_kind: LossKind::L1,
            num_classes: None,
            rgb_stats: None,
        }
    }

    pub fn semseg(input_resolution: usize) -> Self {
        ModalityConfig {
            modality: Modality::Semseg,
            channels: CLASS_EMBED_DIM,
            input_resolution,
            patch_size: 4,
            downsample: 4,
            loss_kind: LossKind::CrossEntropy,
            num_classes: Some(NUM_CLASSES),
            rgb_stats: None,
        }
    }

    /// The three standard modalities at one resolution.
    pub fn standard(input_resolution: usize) -> Vec<ModalityConfig> {
        vec![
            Self::rgb(input_resolution),
            Self::depth(input_resolution),
            Self::semseg(input_resolution),
        ]
    }

    /// Tokens per side.
    pub fn grid(&self) -> usize {
        self.input_resolution / (self.downsample * self.patch_size)
    }

    /// Flattened patch dimension fed to the input projection.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<(), TokenizeError> {
        let step = self.downsample * self.patch_size;
        if step == 0 || self.input_resolution % step != 0 {
            return Err(TokenizeError::Config(format!(
                "{}: downsample {} x patch {} does not divide resolution {}",
                self.modality.name(),
                self.downsample,
                self.patch_size,
                self.input_resolution
            )));
        }
        Ok(())
    }
}

/// All configured modalities must tile to the same token grid.
pub fn validate_configs(configs: &[ModalityConfig]) -> Result<usize, TokenizeError> {
    let mut grid = None;
    for cfg in configs {
        cfg.validate()?;
        let g = cfg.grid();
        match grid {
            None => grid = Some(g),
            Some(prev) if prev != g => {
                return Err(TokenizeError::Config(format!(
                    "modalities disagree on grid: {} vs {}",
                    prev, g
                )))
            }
            _ => {}
        }
    }
    grid.ok_or_else(|| TokenizeError::Config("no modalities configured".into()))
}

/// One aligned multi-modal raster sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// H*W*3 interleaved, values in [0, 1].
    pub rgb: Vec<f32>,
    /// H*W raw depth values.
    pub depth: Vec<f32>,
    /// H*W validity flags for `depth`.
    pub depth_valid: Vec<bool>,
    /// H*W class indices, each < NUM_CLASSES.
    pub semseg: Vec<u8>,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<(), TokenizeError> {
        let n = self.height * self.width;
        if self.rgb.len() != n * 3
            || self.depth.len() != n
            || self.depth_valid.len() != n
            || self.semseg.len() != n
        {
            return Err(TokenizeError::Data(format!(
                "raster sizes disagree with {}x{}",
                self.height, self.width
            )));
        }
        if let Some(&bad) = self.semseg.iter().find(|&&c| c as usize >= num_classes) {
            return Err(TokenizeError::Data(format!(
                "semseg class {bad} out of range (num_classes {num_classes})"
            )));
        }
        Ok(())
    }
}

/// Identity of one token in the concatenated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    pub modality: Modality,
    pub row: usize,
    pub col: usize,
}

/// Projected, positioned tokens of one sample: `[N, D_enc]` with contiguous
/// per-modality blocks in the fixed modality order.
pub struct TokenBatch {
    pub tokens: Var,
    pub meta: Vec<TokenMeta>,
    pub grid: usize,
    pub modalities: Vec<Modality>,
}

impl TokenBatch {
    pub fn tokens_per_modality(&self) -> usize {
        self.grid * self.grid
    }

    pub fn total_tokens(&self) -> usize {
        self.modalities.len() * self.tokens_per_modality()
    }

    /// Offset of a modality's block in the token sequence.
    pub fn block_offset(&self, modality: Modality) -> Option<usize> {
        self.modalities
            .iter()
            .position(|&m| m == modality)
            .map(|i| i * self.tokens_per_modality())
    }
}

/// Per-modality learnable token machinery, resolved to tape vars.
pub struct ProjectionVars {
    /// `(W [patch_dim, D_enc], b [D_enc])` per modality, in config order.
    pub proj: Vec<(Var, Var)>,
    /// Class-embedding table `[NUM_CLASSES, CLASS_EMBED_DIM]`, when semseg is
    /// configured.
    pub class_embed: Option<Var>,
}

// ---- geometry -------------------------------------------------------------

/// Row-major order of source pixels regrouped into `patch x patch` tiles:
/// output element `p * patch^2 + q` is pixel `q` (reading order) of patch `p`.
pub fn patch_pixel_order(height: usize, width: usize, patch: usize) -> Vec<usize> {
    let (gh, gw) = (height / patch, width / patch);
    let mut order = Vec::with_capacity(height * width);
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    order.push((pr * patch + dy) * width + pc * patch + dx);
                }
            }
        }
    }
    order
}

/// Split an `H x W x C` raster into flattened patches: `[grid^2, patch^2 * C]`
/// with patches in row-major order (top-left first) and each patch flattened
/// pixel-major, channel-last.
pub fn patchify<E: Scalar>(
    raster: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Tensor<E>, TokenizeError> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(TokenizeError::Config(format!(
            "patch size {patch} does not divide raster {height}x{width}"
        )));
    }
    if raster.len() != height * width * channels {
        return Err(TokenizeError::Data(format!(
            "raster has {} values, expected {}",
            raster.len(),
            height * width * channels
        )));
    }
    let order = patch_pixel_order(height, width, patch);
    let mut data = Vec::with_capacity(raster.len());
    for &px in &order {
        for ch in 0..channels {
            data.push(el::<E>(raster[px * channels + ch] as f64));
        }
    }
    let n_patches = (height / patch) * (width / patch);
    Ok(Tensor::new(vec![n_patches, patch * patch * channels], data)?)
}

/// Fixed 2D sine-cosine positional embeddings for a square token grid.
///
/// The first half of each embedding encodes the row, the second half the
/// column; each half is `[sin(p w_0).., cos(p w_0)..]` with frequencies
/// `w_k = 10000^(-2k / (dim/2))`.
pub fn pos_embed_2d<E: Scalar>(dim: usize, grid: usize) -> Result<Tensor<E>, TokenizeError> {
    if dim % 4 != 0 || dim == 0 {
        return Err(TokenizeError::Config(format!(
            "positional embedding dim {dim} must be a positive multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|k| 10000f64.powf(-2.0 * k as f64 / (dim / 2) as f64))
        .collect();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            for &pos in &[r as f64, c as f64] {
                for &w in &freqs {
                    data.push(el::<E>((pos * w).sin()));
                }
                for &w in &freqs {
                    data.push(el::<E>((pos * w).cos()));
                }
            }
        }
    }
    Ok(Tensor::new(vec![grid * grid, dim], data)?)
}

// ---- preprocessing ---------------------------------------------------------

/// Map RGB from [0, 1] through fixed channel statistics.
pub fn standardize_rgb(rgb: &[f32], mean: [f32; 3], std: [f32; 3]) -> Vec<f32> {
    rgb.iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % 3]) / std[i % 3])
        .collect()
}

/// Robust depth standardization: statistics over the valid values that remain
/// after trimming the bottom and top 10%, i.e. values in
/// `[sorted[floor(0.1 n)], sorted[ceil(0.9 n) - 1]]` inclusive (ties kept,
/// population std). Invalid pixels come out as exactly 0. A flat map (std
/// below 1e-8) comes out all zeros.
pub fn robust_standardize_depth(
    depth: &[f32],
    valid: &[bool],
    warn: &mut dyn FnMut(&str),
) -> Result<Vec<f32>, TokenizeError> {
    assert_eq!(depth.len(), valid.len());
    let mut values: Vec<f32> = depth
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&d, _)| d)
        .collect();
    if values.len() < 10 {
        return Err(TokenizeError::Data(format!(
            "robust depth standardization needs at least 10 valid pixels, got {}",
            values.len()
        )));
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite depth"));
    let n = values.len();
    let lo = values[n / 10];
    let hi = values[(9 * n).div_ceil(10) - 1];
    let trimmed: Vec<f64> = values
        .iter()
        .filter(|&&v| v >= lo && v <= hi)
        .map(|&v| v as f64)
        .collect();
    let mean = trimmed.iter().sum::<f64>() / trimmed.len() as f64;
    let var = trimmed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / trimmed.len() as f64;
    let std = var.sqrt();
    if std < 1e-8 {
        warn("flat depth map: standardizing to all zeros");
        return Ok(vec![0.0; depth.len()]);
    }
    Ok(depth
        .iter()
        .zip(valid)
        .map(|(&d, &v)| {
            if v {
                ((d as f64 - mean) / std) as f32
            } else {
                0.0
            }
        })
        .collect())
}

/// Nearest-neighbor downsample of a class map by an integer factor.
pub fn downsample_classes(map: &[u8], height: usize, width: usize, factor: usize) -> Vec<u8> {
    let (oh, ow) = (height / factor, width / factor);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            out.push(map[r * factor * width + c * factor]);
        }
    }
    out
}

/// Replace each (downsampled) class index by its learned embedding row:
/// `[oh * ow, CLASS_EMBED_DIM]` on the tape.
pub fn embed_semseg<E: Scalar>(
    tape: &mut Tape<E>,
    class_map: &[u8],
    height: usize,
    width: usize,
    factor: usize,
    table: Var,
    num_classes: usize,
) -> Result<Var, TokenizeError> {
    if let Some(&bad) = class_map.iter().find(|&&c| c as usize >= num_classes) {
        return Err(TokenizeError::Data(format!(
            "semseg class {bad} out of range (num_classes {num_classes})"
        )));
    }
    let small = downsample_classes(class_map, height, width, factor);
    let indices: Vec<usize> = small.iter().map(|&c| c as usize).collect();
    Ok(tape.index_select(table, 0, &indices)?)
}

/// Project flattened patches into encoder tokens and add the positional
/// embeddings: `tokens = patches . W + b + pos`.
pub fn project_modality<E: Scalar>(
    tape: &mut Tape<E>,
    patches: Var,
    proj_w: Var,
    proj_b: Var,
    pos_embed: &Tensor<E>,
) -> Result<Var, TokenizeError> {
    let projected = tape.matmul(patches, proj_w)?;
    let biased = tape.add(projected, proj_b)?;
    let pos = tape.constant(pos_embed.clone());
    Ok(tape.add(biased, pos)?)
}

/// Tokenize every configured modality of a sample into one `[N, D]` sequence
/// with per-token metadata.
pub fn tokenize_sample<E: Scalar>(
    tape: &mut Tape<E>,
    sample: &Sample,
    configs: &[ModalityConfig],
    vars: &ProjectionVars,
    dim: usize,
) -> Result<TokenBatch, TokenizeError> {
    let grid = validate_configs(configs)?;
    sample.validate(NUM_CLASSES)?;
    if sample.height != sample.width {
        return Err(TokenizeError::Data(format!(
            "tokenizer expects square rasters, got {}x{}",
            sample.height, sample.width
        )));
    }
    if configs
        .iter()
        .any(|c| c.input_resolution != sample.height)
    {
        return Err(TokenizeError::Data(format!(
            "sample resolution {} does not match configs",
            sample.height
        )));
    }
    let pos = pos_embed_2d::<E>(dim, grid)?;
    let mut blocks = Vec::new();
    let mut meta = Vec::new();
    let mut modalities = Vec::new();
    for (cfg, &(w, b)) in configs.iter().zip(&vars.proj) {
        let patches = match cfg.modality {
            Modality::Rgb => {
                let (mean, std) = cfg.rgb_stats.unwrap_or(([0.0; 3], [1.0; 3]));
                let standardized = standardize_rgb(&sample.rgb, mean, std);
                let t = patchify::<E>(
                    &standardized,
                    sample.height,
                    sample.width,
                    3,
                    cfg.patch_size,
                )?;
                tape.constant(t)
            }
            Modality::Depth => {
                let standardized = robust_standardize_depth(
                    &sample.depth,
                    &sample.depth_valid,
                    &mut |msg| eprintln!("warning: {msg}"),
                )?;
                let t = patchify::<E>(
                    &standardized,
                    sample.height,
                    sample.width,
                    1,
                    cfg.patch_size,
                )?;
                tape.constant(t)
            }
            Modality::Semseg => {
                let table = vars.class_embed.ok_or_else(|| {
                    TokenizeError::Config("semseg configured without class-embedding table".into())
                })?;
                let embedded = embed_semseg(
                    tape,
                    &sample.semseg,
                    sample.height,
                    sample.width,
                    cfg.downsample,
                    table,
                    cfg.num_classes.unwrap_or(NUM_CLASSES),
                )?;
                let small = sample.height / cfg.downsample;
                let order = patch_pixel_order(small, small, cfg.patch_size);
                let gathered = tape.index_select(embedded, 0, &order)?;
                tape.reshape(gathered, &[grid * grid, cfg.patch_dim()])?
            }
        };
        let tokens = project_modality(tape, patches, w, b, &pos)?;
        blocks.push(tokens);
        modalities.push(cfg.modality);
        for r in 0..grid {
            for c in 0..grid {
                meta.push(TokenMeta {
                    modality: cfg.modality,
                    row: r,
                    col: c,
                });
            }
        }
    }
    let tokens = tape.concat(&blocks, 0)?;
    Ok(TokenBatch {
        tokens,
        meta,
        grid,
        modalities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_warn() -> impl FnMut(&str) {
        |msg: &str| panic!("unexpected warning: {msg}")
    }

    #[test]
    fn patchify_paper_geometry() {
        let raster = vec![0.0f32; 224 * 224 * 3];
        let t = patchify::<f32>(&raster, 224, 224, 3, 16).unwrap();
        assert_eq!(t.shape(), &[196, 768]);
    }

    #[test]
    fn patchify_single_patch_reading_order() {
        let raster: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let t = patchify::<f32>(&raster, 4, 4, 1, 4).unwrap();
        assert_eq!(t.shape(), &[1, 16]);
        let expect: Vec<f32> = (0..16).map(|v| v as f32).collect();
        assert_eq!(t.data(), &expect[..]);
    }

    #[test]
    fn patchify_counting_raster_block_layout() {
        // 8x8 counting raster, patch 4: patch 0 covers rows 0-3 x cols 0-3
        let raster: Vec<f32> = (0..64).map(|v| v as f32).collect();
        let t = patchify::<f32>(&raster, 8, 8, 1, 4).unwrap();
        assert_eq!(t.shape(), &[4, 16]);
        let patch0: Vec<f32> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r * 8 + c) as f32))
            .collect();
        assert_eq!(&t.data()[..16], &patch0[..]);
        // patch 1 is rows 0-3 x cols 4-7
        assert_eq!(t.data()[16], 4.0);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let raster = vec![0.0f32; 10 * 10];
        assert!(matches!(
            patchify::<f32>(&raster, 10, 10, 1, 4),
            Err(TokenizeError::Config(_))
        ));
    }

    #[test]
    fn pos_embed_origin_is_sin0_cos1() {
        let pe = pos_embed_2d::<f64>(16, 3).unwrap();
        let origin = &pe.data()[..16];
        // layout per half: 4 sines then 4 cosines
        for half in origin.chunks(8) {
            for &s in &half[..4] {
                assert_eq!(s, 0.0);
            }
            for &c in &half[4..] {
                assert_eq!(c, 1.0);
            }
        }
    }

    #[test]
    fn pos_embed_row_half_shared_across_columns() {
        let grid = 4;
        let dim = 16;
        let pe = pos_embed_2d::<f64>(dim, grid).unwrap();
        let at = |r: usize, c: usize| &pe.data()[(r * grid + c) * dim..(r * grid + c + 1) * dim];
        assert_eq!(at(2, 0)[..8], at(2, 3)[..8]);
        assert_ne!(at(2, 0)[8..], at(2, 3)[8..]);
    }

    #[test]
    fn pos_embed_dot_product_decays_with_row_distance() {
        let grid = 8;
        let dim = 32;
        let pe = pos_embed_2d::<f64>(dim, grid).unwrap();
        let at = |r: usize, c: usize| &pe.data()[(r * grid + c) * dim..(r * grid + c + 1) * dim];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let base = at(0, 3);
        let d1 = dot(base, at(1, 3));
        let d4 = dot(base, at(4, 3));
        assert!(d1 > d4, "dot at distance 1 ({d1}) should exceed distance 4 ({d4})");
    }

    #[test]
    fn pos_embed_rejects_bad_dim() {
        assert!(matches!(
            pos_embed_2d::<f64>(6, 2),
            Err(TokenizeError::Config(_))
        ));
    }

    #[test]
    fn robust_depth_hand_oracle() {
        // values 1..10, all valid: trimmed set {2..9}, mean 5.5,
        // population std sqrt(5.25)
        let depth: Vec<f32> = (1..=10).map(|v| v as f32).collect();
        let valid = vec![true; 10];
        let out = robust_standardize_depth(&depth, &valid, &mut no_warn()).unwrap();
        let sigma = 5.25f64.sqrt();
        for (i, &o) in out.iter().enumerate() {
            let expect = ((i + 1) as f64 - 5.5) / sigma;
            assert!((o as f64 - expect).abs() < 1e-6, "pixel {i}: {o} vs {expect}");
        }
        // pixel with value 5.5 maps to 0
        let mut depth2 = depth.clone();
        depth2[0] = 5.5;
        let out2 = robust_standardize_depth(&depth2, &valid, &mut no_warn()).unwrap();
        assert!(out2[0].abs() < 0.3, "5.5 is near the trimmed mean");
    }

    #[test]
    fn robust_depth_flat_map_is_all_zeros() {
        let depth = vec![3.0f32; 16];
        let valid = vec![true; 16];
        let mut warned = false;
        let out = robust_standardize_depth(&depth, &valid, &mut |_| warned = true).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(warned);
    }

    #[test]
    fn robust_depth_invalid_pixels_are_exactly_zero() {
        let mut depth: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        depth[3] = 1e9; // garbage behind an invalid flag
        let mut valid = vec![true; 16];
        valid[3] = false;
        let out = robust_standardize_depth(&depth, &valid, &mut no_warn()).unwrap();
        assert_eq!(out[3], 0.0);
    }

    #[test]
    fn robust_depth_affine_invariant() {
        let mut rng = crate::rng::Rng::from_seed(40);
        let depth: Vec<f32> = (0..64).map(|_| rng.range_f64(0.5, 4.0) as f32).collect();
        let valid: Vec<bool> = (0..64).map(|_| rng.bool_with(0.8)).collect();
        let scaled: Vec<f32> = depth.iter().map(|&d| 3.0 * d + 11.0).collect();
        let a = robust_standardize_depth(&depth, &valid, &mut no_warn()).unwrap();
        let b = robust_standardize_depth(&scaled, &valid, &mut no_warn()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn robust_depth_needs_ten_valid() {
        let depth = vec![1.0f32; 12];
        let mut valid = vec![false; 12];
        valid[..9].fill(true);
        assert!(matches!(
            robust_standardize_depth(&depth, &valid, &mut |_| {}),
            Err(TokenizeError::Data(_))
        ));
    }

    #[test]
    fn downsample_classes_is_nearest_neighbor() {
        let map: Vec<u8> = (0..64).map(|v| (v % 7) as u8).collect();
        let small = downsample_classes(&map, 8, 8, 4);
        assert_eq!(small.len(), 4);
        assert_eq!(small[0], map[0]);
        assert_eq!(small[1], map[4]);
        assert_eq!(small[2], map[32]);
        assert_eq!(small[3], map[36]);
    }

    fn class_table(tape: &mut Tape<f64>) -> Var {
        let mut rng = crate::rng::Rng::from_seed(50);
        let data: Vec<f64> = (0..NUM_CLASSES * CLASS_EMBED_DIM)
            .map(|_| rng.normal())
            .collect();
        let t = Tensor::from_f64(&[NUM_CLASSES, CLASS_EMBED_DIM], &data).unwrap();
        tape.leaf(t, true)
    }

    #[test]
    fn embed_semseg_constant_map_repeats_class_row() {
        let mut tape = Tape::<f64>::new();
        let table = class_table(&mut tape);
        let map = vec![7u8; 16 * 16];
        let out = embed_semseg(&mut tape, &map, 16, 16, 4, table, NUM_CLASSES).unwrap();
        assert_eq!(tape.value(out).shape(), &[16, CLASS_EMBED_DIM]);
        let row7 = tape.value(table).data()[7 * CLASS_EMBED_DIM..8 * CLASS_EMBED_DIM].to_vec();
        for px in tape.value(out).data().chunks(CLASS_EMBED_DIM) {
            assert_eq!(px, &row7[..]);
        }
    }

    #[test]
    fn embed_semseg_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = class_table(&mut tape);
        let map = vec![200u8; 16];
        assert!(matches!(
            embed_semseg(&mut tape, &map, 4, 4, 1, table, NUM_CLASSES),
            Err(TokenizeError::Data(_))
        ));
    }

    #[test]
    fn semseg_paper_geometry_gives_196_tokens_of_dim_1024() {
        // 224x224 map -> 56x56x64 raster -> 196 tokens of dim 1024
        let cfg = ModalityConfig::semseg(224);
        assert_eq!(cfg.grid(), 14);
        assert_eq!(cfg.patch_dim(), 4 * 4 * 64);
        let mut tape = Tape::<f64>::new();
        let table = class_table(&mut tape);
        let map = vec![1u8; 224 * 224];
        let embedded = embed_semseg(&mut tape, &map, 224, 224, 4, table, NUM_CLASSES).unwrap();
        assert_eq!(tape.value(embedded).shape(), &[56 * 56, 64]);
    }

    #[test]
    fn semseg_local_edit_touches_one_token() {
        // maps differing inside one 4x4 downsampled cell differ in one token
        let res = 32;
        let cfg = ModalityConfig::semseg(res);
        let grid = cfg.grid();
        let base = vec![0u8; res * res];
        let mut edited = base.clone();
        // edit one full downsample cell so nearest-neighbor picks it up
        edited[0] = 5;

        let tokens = |map: &[u8]| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let table = class_table(&mut tape);
            let embedded =
                embed_semseg(&mut tape, map, res, res, 4, table, NUM_CLASSES).unwrap();
            let small = res / 4;
            let order = patch_pixel_order(small, small, cfg.patch_size);
            let gathered = tape.index_select(embedded, 0, &order).unwrap();
            let reshaped = tape
                .reshape(gathered, &[grid * grid, cfg.patch_dim()])
                .unwrap();
            tape.value(reshaped).to_f64_vec()
        };
        let a = tokens(&base);
        let b = tokens(&edited);
        let dim = cfg.patch_dim();
        let differing: Vec<usize> = (0..grid * grid)
            .filter(|&t| a[t * dim..(t + 1) * dim] != b[t * dim..(t + 1) * dim])
            .collect();
        assert_eq!(differing, vec![0]);
    }

    fn tiny_sample(res: usize) -> Sample {
        let mut rng = crate::rng::Rng::from_seed(60);
        Sample {
            height: res,
            width: res,
            rgb: (0..res * res * 3).map(|_| rng.next_f64() as f32).collect(),
            depth: (0..res * res)
                .map(|_| rng.range_f64(1.0, 5.0) as f32)
                .collect(),
            depth_valid: vec![true; res * res],
            semseg: (0..res * res).map(|_| (rng.below(133)) as u8).collect(),
        }
    }

    fn proj_vars(tape: &mut Tape<f64>, configs: &[ModalityConfig], dim: usize) -> ProjectionVars {
        let mut rng = crate::rng::Rng::from_seed(61);
        let proj = configs
            .iter()
            .map(|cfg| {
                let wd: Vec<f64> = (0..cfg.patch_dim() * dim).map(|_| 0.1 * rng.normal()).collect();
                let w = tape.leaf(Tensor::from_f64(&[cfg.patch_dim(), dim], &wd).unwrap(), true);
                let b = tape.leaf(Tensor::zeros(&[dim]), true);
                (w, b)
            })
            .collect();
        let class_embed = Some(class_table(tape));
        ProjectionVars { proj, class_embed }
    }

    #[test]
    fn tokenize_counts_paper_and_desk() {
        // 3 modalities at 224 -> 588 tokens; desk 64px -> 48 tokens
        for (res, expect) in [(224, 588), (64, 48)] {
            let configs = ModalityConfig::standard(res);
            let grid = validate_configs(&configs).unwrap();
            assert_eq!(3 * grid * grid, expect);
        }
        // single modality at 224 -> 196
        let single = vec![ModalityConfig::rgb(224)];
        let grid = validate_configs(&single).unwrap();
        assert_eq!(grid * grid, 196);
    }

    #[test]
    fn tokenize_sample_layout_and_metadata() {
        let res = 32;
        let dim = 16;
        let configs = ModalityConfig::standard(res);
        let sample = tiny_sample(res);
        let mut tape = Tape::<f64>::new();
        let vars = proj_vars(&mut tape, &configs, dim);
        let batch = tokenize_sample(&mut tape, &sample, &configs, &vars, dim).unwrap();
        let grid = batch.grid;
        assert_eq!(grid, 2);
        assert_eq!(batch.total_tokens(), 12);
        assert_eq!(tape.value(batch.tokens).shape(), &[12, dim]);
        assert_eq!(batch.meta.len(), 12);
        // metadata covers every (modality, row, col) exactly once, in order
        let mut seen = std::collections::BTreeSet::new();
        for (i, m) in batch.meta.iter().enumerate() {
            assert_eq!(m.modality, Modality::ALL[i / (grid * grid)]);
            assert!(seen.insert((m.modality.index(), m.row, m.col)));
        }
        assert_eq!(batch.block_offset(Modality::Depth), Some(4));
    }

    #[test]
    fn tokenize_is_deterministic() {
        let res = 32;
        let dim = 16;
        let configs = ModalityConfig::standard(res);
        let sample = tiny_sample(res);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let vars = proj_vars(&mut tape, &configs, dim);
            let batch = tokenize_sample(&mut tape, &sample, &configs, &vars, dim).unwrap();
            tape.value(batch.tokens).to_f64_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn distinct_projections_give_distinct_tokens() {
        // two modalities fed identical patches but different projections
        let res = 32;
        let dim = 16;
        let configs = vec![ModalityConfig::rgb(res), ModalityConfig::depth(res)];
        let mut sample = tiny_sample(res);
        // make depth content match the first rgb channel so patches align
        sample.rgb = sample
            .rgb
            .chunks(3)
            .flat_map(|px| [px[0], px[0], px[0]])
            .collect();
        let mut tape = Tape::<f64>::new();
        let vars = proj_vars(&mut tape, &configs, dim);
        let batch = tokenize_sample(&mut tape, &sample, &configs, &vars, dim).unwrap();
        let values = tape.value(batch.tokens).to_f64_vec();
        let per = batch.tokens_per_modality() * dim;
        assert_ne!(values[..per], values[per..2 * per]);
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        use crate::gradcheck::{central_diff, max_rel_err};
        let patch_dim = 4;
        let dim = 8;
        let patches_data: Vec<f64> = (0..2 * patch_dim).map(|v| 0.3 * v as f64 - 1.0).collect();
        let w0: Vec<f64> = (0..patch_dim * dim).map(|v| 0.01 * v as f64).collect();
        let pos = pos_embed_2d::<f64>(dim, 1).unwrap();

        let forward = |wdata: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let patches = tape.constant(Tensor::from_f64(&[2, patch_dim], &patches_data).unwrap());
            let w = tape.leaf(Tensor::from_f64(&[patch_dim, dim], wdata).unwrap(), true);
            let b = tape.leaf(Tensor::zeros(&[dim]), true);
            let pos2 = Tensor::new(vec![2, dim], [pos.data(), pos.data()].concat()).unwrap();
            let tokens = project_modality(&mut tape, patches, w, b, &pos2).unwrap();
            let sq = tape.mul(tokens, tokens).unwrap();
            let loss = tape.sum(sq);
            tape.value(loss).item()
        };

        let mut tape = Tape::<f64>::new();
        let patches = tape.constant(Tensor::from_f64(&[2, patch_dim], &patches_data).unwrap());
        let w = tape.leaf(Tensor::from_f64(&[patch_dim, dim], &w0).unwrap(), true);
        let b = tape.leaf(Tensor::zeros(&[dim]), true);
        let pos2 = Tensor::new(vec![2, dim], [pos.data(), pos.data()].concat()).unwrap();
        let tokens = project_modality(&mut tape, patches, w, b, &pos2).unwrap();
        let sq = tape.mul(tokens, tokens).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(w).unwrap().to_f64_vec();
        let numeric = central_diff(forward, &w0, 1e-4);
        assert!(max_rel_err(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn zero_weights_give_bias_plus_pos_embed() {
        let dim = 8;
        let mut tape = Tape::<f64>::new();
        let patches = tape.constant(Tensor::zeros(&[4, 5]));
        let w = tape.constant(Tensor::zeros(&[5, dim]));
        let bias_vals: Vec<f64> = (0..dim).map(|v| v as f64).collect();
        let b = tape.constant(Tensor::from_f64(&[dim], &bias_vals).unwrap());
        let pos = pos_embed_2d::<f64>(dim, 2).unwrap();
        let tokens = project_modality(&mut tape, patches, w, b, &pos).unwrap();
        let out = tape.value(tokens).to_f64_vec();
        for (t, token) in out.chunks(dim).enumerate() {
            for (j, &v) in token.iter().enumerate() {
                let expect = bias_vals[j] + pos.data()[t * dim + j];
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }
}
