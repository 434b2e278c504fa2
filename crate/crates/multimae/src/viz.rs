//! Reconstruction rendering: per modality, a masked-input view (non-visible
//! patches gray), the prediction with visible input patches overlaid, and the
//! ground truth, all written as PPM files.
//!
//! Colormaps: depth renders as linear gray over the min/max of the ground
//! truth's standardized valid values (predictions share the same scale);
//! semantic classes use the fixed palette from [`crate::data::class_palette`].
//! Overlay rule: pixels of visible patches in the prediction image are copied
//! from the ground-truth image byte for byte.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{class_palette, quantize_rgb, write_ppm, DataError};
use crate::loss::masked_positions;
use crate::mask::MaskPlan;
use crate::model::{forward_pretrain, Model, ModelError, Task};
use crate::tensor::{Tape, Tensor};
use crate::tokenize::{
    downsample_classes, robust_standardize_depth, Modality, Sample, TokenizeError,
};

#[derive(Debug, Error)]
pub enum VizError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("render error: {0}")]
    Render(String),
}

const MASK_GRAY: [u8; 3] = [128, 128, 128];

/// Raw per-task predictions for one sample under one plan.
pub struct Reconstruction {
    pub grid: usize,
    /// `(task, [grid^2 * out_dim])` prediction values.
    pub predictions: Vec<(Task, Vec<f32>)>,
}

/// Run the pre-training forward (no gradients) and collect predictions.
pub fn reconstruct(
    model: &Model<f32>,
    sample: &Sample,
    plan: &MaskPlan,
) -> Result<Reconstruction, VizError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let batch = model.tokenize(&mut tape, sample, &bound)?;
    let output = forward_pretrain(&mut tape, model, &bound, &batch, plan)?;
    let predictions = output
        .predictions
        .iter()
        .map(|&(task, var)| (task, tape.value(var).data().to_vec()))
        .collect();
    Ok(Reconstruction {
        grid: batch.grid,
        predictions,
    })
}

fn prediction_of(recon: &Reconstruction, task: Task) -> Result<&[f32], VizError> {
    recon
        .predictions
        .iter()
        .find(|(t, _)| *t == task)
        .map(|(_, v)| v.as_slice())
        .ok_or_else(|| VizError::Render(format!("no prediction for task {}", task.name())))
}

/// Reassemble a raster from flattened patches (inverse of patchification).
fn unpatchify(patches: &[f32], grid: usize, patch: usize, channels: usize) -> Vec<f32> {
    let side = grid * patch;
    let mut out = vec![0.0f32; side * side * channels];
    let per_patch = patch * patch * channels;
    for pr in 0..grid {
        for pc in 0..grid {
            let src = &patches[(pr * grid + pc) * per_patch..][..per_patch];
            for dy in 0..patch {
                for dx in 0..patch {
                    let px = (pr * patch + dy) * side + pc * patch + dx;
                    for ch in 0..channels {
                        out[px * channels + ch] = src[(dy * patch + dx) * channels + ch];
                    }
                }
            }
        }
    }
    out
}

fn gray_image(values: &[f32], valid: Option<&[bool]>, lo: f32, hi: f32) -> Vec<u8> {
    let span = (hi - lo).max(1e-12);
    values
        .iter()
        .enumerate()
        .flat_map(|(i, &v)| {
            if valid.map(|m| !m[i]).unwrap_or(false) {
                [0, 0, 0]
            } else {
                let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g]
            }
        })
        .collect()
}

fn palette_image(classes: &[u8]) -> Vec<u8> {
    let palette = class_palette();
    classes
        .iter()
        .flat_map(|&c| palette[c as usize])
        .collect()
}

/// Paint the cells of `positions` gray; cells are `cell` pixels square on a
/// `grid`-cell side.
fn gray_out(image: &mut [u8], side: usize, grid: usize, positions: &[usize]) {
    let cell = side / grid;
    for &p in positions {
        let (pr, pc) = (p / grid, p % grid);
        for dy in 0..cell {
            for dx in 0..cell {
                let px = (pr * cell + dy) * side + pc * cell + dx;
                image[px * 3..px * 3 + 3].copy_from_slice(&MASK_GRAY);
            }
        }
    }
}

/// Copy the pixels of `positions` cells from `src` into `dst`.
fn overlay_cells(dst: &mut [u8], src: &[u8], side: usize, grid: usize, positions: &[usize]) {
    let cell = side / grid;
    for &p in positions {
        let (pr, pc) = (p / grid, p % grid);
        for dy in 0..cell {
            for dx in 0..cell {
                let px = (pr * cell + dy) * side + pc * cell + dx;
                dst[px * 3..px * 3 + 3].copy_from_slice(&src[px * 3..px * 3 + 3]);
            }
        }
    }
}

/// Argmax classes of a semseg prediction, upsampled to full resolution.
pub fn semseg_prediction_classes(
    pred: &[f32],
    grid: usize,
    patch: usize,
    num_classes: usize,
    upsample: usize,
) -> Vec<u8> {
    let small_side = grid * patch;
    let mut small = vec![0u8; small_side * small_side];
    let per_patch = patch * patch * num_classes;
    for pr in 0..grid {
        for pc in 0..grid {
            let src = &pred[(pr * grid + pc) * per_patch..][..per_patch];
            for dy in 0..patch {
                for dx in 0..patch {
                    let logits = &src[(dy * patch + dx) * num_classes..][..num_classes];
                    let mut best = 0;
                    for (c, &v) in logits.iter().enumerate() {
                        if v > logits[best] {
                            best = c;
                        }
                    }
                    small[(pr * patch + dy) * small_side + pc * patch + dx] = best as u8;
                }
            }
        }
    }
    let side = small_side * upsample;
    let mut full = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            full[y * side + x] = small[(y / upsample) * small_side + x / upsample];
        }
    }
    full
}

/// The nine triptych images for one reconstruction, as (filename, pixels).
pub struct TriptychSet {
    pub side: usize,
    pub images: Vec<(String, Vec<u8>)>,
}

/// Render masked / prediction / ground-truth images for all three modalities.
pub fn render_triptychs(
    model: &Model<f32>,
    sample: &Sample,
    plan: &MaskPlan,
) -> Result<TriptychSet, VizError> {
    let recon = reconstruct(model, sample, plan)?;
    let grid = recon.grid;
    let side = sample.height;
    let mut images: Vec<(String, Vec<u8>)> = Vec::new();

    for (mi, cfg) in model.config.modalities.iter().enumerate() {
        let masked = masked_positions(plan, mi, grid * grid);
        let visible = &plan.visible[mi];
        let (gt, pred_img): (Vec<u8>, Vec<u8>) = match cfg.modality {
            Modality::Rgb => {
                let gt = quantize_rgb(&sample.rgb);
                let pred = prediction_of(&recon, Task::Rgb)?;
                // predictions live in channel-standardized space
                let (mean, std) = cfg.rgb_stats.unwrap_or(([0.0; 3], [1.0; 3]));
                let raster = unpatchify(pred, grid, cfg.patch_size, 3);
                let unstd: Vec<f32> = raster
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * std[i % 3] + mean[i % 3])
                    .collect();
                (gt, quantize_rgb(&unstd))
            }
            Modality::Depth => {
                let standardized =
                    robust_standardize_depth(&sample.depth, &sample.depth_valid, &mut |_| {})?;
                let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
                for (&d, &v) in standardized.iter().zip(&sample.depth_valid) {
                    if v {
                        lo = lo.min(d);
                        hi = hi.max(d);
                    }
                }
                let gt = gray_image(&standardized, Some(&sample.depth_valid), lo, hi);
                let pred = prediction_of(&recon, Task::Depth)?;
                let raster = unpatchify(pred, grid, cfg.patch_size, 1);
                (gt, gray_image(&raster, None, lo, hi))
            }
            Modality::Semseg => {
                let gt = palette_image(&sample.semseg);
                let pred = prediction_of(&recon, Task::Semseg)?;
                let classes = semseg_prediction_classes(
                    pred,
                    grid,
                    cfg.patch_size,
                    cfg.num_classes.unwrap_or(133),
                    cfg.downsample,
                );
                (gt, palette_image(&classes))
            }
        };
        let mut masked_img = gt.clone();
        gray_out(&mut masked_img, side, grid, &masked);
        let mut pred_overlaid = pred_img;
        overlay_cells(&mut pred_overlaid, &gt, side, grid, visible);

        let name = cfg.modality.name();
        images.push((format!("{name}_masked.ppm"), masked_img));
        images.push((format!("{name}_pred.ppm"), pred_overlaid));
        images.push((format!("{name}_gt.ppm"), gt));
    }
    Ok(TriptychSet { side, images })
}

/// Render and write the triptychs; returns the written paths.
pub fn write_triptychs(
    model: &Model<f32>,
    sample: &Sample,
    plan: &MaskPlan,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, VizError> {
    let set = render_triptychs(model, sample, plan)?;
    let mut paths = Vec::new();
    for (name, pixels) in &set.images {
        let path = out_dir.join(name);
        write_ppm(&path, set.side, set.side, pixels)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Pixel accuracy of the predicted semantic classes against the ground truth,
/// restricted to masked patches. Drives the overfit and cross-modal checks.
pub fn masked_semseg_accuracy(
    model: &Model<f32>,
    sample: &Sample,
    plan: &MaskPlan,
) -> Result<f64, VizError> {
    let recon = reconstruct(model, sample, plan)?;
    let cfg = model
        .config
        .modality_config(Modality::Semseg)
        .ok_or_else(|| VizError::Render("semseg not configured".into()))?;
    let grid = recon.grid;
    let mi = model
        .config
        .modalities
        .iter()
        .position(|c| c.modality == Modality::Semseg)
        .unwrap();
    let pred = prediction_of(&recon, Task::Semseg)?;
    let classes = semseg_prediction_classes(
        pred,
        grid,
        cfg.patch_size,
        cfg.num_classes.unwrap_or(133),
        1,
    );
    let small = downsample_classes(&sample.semseg, sample.height, sample.width, cfg.downsample);
    let small_side = sample.height / cfg.downsample;
    let cell = small_side / grid;

    let masked = masked_positions(plan, mi, grid * grid);
    let mut hits = 0usize;
    let mut total = 0usize;
    for &p in &masked {
        let (pr, pc) = (p / grid, p % grid);
        for dy in 0..cell {
            for dx in 0..cell {
                let px = (pr * cell + dy) * small_side + pc * cell + dx;
                total += 1;
                if classes[px] == small[px] {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(VizError::Render("no masked semseg patches".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Majority-class accuracy over the same masked pixels: the baseline the
/// cross-modal check must beat.
pub fn masked_majority_baseline(
    sample: &Sample,
    plan: &MaskPlan,
    model: &Model<f32>,
) -> Result<f64, VizError> {
    let cfg = model
        .config
        .modality_config(Modality::Semseg)
        .ok_or_else(|| VizError::Render("semseg not configured".into()))?;
    let grid = model.config.grid().map_err(VizError::Model)?;
    let mi = model
        .config
        .modalities
        .iter()
        .position(|c| c.modality == Modality::Semseg)
        .unwrap();
    let small = downsample_classes(&sample.semseg, sample.height, sample.width, cfg.downsample);
    let small_side = sample.height / cfg.downsample;
    let cell = small_side / grid;
    let masked = masked_positions(plan, mi, grid * grid);
    let mut counts = vec![0usize; cfg.num_classes.unwrap_or(133)];
    let mut total = 0usize;
    for &p in &masked {
        let (pr, pc) = (p / grid, p % grid);
        for dy in 0..cell {
            for dx in 0..cell {
                let px = (pr * cell + dy) * small_side + pc * cell + dx;
                counts[small[px] as usize] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(VizError::Render("no masked semseg patches".into()));
    }
    Ok(*counts.iter().max().unwrap() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scene_with;
    use crate::mask::{build_mask_plan, Alpha, DirichletParams};
    use crate::model::{DecoderConfig, EncoderConfig, ModelConfig};

    fn tiny_model() -> Model<f32> {
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
        Model::init(config, 5).unwrap()
    }

    fn a_plan(model: &Model<f32>, seed: u64) -> MaskPlan {
        let grid = model.config.grid().unwrap();
        let params = DirichletParams::new(Alpha::Concentration(1.0), 3, 5).unwrap();
        build_mask_plan(&params, &[grid * grid; 3], seed).unwrap()
    }

    #[test]
    fn unpatchify_inverts_patch_order() {
        let raster: Vec<f32> = (0..64).map(|v| v as f32).collect();
        let patches = crate::tokenize::patchify::<f32>(&raster, 8, 8, 1, 4).unwrap();
        let back = unpatchify(patches.data(), 2, 4, 1);
        assert_eq!(back, raster);
    }

    #[test]
    fn triptychs_have_nine_images_and_obey_the_overlay_rule() {
        let model = tiny_model();
        let sample = generate_scene_with(1, 32, 3, 0.0);
        let plan = a_plan(&model, 2);
        let set = render_triptychs(&model, &sample, &plan).unwrap();
        assert_eq!(set.images.len(), 9);

        let image = |name: &str| {
            set.images
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, px)| px.clone())
                .unwrap()
        };
        let grid = model.config.grid().unwrap();
        let cell = 32 / grid;
        for (mi, modality) in ["rgb", "depth", "semseg"].iter().enumerate() {
            let gt = image(&format!("{modality}_gt.ppm"));
            let pred = image(&format!("{modality}_pred.ppm"));
            let masked_img = image(&format!("{modality}_masked.ppm"));
            // visible patches: prediction pixels equal ground truth exactly
            for &p in &plan.visible[mi] {
                let (pr, pc) = (p / grid, p % grid);
                for dy in 0..cell {
                    for dx in 0..cell {
                        let px = (pr * cell + dy) * 32 + pc * cell + dx;
                        assert_eq!(
                            &pred[px * 3..px * 3 + 3],
                            &gt[px * 3..px * 3 + 3],
                            "{modality} visible pixel {px}"
                        );
                    }
                }
            }
            // masked view: non-visible patches are gray
            for p in masked_positions(&plan, mi, grid * grid) {
                let (pr, pc) = (p / grid, p % grid);
                let px = (pr * cell) * 32 + pc * cell;
                assert_eq!(&masked_img[px * 3..px * 3 + 3], &MASK_GRAY);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_writes_files() {
        let model = tiny_model();
        let sample = generate_scene_with(3, 32, 3, 0.0);
        let plan = a_plan(&model, 4);
        let a = render_triptychs(&model, &sample, &plan).unwrap();
        let b = render_triptychs(&model, &sample, &plan).unwrap();
        for ((na, pa), (nb, pb)) in a.images.iter().zip(&b.images) {
            assert_eq!(na, nb);
            assert_eq!(pa, pb);
        }
        let dir = tempfile::tempdir().unwrap();
        let paths = write_triptychs(&model, &sample, &plan, dir.path()).unwrap();
        assert_eq!(paths.len(), 9);
        for p in paths {
            assert!(p.exists());
        }
    }

    #[test]
    fn semseg_argmax_and_accuracy_bounds() {
        let model = tiny_model();
        let sample = generate_scene_with(5, 32, 3, 0.0);
        let plan = a_plan(&model, 6);
        let acc = masked_semseg_accuracy(&model, &sample, &plan).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let base = masked_majority_baseline(&sample, &plan, &model).unwrap();
        assert!((0.0..=1.0).contains(&base));
        // the scene is mostly background, so majority is a strong baseline
        assert!(base > 0.3);
    }
}
