//! Synthetic coupled-modality scenes, on-disk sample formats, and the
//! pre-training augmentation.
//!
//! A scene is a stack of colored rectangles and ellipses at random depths over
//! a far background. All three rasters are rendered from the same shape list:
//! rgb shows each shape's class color (nearest shape wins), depth holds the
//! nearest shape's depth (background at the far plane), and semseg holds the
//! shape's class index. Color is a fixed function of class, so the modalities
//! predict one another.
//!
//! Formats: rgb as binary PPM (P6, maxval 255); depth as raw little-endian
//! f32 with a 16-byte header (magic, height, width, reserved); the depth
//! validity bitmap and the semseg class raster with the same header layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng::{streams, Rng};
use crate::tokenize::{Sample, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid data in {path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("manifest error: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---- class palette -----------------------------------------------------------

/// Fixed 133-entry color palette: a 6x6x6 color lattice shuffled by a seeded
/// permutation. Entries are pairwise distinct, so class boundaries are always
/// visible in rgb renderings.
pub fn class_palette() -> Vec<[u8; 3]> {
    let mut lattice: Vec<[u8; 3]> = (0..216)
        .map(|i| {
            let r = 30 + (i % 6) * 39;
            let g = 30 + ((i / 6) % 6) * 39;
            let b = 30 + ((i / 36) % 6) * 39;
            [r as u8, g as u8, b as u8]
        })
        .collect();
    let mut rng = Rng::from_seed(0x5EED);
    rng.shuffle(&mut lattice);
    lattice.truncate(NUM_CLASSES);
    lattice
}

// ---- synthetic scenes ----------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone)]
struct Shape {
    kind: ShapeKind,
    center: (f64, f64),
    half: (f64, f64),
    depth: f64,
    class: u8,
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.center.0) / self.half.0;
        let dy = (y - self.center.1) / self.half.1;
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

/// Depth assigned to background pixels (the far plane).
pub const FAR_PLANE: f32 = 1.0;
/// Fraction of depth pixels marked invalid by default.
pub const DEFAULT_INVALID_FRACTION: f64 = 0.05;

/// Render a random scene of `num_shapes` shapes. The three rasters are
/// mutually consistent by construction; rgb is quantized to the 8-bit grid so
/// save/load round-trips are bit-exact.
pub fn generate_synthetic_scene(seed: u64, resolution: usize, num_shapes: usize) -> Sample {
    generate_scene_with(seed, resolution, num_shapes, DEFAULT_INVALID_FRACTION)
}

pub fn generate_scene_with(
    seed: u64,
    resolution: usize,
    num_shapes: usize,
    invalid_fraction: f64,
) -> Sample {
    assert!(num_shapes >= 1, "a scene needs at least one shape");
    let mut rng = Rng::stream(seed, &[streams::SCENE]);
    let palette = class_palette();
    let shapes: Vec<Shape> = (0..num_shapes)
        .map(|_| Shape {
            kind: if rng.bool_with(0.5) {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Ellipse
            },
            center: (
                rng.range_f64(0.1, 0.9) * resolution as f64,
                rng.range_f64(0.1, 0.9) * resolution as f64,
            ),
            half: (
                rng.range_f64(0.08, 0.3) * resolution as f64,
                rng.range_f64(0.08, 0.3) * resolution as f64,
            ),
            depth: rng.range_f64(0.15, 0.9),
            class: (1 + rng.below(NUM_CLASSES - 1)) as u8,
        })
        .collect();

    let n = resolution * resolution;
    let mut rgb = Vec::with_capacity(n * 3);
    let mut depth = Vec::with_capacity(n);
    let mut semseg = Vec::with_capacity(n);
    for row in 0..resolution {
        for col in 0..resolution {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut best: Option<&Shape> = None;
            for s in &shapes {
                if s.covers(x, y) && best.map(|b| s.depth < b.depth).unwrap_or(true) {
                    best = Some(s);
                }
            }
            let (class, d) = match best {
                Some(s) => (s.class, s.depth as f32),
                None => (0, FAR_PLANE),
            };
            let color = palette[class as usize];
            rgb.extend(color.iter().map(|&c| c as f32 / 255.0));
            depth.push(d);
            semseg.push(class);
        }
    }
    let depth_valid: Vec<bool> = (0..n).map(|_| !rng.bool_with(invalid_fraction)).collect();
    Sample {
        height: resolution,
        width: resolution,
        rgb,
        depth,
        depth_valid,
        semseg,
    }
}

// ---- augmentation ----------------------------------------------------------------

/// RandomResizedCrop + horizontal flip parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Crop area as a fraction of the source area.
    pub scale: (f64, f64),
    /// Aspect ratio range, sampled log-uniformly.
    pub aspect: (f64, f64),
    pub hflip_p: f64,
    pub out_resolution: usize,
}

impl AugmentParams {
    pub fn paper(out_resolution: usize) -> Self {
        AugmentParams {
            scale: (0.2, 1.0),
            aspect: (0.75, 4.0 / 3.0),
            hflip_p: 0.5,
            out_resolution,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ok = self.scale.0 > 0.0
            && self.scale.0 <= self.scale.1
            && self.scale.1 <= 1.0
            && self.aspect.0 > 0.0
            && self.aspect.0 <= self.aspect.1
            && (0.0..=1.0).contains(&self.hflip_p)
            && self.out_resolution > 0;
        if ok {
            Ok(())
        } else {
            Err(DataError::Manifest(format!("invalid augment params {self:?}")))
        }
    }
}

/// Mirror all rasters left-right.
pub fn hflip_sample(sample: &Sample) -> Sample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    for row in 0..h {
        for col in 0..w {
            let src = row * w + (w - 1 - col);
            let dst = row * w + col;
            for ch in 0..3 {
                out.rgb[dst * 3 + ch] = sample.rgb[src * 3 + ch];
            }
            out.depth[dst] = sample.depth[src];
            out.depth_valid[dst] = sample.depth_valid[src];
            out.semseg[dst] = sample.semseg[src];
        }
    }
    out
}

/// One geometric transform applied to every modality: random crop (resampled
/// on failure, center crop after 10 tries), resize to the output resolution
/// (rgb bilinear, depth bilinear over valid neighbors only, semseg nearest),
/// then a joint horizontal flip.
pub fn random_resized_crop_flip(sample: &Sample, params: &AugmentParams, rng: &mut Rng) -> Sample {
    let (h, w) = (sample.height as f64, sample.width as f64);
    let area = h * w;
    let mut chosen = None;
    for _ in 0..10 {
        let target = area * rng.range_f64(params.scale.0, params.scale.1);
        let log_aspect = rng.range_f64(params.aspect.0.ln(), params.aspect.1.ln());
        let aspect = log_aspect.exp();
        let cw = (target * aspect).sqrt().round();
        let ch = (target / aspect).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let x0 = rng.below((w - cw) as usize + 1);
            let y0 = rng.below((h - ch) as usize + 1);
            chosen = Some((x0, y0, cw as usize, ch as usize));
            break;
        }
    }
    let (x0, y0, cw, ch) = chosen.unwrap_or_else(|| {
        let side = sample.height.min(sample.width);
        (
            (sample.width - side) / 2,
            (sample.height - side) / 2,
            side,
            side,
        )
    });
    let resized = crop_resize(sample, x0, y0, cw, ch, params.out_resolution);
    if rng.bool_with(params.hflip_p) {
        hflip_sample(&resized)
    } else {
        resized
    }
}

fn crop_resize(
    sample: &Sample,
    x0: usize,
    y0: usize,
    cw: usize,
    ch: usize,
    out: usize,
) -> Sample {
    let w = sample.width;
    let n = out * out;
    let mut rgb = vec![0.0f32; n * 3];
    let mut depth = vec![0.0f32; n];
    let mut depth_valid = vec![false; n];
    let mut semseg = vec![0u8; n];

    for dy in 0..out {
        // source coordinate in crop space, half-pixel convention
        let sy = (dy as f64 + 0.5) * ch as f64 / out as f64 - 0.5;
        let y_low = sy.floor();
        let fy = sy - y_low;
        for dx in 0..out {
            let sx = (dx as f64 + 0.5) * cw as f64 / out as f64 - 0.5;
            let x_low = sx.floor();
            let fx = sx - x_low;

            let clamp = |v: f64, hi: usize| -> usize {
                (v.max(0.0) as usize).min(hi - 1)
            };
            let xs = [clamp(x_low, cw), clamp(x_low + 1.0, cw)];
            let ys = [clamp(y_low, ch), clamp(y_low + 1.0, ch)];
            let weights = [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ];
            let corners = [
                (xs[0], ys[0]),
                (xs[1], ys[0]),
                (xs[0], ys[1]),
                (xs[1], ys[1]),
            ];
            let src_index = |cx: usize, cy: usize| (y0 + cy) * w + (x0 + cx);

            let di = dy * out + dx;
            for chn in 0..3 {
                let mut acc = 0.0;
                for (&(cx, cy), &wt) in corners.iter().zip(&weights) {
                    acc += wt * sample.rgb[src_index(cx, cy) * 3 + chn] as f64;
                }
                rgb[di * 3 + chn] = acc as f32;
            }

            // depth: invalid neighbors drop out of the weighting
            let mut dacc = 0.0;
            let mut wacc = 0.0;
            for (&(cx, cy), &wt) in corners.iter().zip(&weights) {
                let si = src_index(cx, cy);
                if sample.depth_valid[si] {
                    dacc += wt * sample.depth[si] as f64;
                    wacc += wt;
                }
            }
            if wacc > 0.0 {
                depth[di] = (dacc / wacc) as f32;
                depth_valid[di] = true;
            }

            // semseg: nearest neighbor keeps class indices categorical
            let nx = clamp(sx.round(), cw);
            let ny = clamp(sy.round(), ch);
            semseg[di] = sample.semseg[src_index(nx, ny)];
        }
    }
    Sample {
        height: out,
        width: out,
        rgb,
        depth,
        depth_valid,
        semseg,
    }
}

// ---- file formats -----------------------------------------------------------------

const HEADER_LEN: usize = 16;

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], h: usize, w: usize) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
}

fn read_header(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<(usize, usize), DataError> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            message: format!("file holds {} bytes, header needs {HEADER_LEN}", bytes.len()),
        });
    }
    if &bytes[..4] != magic {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            message: format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4],
                std::str::from_utf8(magic).unwrap()
            ),
        });
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((h, w))
}

fn expect_len(bytes: &[u8], expected: usize, path: &Path) -> Result<(), DataError> {
    if bytes.len() != expected {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok(())
}

pub fn sample_paths(dir: &Path, id: &str) -> [PathBuf; 4] {
    [
        dir.join(format!("{id}.rgb.ppm")),
        dir.join(format!("{id}.depth.f32")),
        dir.join(format!("{id}.valid.bits")),
        dir.join(format!("{id}.semseg.u8")),
    ]
}

/// Write an 8-bit interleaved RGB buffer as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb8: &[u8]) -> Result<(), DataError> {
    assert_eq!(rgb8.len(), width * height * 3);
    let mut ppm = Vec::with_capacity(rgb8.len() + 32);
    write!(&mut ppm, "P6\n{width} {height}\n255\n").expect("write to vec");
    ppm.extend_from_slice(rgb8);
    fs::write(path, ppm).map_err(io_err(path))
}

/// Quantize a [0, 1] float rgb raster onto the 8-bit grid.
pub fn quantize_rgb(rgb: &[f32]) -> Vec<u8> {
    rgb.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn save_sample(dir: &Path, id: &str, sample: &Sample) -> Result<(), DataError> {
    let [rgb_path, depth_path, valid_path, semseg_path] = sample_paths(dir, id);
    let (h, w) = (sample.height, sample.width);

    write_ppm(&rgb_path, w, h, &quantize_rgb(&sample.rgb))?;

    let mut depth = Vec::with_capacity(HEADER_LEN + h * w * 4);
    write_header(&mut depth, b"DPTH", h, w);
    for &v in &sample.depth {
        depth.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&depth_path, depth).map_err(io_err(&depth_path))?;

    let mut valid = Vec::with_capacity(HEADER_LEN + h * w / 8 + 1);
    write_header(&mut valid, b"DMSK", h, w);
    let mut acc = 0u8;
    for (i, &flag) in sample.depth_valid.iter().enumerate() {
        if flag {
            acc |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            valid.push(acc);
            acc = 0;
        }
    }
    if sample.depth_valid.len() % 8 != 0 {
        valid.push(acc);
    }
    fs::write(&valid_path, valid).map_err(io_err(&valid_path))?;

    let mut semseg = Vec::with_capacity(HEADER_LEN + h * w);
    write_header(&mut semseg, b"SSEG", h, w);
    semseg.extend_from_slice(&sample.semseg);
    fs::write(&semseg_path, semseg).map_err(io_err(&semseg_path))?;
    Ok(())
}

pub fn load_sample(dir: &Path, id: &str) -> Result<Sample, DataError> {
    let [rgb_path, depth_path, valid_path, semseg_path] = sample_paths(dir, id);

    let ppm = fs::read(&rgb_path).map_err(io_err(&rgb_path))?;
    let (h, w, rgb) = parse_ppm(&ppm, &rgb_path)?;

    let depth_bytes = fs::read(&depth_path).map_err(io_err(&depth_path))?;
    let (dh, dw) = read_header(&depth_bytes, b"DPTH", &depth_path)?;
    expect_len(&depth_bytes, HEADER_LEN + dh * dw * 4, &depth_path)?;
    let depth: Vec<f32> = depth_bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let valid_bytes = fs::read(&valid_path).map_err(io_err(&valid_path))?;
    let (vh, vw) = read_header(&valid_bytes, b"DMSK", &valid_path)?;
    expect_len(&valid_bytes, HEADER_LEN + (vh * vw).div_ceil(8), &valid_path)?;
    let depth_valid: Vec<bool> = (0..vh * vw)
        .map(|i| valid_bytes[HEADER_LEN + i / 8] >> (i % 8) & 1 == 1)
        .collect();

    let semseg_bytes = fs::read(&semseg_path).map_err(io_err(&semseg_path))?;
    let (sh, sw) = read_header(&semseg_bytes, b"SSEG", &semseg_path)?;
    expect_len(&semseg_bytes, HEADER_LEN + sh * sw, &semseg_path)?;
    let semseg = semseg_bytes[HEADER_LEN..].to_vec();
    if let Some(&bad) = semseg.iter().find(|&&c| c as usize >= NUM_CLASSES) {
        return Err(DataError::Data {
            path: semseg_path,
            message: format!("class {bad} out of range ({NUM_CLASSES} classes)"),
        });
    }

    for (name, (ah, aw)) in [("depth", (dh, dw)), ("valid", (vh, vw)), ("semseg", (sh, sw))] {
        if (ah, aw) != (h, w) {
            return Err(DataError::Format {
                path: dir.join(id),
                message: format!("{name} raster is {ah}x{aw}, rgb is {h}x{w}"),
            });
        }
    }
    Ok(Sample {
        height: h,
        width: w,
        rgb,
        depth,
        depth_valid,
        semseg,
    })
}

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>), DataError> {
    let format_err = |message: String| DataError::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(format_err("missing P6 magic".into()));
    }
    // header tokens: width, height, maxval; whitespace separated with
    // optional '#' comment lines
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("truncated header".into()));
        }
        let token = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| format_err("non-ascii header".into()))?;
        fields.push(
            token
                .parse::<usize>()
                .map_err(|_| format_err(format!("bad header field `{token}`")))?,
        );
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format_err(format!("maxval {maxval} unsupported, need 255")));
    }
    pos += 1; // single whitespace byte after maxval
    let need = w * h * 3;
    if bytes.len() - pos != need {
        return Err(format_err(format!(
            "expected {need} pixel bytes, found {}",
            bytes.len() - pos
        )));
    }
    let rgb = bytes[pos..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((h, w, rgb))
}

// ---- manifest + dataset ----------------------------------------------------------

/// Dataset descriptor: generator settings plus the sample id list.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub shapes: usize,
    pub invalid_fraction: f64,
    pub ids: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("resolution={}\n", self.resolution));
        out.push_str(&format!("num_classes={}\n", self.num_classes));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("shapes={}\n", self.shapes));
        out.push_str(&format!("invalid_fraction={}\n", self.invalid_fraction));
        out.push_str("samples:\n");
        for id in &self.ids {
            out.push_str(id);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut resolution = None;
        let mut num_classes = None;
        let mut seed = None;
        let mut shapes = None;
        let mut invalid_fraction = None;
        let mut ids = Vec::new();
        let mut in_samples = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "samples:" {
                in_samples = true;
                continue;
            }
            if in_samples {
                ids.push(line.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DataError::Manifest(format!("bad line `{line}`")))?;
            let bad = |e: String| DataError::Manifest(format!("bad value for {key}: {e}"));
            match key {
                "resolution" => resolution = Some(value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
                "num_classes" => num_classes = Some(value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
                "seed" => seed = Some(value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
                "shapes" => shapes = Some(value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
                "invalid_fraction" => invalid_fraction = Some(value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?),
                other => return Err(DataError::Manifest(format!("unknown key `{other}`"))),
            }
        }
        Ok(DatasetManifest {
            resolution: resolution.ok_or_else(|| DataError::Manifest("missing resolution".into()))?,
            num_classes: num_classes.ok_or_else(|| DataError::Manifest("missing num_classes".into()))?,
            seed: seed.ok_or_else(|| DataError::Manifest("missing seed".into()))?,
            shapes: shapes.ok_or_else(|| DataError::Manifest("missing shapes".into()))?,
            invalid_fraction: invalid_fraction
                .ok_or_else(|| DataError::Manifest("missing invalid_fraction".into()))?,
            ids,
        })
    }
}

/// Write `count` generated samples plus the manifest into `dir`.
pub fn generate_dataset(
    dir: &Path,
    count: usize,
    resolution: usize,
    shapes: usize,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ids: Vec<String> = (0..count).map(|i| format!("sample_{i:06}")).collect();
    for (i, id) in ids.iter().enumerate() {
        let sample = generate_scene_with(
            seed.wrapping_add(i as u64),
            resolution,
            shapes,
            DEFAULT_INVALID_FRACTION,
        );
        save_sample(dir, id, &sample)?;
    }
    let manifest = DatasetManifest {
        resolution,
        num_classes: NUM_CLASSES,
        seed,
        shapes,
        invalid_fraction: DEFAULT_INVALID_FRACTION,
        ids,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.render()).map_err(io_err(&path))?;
    Ok(manifest)
}

/// An on-disk dataset opened for training.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Open and verify that every id resolves to all modality files.
    pub fn open(root: &Path) -> Result<Dataset, DataError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest = DatasetManifest::parse(&text)?;
        if manifest.ids.is_empty() {
            return Err(DataError::Manifest("dataset has no samples".into()));
        }
        for id in &manifest.ids {
            for p in sample_paths(root, id) {
                if !p.exists() {
                    return Err(DataError::Manifest(format!(
                        "sample {id} is missing {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.ids.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Sample, DataError> {
        load_sample(&self.root, &self.manifest.ids[index])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_entries_are_distinct() {
        let palette = class_palette();
        assert_eq!(palette.len(), NUM_CLASSES);
        let unique: std::collections::BTreeSet<[u8; 3]> = palette.iter().copied().collect();
        assert_eq!(unique.len(), NUM_CLASSES);
    }

    #[test]
    fn single_shape_semseg_matches_rgb_difference() {
        // semseg nonzero exactly where rgb differs from the background color
        let sample = generate_scene_with(3, 48, 1, 0.0);
        let palette = class_palette();
        let bg = palette[0];
        for px in 0..48 * 48 {
            let color = [
                (sample.rgb[px * 3] * 255.0).round() as u8,
                (sample.rgb[px * 3 + 1] * 255.0).round() as u8,
                (sample.rgb[px * 3 + 2] * 255.0).round() as u8,
            ];
            let fg = sample.semseg[px] != 0;
            assert_eq!(fg, color != bg, "pixel {px}");
        }
    }

    #[test]
    fn nearer_shape_wins_in_all_modalities() {
        let palette = class_palette();
        for seed in 0..20u64 {
            let sample = generate_scene_with(seed, 32, 2, 0.0);
            for px in 0..32 * 32 {
                let class = sample.semseg[px] as usize;
                let color = palette[class];
                assert_eq!(
                    (sample.rgb[px * 3] * 255.0).round() as u8,
                    color[0],
                    "rgb must be the class color"
                );
                if class == 0 {
                    assert_eq!(sample.depth[px], FAR_PLANE);
                } else {
                    assert!(sample.depth[px] < FAR_PLANE);
                }
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_scene() {
        let a = generate_synthetic_scene(9, 40, 4);
        let b = generate_synthetic_scene(9, 40, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn class_histogram_covers_the_range() {
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..200u64 {
            let sample = generate_scene_with(seed, 16, 4, 0.0);
            seen.extend(sample.semseg.iter().copied());
        }
        assert!(seen.contains(&0), "background appears");
        let fg: Vec<u8> = seen.iter().copied().filter(|&c| c != 0).collect();
        assert!(fg.len() > 50, "expected broad class coverage, got {}", fg.len());
        assert!(fg.iter().all(|&c| (c as usize) < NUM_CLASSES));
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let sample = generate_synthetic_scene(11, 24, 3);
        save_sample(dir.path(), "s0", &sample).unwrap();
        let loaded = load_sample(dir.path(), "s0").unwrap();
        assert_eq!(sample, loaded);
        // idempotent save: second save produces identical files
        save_sample(dir.path(), "s1", &loaded).unwrap();
        for (a, b) in sample_paths(dir.path(), "s0")
            .iter()
            .zip(sample_paths(dir.path(), "s1").iter())
        {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }

    #[test]
    fn truncated_depth_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let sample = generate_synthetic_scene(12, 16, 2);
        save_sample(dir.path(), "s", &sample).unwrap();
        let path = dir.path().join("s.depth.f32");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_sample(dir.path(), "s").unwrap_err();
        match err {
            DataError::Format { message, .. } => {
                assert!(message.contains("expected") && message.contains("found"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ppm_maxval_must_be_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rgb.ppm");
        fs::write(&path, b"P6\n2 2\n65535\n0123456789ab").unwrap();
        let sample = generate_synthetic_scene(13, 16, 1);
        save_sample(dir.path(), "bad", &sample).unwrap();
        fs::write(&path, b"P6\n2 2\n65535\n0123456789ab").unwrap();
        let err = load_sample(dir.path(), "bad").unwrap_err();
        match err {
            DataError::Format { message, .. } => assert!(message.contains("maxval"), "{message}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let sample = generate_synthetic_scene(14, 16, 1);
        save_sample(dir.path(), "s", &sample).unwrap();
        let path = dir.path().join("s.semseg.u8");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_sample(dir.path(), "s").unwrap_err(),
            DataError::Format { .. }
        ));
    }

    #[test]
    fn out_of_range_class_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let sample = generate_synthetic_scene(15, 16, 1);
        save_sample(dir.path(), "s", &sample).unwrap();
        let path = dir.path().join("s.semseg.u8");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 200;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_sample(dir.path(), "s").unwrap_err(),
            DataError::Data { .. }
        ));
    }

    #[test]
    fn identity_augmentation_is_identity() {
        let sample = generate_scene_with(16, 32, 3, 0.0);
        let params = AugmentParams {
            scale: (1.0, 1.0),
            aspect: (1.0, 1.0),
            hflip_p: 0.0,
            out_resolution: 32,
        };
        let mut rng = Rng::from_seed(1);
        let out = random_resized_crop_flip(&sample, &params, &mut rng);
        assert_eq!(out, sample);
    }

    #[test]
    fn flip_is_an_involution() {
        let sample = generate_synthetic_scene(17, 24, 3);
        assert_eq!(hflip_sample(&hflip_sample(&sample)), sample);
        assert_ne!(hflip_sample(&sample), sample);
    }

    #[test]
    fn crop_preserves_class_closure() {
        // nearest-neighbor: the crop only contains classes present before
        let sample = generate_synthetic_scene(18, 48, 5);
        let before: std::collections::BTreeSet<u8> = sample.semseg.iter().copied().collect();
        let params = AugmentParams::paper(32);
        let mut rng = Rng::from_seed(2);
        for _ in 0..20 {
            let out = random_resized_crop_flip(&sample, &params, &mut rng);
            for c in out.semseg {
                assert!(before.contains(&c));
            }
        }
    }

    #[test]
    fn augmentation_is_reproducible() {
        let sample = generate_synthetic_scene(19, 40, 4);
        let params = AugmentParams::paper(32);
        let run = |seed| {
            let mut rng = Rng::from_seed(seed);
            random_resized_crop_flip(&sample, &params, &mut rng)
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn augmented_boundaries_stay_aligned() {
        // wherever the augmented semseg changes class horizontally, the rgb
        // raster must change within one pixel of the same spot
        let sample = generate_scene_with(20, 64, 3, 0.0);
        let params = AugmentParams::paper(48);
        let mut rng = Rng::from_seed(7);
        let out = random_resized_crop_flip(&sample, &params, &mut rng);
        let w = out.width;
        let mut edges = 0;
        let mut agree = 0;
        let rgb_at = |px: usize| {
            [
                out.rgb[px * 3],
                out.rgb[px * 3 + 1],
                out.rgb[px * 3 + 2],
            ]
        };
        let rgb_diff = |a: usize, b: usize| {
            rgb_at(a)
                .iter()
                .zip(rgb_at(b))
                .any(|(&x, y)| (x - y).abs() > 1e-3)
        };
        for row in 0..out.height {
            for col in 0..w - 1 {
                let px = row * w + col;
                if out.semseg[px] != out.semseg[px + 1] {
                    edges += 1;
                    let near_change = rgb_diff(px, px + 1)
                        || (col > 0 && rgb_diff(px - 1, px))
                        || (col + 2 < w && rgb_diff(px + 1, px + 2));
                    if near_change {
                        agree += 1;
                    }
                }
            }
        }
        assert!(edges > 0, "scene should have class boundaries");
        let ratio = agree as f64 / edges as f64;
        assert!(ratio >= 0.99, "boundary agreement {ratio}");
    }

    #[test]
    fn depth_interpolation_skips_invalid_neighbors() {
        let mut sample = generate_scene_with(21, 8, 1, 0.0);
        sample.depth = (0..64).map(|i| i as f32).collect();
        sample.depth_valid = vec![true; 64];
        sample.depth[9] = 1e9;
        sample.depth_valid[9] = false;
        let params = AugmentParams {
            scale: (1.0, 1.0),
            aspect: (1.0, 1.0),
            hflip_p: 0.0,
            out_resolution: 4, // downscale 2x: invalid pixel is a hole
        };
        let mut rng = Rng::from_seed(3);
        let out = random_resized_crop_flip(&sample, &params, &mut rng);
        assert!(out.depth.iter().all(|&d| d < 1e6), "sentinel must not leak");
        assert!(out.depth_valid.iter().all(|&v| v), "holes have valid neighbors");
    }

    #[test]
    fn dataset_generate_open_load() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(dir.path(), 3, 32, 4, 7).unwrap();
        assert_eq!(manifest.ids.len(), 3);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.manifest, manifest);
        let sample = ds.load(0).unwrap();
        assert_eq!(sample.height, 32);

        // determinism: regeneration is byte-identical
        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(dir2.path(), 3, 32, 4, 7).unwrap();
        for id in &manifest.ids {
            for (a, b) in sample_paths(dir.path(), id)
                .iter()
                .zip(sample_paths(dir2.path(), id).iter())
            {
                assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
            }
        }

        // a missing file is caught at open
        fs::remove_file(dir.path().join("sample_000001.depth.f32")).unwrap();
        assert!(matches!(
            Dataset::open(dir.path()).unwrap_err(),
            DataError::Manifest(_)
        ));
    }

    #[test]
    fn manifest_round_trip_and_unknown_keys() {
        let manifest = DatasetManifest {
            resolution: 64,
            num_classes: NUM_CLASSES,
            seed: 7,
            shapes: 5,
            invalid_fraction: 0.05,
            ids: vec!["a".into(), "b".into()],
        };
        let parsed = DatasetManifest::parse(&manifest.render()).unwrap();
        assert_eq!(manifest, parsed);
        assert!(DatasetManifest::parse("zebra=1\n").is_err());
    }
}
