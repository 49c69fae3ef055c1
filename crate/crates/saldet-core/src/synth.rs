//! Seeded synthetic concrete-surface imagery: textured backgrounds with
//! rendered defects and tight ground-truth boxes. A desk-scale stand-in
//! for field inspection data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{
    save_ground_truth, save_image, save_manifest, BBox, ClassId, DatasetManifest,
    GroundTruthBox, Image, ManifestEntry, Split, NUM_DEFECT_CLASSES,
};
use crate::saliency::PATCH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Images per defect class, indexed like `ClassId::defect_index`.
    pub counts: [usize; NUM_DEFECT_CLASSES],
    /// Square image side.
    pub size: u32,
    /// Pure-background images as a fraction of the defect image count.
    pub background_fraction: f64,
    /// Texture amplitude as a fraction of full scale.
    pub noise_level: f64,
    /// Defect intensity delta as a fraction of full scale.
    pub defect_contrast: f64,
    /// Crack polyline: segment count and stroke thickness.
    pub crack_segments: usize,
    pub crack_thickness: f64,
    /// Crack end-to-end extent range in pixels.
    pub crack_span: (f64, f64),
    /// Blob radius range in pixels (spallation and stain-like defects).
    pub blob_radius: (f64, f64),
    /// Train/val/test shares; must sum to 1.
    pub split_ratios: (f64, f64, f64),
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            counts: [10; NUM_DEFECT_CLASSES],
            size: 256,
            background_fraction: 0.10,
            noise_level: 0.05,
            defect_contrast: 0.35,
            crack_segments: 6,
            crack_thickness: 1.6,
            crack_span: (40.0, 90.0),
            blob_radius: (10.0, 22.0),
            split_ratios: (0.6, 0.2, 0.2),
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.counts.iter().any(|&c| c < 1) {
            return Err(Error::config("synth.counts must be at least 1 per class"));
        }
        if self.size < PATCH as u32 {
            return Err(Error::config(format!("synth.size must be at least {PATCH}")));
        }
        for (name, v) in [
            ("synth.background_fraction", self.background_fraction),
            ("synth.noise_level", self.noise_level),
            ("synth.defect_contrast", self.defect_contrast),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::config(format!("{name} must lie in [0,1]")));
            }
        }
        if self.crack_segments < 1 {
            return Err(Error::config("synth.crack_segments must be at least 1"));
        }
        if !(self.crack_thickness > 0.0) || !(self.blob_radius.0 > 0.0) {
            return Err(Error::config("synth stroke sizes must be positive"));
        }
        if self.crack_span.0 > self.crack_span.1 || self.blob_radius.0 > self.blob_radius.1 {
            return Err(Error::config("synth ranges must be (lo, hi) with lo <= hi"));
        }
        let (tr, va, te) = self.split_ratios;
        if tr < 0.0 || va < 0.0 || te < 0.0 || (tr + va + te - 1.0).abs() > 1e-9 {
            return Err(Error::config("synth.split_ratios must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

/// Double-precision canvas accumulating the render before quantization.
struct Canvas {
    size: usize,
    values: Vec<f64>,
}

impl Canvas {
    fn quantize(self) -> Image {
        let pixels: Vec<u8> = self
            .values
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        Image::new(self.size, self.size, 1, pixels).expect("square canvas")
    }
}

/// Smooth value noise: a coarse random lattice sampled bilinearly.
fn value_noise(size: usize, cell: usize, amp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nodes = size / cell + 2;
    let lattice: Vec<f64> = (0..nodes * nodes)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx as usize, fx.fract());
            let n00 = lattice[y0 * nodes + x0];
            let n10 = lattice[y0 * nodes + x0 + 1];
            let n01 = lattice[(y0 + 1) * nodes + x0];
            let n11 = lattice[(y0 + 1) * nodes + x0 + 1];
            let top = n00 + (n10 - n00) * tx;
            let bot = n01 + (n11 - n01) * tx;
            out[y * size + x] = (top + (bot - top) * ty) * amp;
        }
    }
    out
}

fn background_canvas(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Canvas {
    let size = cfg.size as usize;
    let base = rng.random_range(120.0..170.0);
    let amp = cfg.noise_level * 255.0;
    let coarse = value_noise(size, 21, amp, rng);
    let fine = value_noise(size, 6, amp * 0.4, rng);
    let mut values = vec![base; size * size];
    for i in 0..values.len() {
        values[i] += coarse[i] + fine[i] + rng.random_range(-1.5..1.5);
    }
    Canvas { size, values }
}

/// Tracks the tight extent of painted defect pixels.
#[derive(Default)]
struct Extent {
    min_x: i64,
    min_y: i64,
    max_x: i64,
    max_y: i64,
    any: bool,
}

impl Extent {
    fn include(&mut self, x: i64, y: i64) {
        if !self.any {
            *self = Extent {
                min_x: x,
                min_y: y,
                max_x: x,
                max_y: y,
                any: true,
            };
        } else {
            self.min_x = self.min_x.min(x);
            self.min_y = self.min_y.min(y);
            self.max_x = self.max_x.max(x);
            self.max_y = self.max_y.max(y);
        }
    }

    fn bbox(&self) -> BBox {
        BBox {
            x: self.min_x as u32,
            y: self.min_y as u32,
            w: (self.max_x - self.min_x + 1) as u32,
            h: (self.max_y - self.min_y + 1) as u32,
        }
    }
}

/// Add `delta * alpha` around a segment with soft (distance-based) edges.
/// Negative delta darkens. Painted pixels with |alpha| past 0.5 extend the
/// extent.
fn stroke_segment(
    canvas: &mut Canvas,
    (x0, y0): (f64, f64),
    (x1, y1): (f64, f64),
    thickness: f64,
    delta: f64,
    extent: &mut Extent,
) {
    let size = canvas.size as i64;
    let pad = thickness + 1.5;
    let lo_x = ((x0.min(x1) - pad).floor() as i64).max(0);
    let hi_x = ((x0.max(x1) + pad).ceil() as i64).min(size - 1);
    let lo_y = ((y0.min(y1) - pad).floor() as i64).max(0);
    let hi_y = ((y0.max(y1) + pad).ceil() as i64).min(size - 1);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let (px, py) = (x as f64, y as f64);
            let t = if len2 == 0.0 {
                0.0
            } else {
                ((px - x0) * dx + (py - y0) * dy) / len2
            }
            .clamp(0.0, 1.0);
            let (cx, cy) = (x0 + t * dx, y0 + t * dy);
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            // 1 inside the stroke, fading to 0 over one pixel.
            let alpha = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                canvas.values[y as usize * canvas.size + x as usize] += delta * alpha;
                if alpha >= 0.5 {
                    extent.include(x, y);
                }
            }
        }
    }
}

/// Irregular radial blob: radius modulated per angle, soft edge.
fn paint_blob(
    canvas: &mut Canvas,
    (cx, cy): (f64, f64),
    radius: f64,
    irregularity: f64,
    delta: f64,
    rng: &mut ChaCha8Rng,
    extent: &mut Extent,
) {
    const SPOKES: usize = 16;
    let spokes: Vec<f64> = (0..SPOKES)
        .map(|_| 1.0 + rng.random_range(-irregularity..irregularity))
        .collect();
    let size = canvas.size as i64;
    let reach = radius * (1.0 + irregularity) + 2.0;
    let lo_x = ((cx - reach).floor() as i64).max(0);
    let hi_x = ((cx + reach).ceil() as i64).min(size - 1);
    let lo_y = ((cy - reach).floor() as i64).max(0);
    let hi_y = ((cy + reach).ceil() as i64).min(size - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let d = (dx * dx + dy * dy).sqrt();
            let angle = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
            let pos = angle / std::f64::consts::TAU * SPOKES as f64;
            let (i0, t) = (pos as usize % SPOKES, pos.fract());
            let r = radius * (spokes[i0] + (spokes[(i0 + 1) % SPOKES] - spokes[i0]) * t);
            let alpha = (r - d + 0.5).clamp(0.0, 1.0);
            if alpha > 0.0 {
                canvas.values[y as usize * canvas.size + x as usize] += delta * alpha;
                if alpha >= 0.5 {
                    extent.include(x, y);
                }
            }
        }
    }
}

/// Meandering polyline with roughly the requested end-to-end span.
fn paint_crack(
    canvas: &mut Canvas,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    extent: &mut Extent,
) {
    let size = canvas.size as f64;
    // Clamp keeps margin < size - margin, so the center range is never empty.
    let span = rng.random_range(cfg.crack_span.0..=cfg.crack_span.1).min(size - 12.0);
    let margin = span / 2.0 + 5.0;
    let cx = rng.random_range(margin..size - margin);
    let cy = rng.random_range(margin..size - margin);
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let seg_len = span / cfg.crack_segments as f64;
    let delta = -cfg.defect_contrast * 255.0;
    // Walk outward from the center in both directions for a centered span.
    for dir in [heading, heading + std::f64::consts::PI] {
        let (mut x, mut y) = (cx, cy);
        let mut theta = dir;
        for _ in 0..cfg.crack_segments.div_ceil(2) {
            theta += rng.random_range(-0.5..0.5);
            let nx = (x + theta.cos() * seg_len).clamp(2.0, size - 3.0);
            let ny = (y + theta.sin() * seg_len).clamp(2.0, size - 3.0);
            stroke_segment(canvas, (x, y), (nx, ny), cfg.crack_thickness, delta, extent);
            (x, y) = (nx, ny);
        }
    }
}

/// Render one image for `class` (None for pure background). Returns the
/// image and the defect's ground-truth box and labels.
fn render_image(
    cfg: &SynthConfig,
    class: Option<ClassId>,
    rng: &mut ChaCha8Rng,
) -> (Image, Option<(BBox, Vec<ClassId>)>) {
    let mut canvas = background_canvas(cfg, rng);
    let size = cfg.size as f64;
    let delta = cfg.defect_contrast * 255.0;
    let mut extent = Extent::default();
    let gt = match class {
        None => None,
        Some(c) if c == ClassId::CRACK => {
            paint_crack(&mut canvas, cfg, rng, &mut extent);
            Some((extent.bbox(), vec![ClassId::CRACK]))
        }
        Some(c) if c == ClassId::SPALLATION => {
            let r = rng.random_range(cfg.blob_radius.0..=cfg.blob_radius.1);
            let m = r * 1.5 + 4.0;
            let cx = rng.random_range(m..size - m);
            let cy = rng.random_range(m..size - m);
            paint_blob(&mut canvas, (cx, cy), r, 0.35, -delta, rng, &mut extent);
            Some((extent.bbox(), vec![ClassId::SPALLATION]))
        }
        Some(c) if c == ClassId::EXPOSED_BAR => {
            // A bright straight bar crossing a spalled cavity: one box,
            // two labels.
            let r = rng.random_range(cfg.blob_radius.0..=cfg.blob_radius.1).max(8.0);
            let m = r * 1.5 + 6.0;
            let cx = rng.random_range(m..size - m);
            let cy = rng.random_range(m..size - m);
            paint_blob(&mut canvas, (cx, cy), r, 0.3, -delta, rng, &mut extent);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (theta.cos() * r, theta.sin() * r);
            stroke_segment(
                &mut canvas,
                (cx - dx, cy - dy),
                (cx + dx, cy + dy),
                3.0,
                delta * 1.4,
                &mut extent,
            );
            Some((
                extent.bbox(),
                vec![ClassId::SPALLATION, ClassId::EXPOSED_BAR],
            ))
        }
        Some(c) if c == ClassId::EFFLORESCENCE => {
            let r = rng.random_range(cfg.blob_radius.0..=cfg.blob_radius.1);
            let m = r * 1.5 + 4.0;
            let cx = rng.random_range(m..size - m);
            let cy = rng.random_range(m..size - m);
            // Bright and diffuse: two overlapping soft blobs.
            paint_blob(&mut canvas, (cx, cy), r, 0.25, delta * 0.8, rng, &mut extent);
            let off = r * 0.4;
            paint_blob(
                &mut canvas,
                (cx + off, cy - off * 0.5),
                r * 0.7,
                0.25,
                delta * 0.5,
                rng,
                &mut extent,
            );
            Some((extent.bbox(), vec![ClassId::EFFLORESCENCE]))
        }
        Some(_) => {
            // Corrosion stain: milder darkening with a mottled interior.
            let r = rng.random_range(cfg.blob_radius.0..=cfg.blob_radius.1);
            let m = r * 1.5 + 4.0;
            let cx = rng.random_range(m..size - m);
            let cy = rng.random_range(m..size - m);
            paint_blob(&mut canvas, (cx, cy), r, 0.3, -delta * 0.55, rng, &mut extent);
            for _ in 0..5 {
                let ox = rng.random_range(-r * 0.5..r * 0.5);
                let oy = rng.random_range(-r * 0.5..r * 0.5);
                let mut sub = Extent::default();
                paint_blob(
                    &mut canvas,
                    (cx + ox, cy + oy),
                    r * 0.25,
                    0.4,
                    -delta * 0.35,
                    rng,
                    &mut sub,
                );
            }
            Some((extent.bbox(), vec![ClassId::CORROSION_STAIN]))
        }
    };
    (canvas.quantize(), gt)
}

/// A generated dataset: manifest entries plus ground truth, both already
/// written to `dir` by `generate_dataset`.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub ground_truth: Vec<GroundTruthBox>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

/// Generate the dataset under `dir`: one PGM per image, `manifest.csv`,
/// and `ground_truth.jsonl`. Deterministic for a fixed config.
pub fn generate_dataset(dir: &Path, cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let defect_total: usize = cfg.counts.iter().sum();
    let background_count = (defect_total as f64 * cfg.background_fraction).round() as usize;
    let mut plan: Vec<(String, Option<ClassId>)> = Vec::new();
    for class in ClassId::defect_classes() {
        let idx = class.defect_index().expect("defect class");
        for i in 0..cfg.counts[idx] {
            let id = format!("{}_{i:04}", class.name().replace(' ', "_"));
            plan.push((id, Some(class)));
        }
    }
    for i in 0..background_count {
        plan.push((format!("background_{i:04}"), None));
    }

    let mut ground_truth = Vec::new();
    for (id, class) in &plan {
        let (img, gt) = render_image(cfg, *class, &mut rng);
        save_image(&img, &dir.join(format!("{id}.pgm")))?;
        if let Some((bbox, labels)) = gt {
            debug_assert!(bbox.fits_in(cfg.size as usize, cfg.size as usize));
            ground_truth.push(GroundTruthBox::new(id.clone(), bbox, labels)?);
        }
    }

    // Seeded split assignment: shuffle ids, then cut by the ratios.
    let mut order: Vec<usize> = (0..plan.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let n = plan.len();
    let n_train = (n as f64 * cfg.split_ratios.0).round() as usize;
    let n_val = (n as f64 * cfg.split_ratios.1).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < (n_train + n_val).min(n) {
            Split::Val
        } else {
            Split::Test
        };
    }

    let entries: Vec<ManifestEntry> = plan
        .iter()
        .zip(&splits)
        .map(|((id, _), &split)| ManifestEntry {
            image_id: id.clone(),
            path: dir.join(format!("{id}.pgm")),
            split,
        })
        .collect();
    let manifest = DatasetManifest { entries };
    save_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
    save_ground_truth(&ground_truth, &dir.join(GROUND_TRUTH_FILE))?;
    Ok(SynthDataset {
        manifest,
        ground_truth,
    })
}

/// Labeled 64x64 patches rendered directly at patch scale, `per_class`
/// for each of the six classes (background included). Deterministic.
pub fn patch_corpus(per_class: usize, seed: u64) -> Vec<(Vec<f64>, ClassId)> {
    let cfg = SynthConfig {
        size: PATCH as u32,
        crack_span: (30.0, 52.0),
        blob_radius: (8.0, 14.0),
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * 6);
    for k in 0..6u8 {
        let class = ClassId::new(k).unwrap();
        for _ in 0..per_class {
            let (img, _) = render_image(
                &cfg,
                (!class.is_background()).then_some(class),
                &mut rng,
            );
            let patch: Vec<f64> = img.pixels().iter().map(|&p| p as f64 / 255.0).collect();
            out.push((patch, class));
        }
    }
    out
}
