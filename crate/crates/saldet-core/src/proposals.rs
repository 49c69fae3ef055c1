//! Map fusion D(x) = M(x) + |x - F(x)|, salient-region box extraction,
//! and bounding-box brightness enhancement.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{BBox, Image};
use crate::morphology::FloatMap;
use crate::saliency::SmoothGradConfig;

/// Fusion provenance: the normalization constants consumed by `fuse_maps`
/// plus the upstream settings the caller chooses to record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseInfo {
    pub m_range: (f64, f64),
    pub l_range: (f64, f64),
    pub sum_range: (f64, f64),
    pub se_radius: Option<u32>,
    pub smoothgrad: Option<SmoothGradConfig>,
}

/// Fused saliency/linearity map in [0,1] with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMap {
    map: FloatMap,
    info: FuseInfo,
}

impl FusedMap {
    pub fn map(&self) -> &FloatMap {
        &self.map
    }

    pub fn into_map(self) -> FloatMap {
        self.map
    }

    pub fn info(&self) -> &FuseInfo {
        &self.info
    }

    /// Record where the fused inputs came from.
    pub fn with_context(mut self, se_radius: u32, smoothgrad: SmoothGradConfig) -> FusedMap {
        self.info.se_radius = Some(se_radius);
        self.info.smoothgrad = Some(smoothgrad);
        self
    }

    /// Wrap an already-normalized map (e.g. reloaded from disk) without
    /// fusion provenance.
    pub fn from_normalized(map: FloatMap) -> Result<FusedMap> {
        let (lo, hi) = map.min_max();
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::invalid(format!(
                "fused map values must lie in [0,1], found range [{lo}, {hi}]"
            )));
        }
        let range = (lo, hi);
        Ok(FusedMap {
            map,
            info: FuseInfo {
                m_range: range,
                l_range: range,
                sum_range: range,
                se_radius: None,
                smoothgrad: None,
            },
        })
    }
}

/// Eq. 2 with scale alignment: min-max normalize each input independently
/// (a constant input becomes zeros), sum, and normalize the sum to [0,1].
pub fn fuse_maps(m: &FloatMap, l: &FloatMap) -> Result<FusedMap> {
    if m.width() != l.width() || m.height() != l.height() {
        return Err(Error::invalid(format!(
            "fuse_maps dimension mismatch: {}x{} vs {}x{}",
            m.width(),
            m.height(),
            l.width(),
            l.height()
        )));
    }
    let m_range = m.min_max();
    let l_range = l.min_max();
    let mn = m.normalized();
    let ln = l.normalized();
    let sum: Vec<f64> = mn
        .values()
        .iter()
        .zip(ln.values())
        .map(|(a, b)| a + b)
        .collect();
    let sum = FloatMap::new(m.width(), m.height(), sum)?;
    let sum_range = sum.min_max();
    Ok(FusedMap {
        map: sum.normalized(),
        info: FuseInfo {
            m_range,
            l_range,
            sum_range,
            se_radius: None,
            smoothgrad: None,
        },
    })
}

pub const OTSU_BINS: usize = 256;

/// Histogram bin for a value in [0,1].
fn otsu_bin(v: f64) -> usize {
    ((v * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Otsu threshold over a 256-bin histogram of [0,1]. Returns the bin edge
/// k/256 maximizing between-class variance, ties broken toward the lower
/// edge; a constant map yields 0.
pub fn otsu_threshold(map: &FloatMap) -> f64 {
    let mut hist = [0u64; OTSU_BINS];
    for &v in map.values() {
        hist[otsu_bin(v)] += 1;
    }
    let total = map.values().len() as f64;
    let mut weighted_total = 0.0;
    for (b, &n) in hist.iter().enumerate() {
        weighted_total += b as f64 * n as f64;
    }
    // Class 0 holds bins < k; sweep k accumulating its mass and sum.
    let mut best_k = 0usize;
    let mut best_var = 0.0f64;
    let mut n0 = 0.0;
    let mut sum0 = 0.0;
    for k in 0..OTSU_BINS {
        if k > 0 {
            n0 += hist[k - 1] as f64;
            sum0 += (k - 1) as f64 * hist[k - 1] as f64;
        }
        let n1 = total - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / n0;
        let mu1 = (weighted_total - sum0) / n1;
        let var = (n0 / total) * (n1 / total) * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    best_k as f64 / OTSU_BINS as f64
}

/// One 8-connected region of set pixels, row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<(u32, u32)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Tight bounding box.
    pub fn bbox(&self) -> BBox {
        let mut x0 = u32::MAX;
        let mut y0 = u32::MAX;
        let mut x1 = 0u32;
        let mut y1 = 0u32;
        for &(x, y) in &self.pixels {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        BBox {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        }
    }
}

/// 8-connectivity labeling. Components come back in decreasing pixel
/// count, ties broken by the smallest row-major first pixel.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Result<Vec<Component>> {
    if mask.len() != width * height {
        return Err(Error::invalid(format!(
            "mask has {} entries for {}x{}",
            mask.len(),
            width,
            height
        )));
    }
    let mut parent: Vec<u32> = (0..mask.len() as u32).collect();
    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }
    let unite = |parent: &mut [u32], a: u32, b: u32| {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            // Smaller root index wins so representatives are stable.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi as usize] = lo;
        }
    };
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            let link = |dx: i64, dy: i64, parent: &mut Vec<u32>| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                    let j = ny as usize * width + nx as usize;
                    if mask[j] {
                        unite(parent, i as u32, j as u32);
                    }
                }
            };
            // Neighbors already visited in row-major order.
            link(-1, 0, &mut parent);
            link(-1, -1, &mut parent);
            link(0, -1, &mut parent);
            link(1, -1, &mut parent);
        }
    }
    let mut groups: std::collections::BTreeMap<u32, Vec<(u32, u32)>> =
        std::collections::BTreeMap::new();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if mask[i] {
                let root = find(&mut parent, i as u32);
                groups
                    .entry(root)
                    .or_default()
                    .push((x as u32, y as u32));
            }
        }
    }
    // BTreeMap iteration gives ascending first-pixel order already; sort
    // by decreasing area, stably, to get the tie rule for free.
    let mut comps: Vec<Component> = groups
        .into_values()
        .map(|pixels| Component { pixels })
        .collect();
    comps.sort_by_key(|c| std::cmp::Reverse(c.area()));
    Ok(comps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Otsu,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub threshold_mode: ThresholdMode,
    /// Minimum component pixel count.
    pub min_area: usize,
    pub pad: u32,
    pub merge_iou: f64,
    pub brightness_gain: f64,
}

impl Default for ProposalConfig {
    fn default() -> ProposalConfig {
        ProposalConfig {
            threshold_mode: ThresholdMode::Otsu,
            min_area: 25,
            pad: 4,
            merge_iou: 0.3,
            brightness_gain: 1.25,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if let ThresholdMode::Fixed(t) = self.threshold_mode {
            if !(0.0..=1.0).contains(&t) || !t.is_finite() {
                return Err(Error::config("proposal threshold must lie in [0,1]"));
            }
        }
        if self.min_area < 1 {
            return Err(Error::config("proposal.min_area must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.merge_iou) {
            return Err(Error::config("proposal.merge_iou must lie in [0,1)"));
        }
        if !self.brightness_gain.is_finite() || self.brightness_gain < 1.0 {
            return Err(Error::config("proposal.brightness_gain must be at least 1"));
        }
        Ok(())
    }
}

/// A proposed region with the maximum fused value inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

/// Binarize the fused map, label components, box the survivors, pad,
/// merge overlapping boxes to fixpoint, and score by maximum fused value.
pub fn propose_boxes(fused: &FusedMap, cfg: &ProposalConfig) -> Result<Vec<Proposal>> {
    cfg.validate()?;
    let map = fused.map();
    let (w, h) = (map.width(), map.height());
    let t = match cfg.threshold_mode {
        ThresholdMode::Otsu => otsu_threshold(map),
        ThresholdMode::Fixed(t) => t,
    };
    let mask: Vec<bool> = map.values().iter().map(|&v| v > t).collect();
    let comps = connected_components(&mask, w, h)?;
    let mut boxes: Vec<BBox> = comps
        .iter()
        .filter(|c| c.area() >= cfg.min_area)
        .map(|c| pad_clamped(c.bbox(), cfg.pad, w as u32, h as u32))
        .collect();

    // Fixpoint merge: union is monotone, so the final set is canonical.
    'merge: loop {
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if boxes[i].iou(&boxes[j]) > cfg.merge_iou {
                    let merged = boxes[i].union_box(&boxes[j]);
                    boxes.swap_remove(j);
                    boxes[i] = merged;
                    continue 'merge;
                }
            }
        }
        break;
    }

    boxes.sort_by_key(|b| (std::cmp::Reverse(b.area()), b.y, b.x));
    Ok(boxes
        .into_iter()
        .map(|bbox| {
            let mut score = 0.0f64;
            for y in bbox.y..bbox.y1() {
                for x in bbox.x..bbox.x1() {
                    score = score.max(map.at(x as usize, y as usize));
                }
            }
            Proposal { bbox, score }
        })
        .collect())
}

fn pad_clamped(b: BBox, pad: u32, width: u32, height: u32) -> BBox {
    let x0 = b.x.saturating_sub(pad);
    let y0 = b.y.saturating_sub(pad);
    let x1 = (b.x1() as u64 + pad as u64).min(width as u64) as u32;
    let y1 = (b.y1() as u64 + pad as u64).min(height as u64) as u32;
    BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

/// Brighten every pixel inside the union of `boxes`:
/// v -> clamp(round(v * gain), 0, 255) per channel. Pixels outside all
/// boxes are untouched.
pub fn enhance(img: &Image, boxes: &[BBox], gain: f64) -> Result<Image> {
    if !gain.is_finite() || gain < 1.0 {
        return Err(Error::invalid(format!("gain must be at least 1, got {gain}")));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    for b in boxes {
        if !b.fits_in(w, h) {
            return Err(Error::invalid(format!(
                "box ({},{},{},{}) lies outside {}x{} image",
                b.x, b.y, b.w, b.h, w, h
            )));
        }
    }
    let mut inside = vec![false; w * h];
    for b in boxes {
        for y in b.y as usize..b.y1() as usize {
            let row = y * w;
            inside[row + b.x as usize..row + b.x1() as usize].fill(true);
        }
    }
    let ch = img.channels() as usize;
    let mut out = img.clone();
    let pixels = out.pixels_mut();
    for i in 0..w * h {
        if inside[i] {
            for c in 0..ch {
                let v = pixels[i * ch + c] as f64;
                pixels[i * ch + c] = (v * gain).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// JSON-lines record for a proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: String,
    pub bbox: [u32; 4],
    pub score: f64,
}

impl ProposalRecord {
    pub fn new(image_id: &str, p: &Proposal) -> ProposalRecord {
        ProposalRecord {
            image_id: image_id.to_string(),
            bbox: [p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h],
            score: p.score,
        }
    }

    pub fn bbox(&self) -> Result<BBox> {
        BBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

pub fn save_proposals(path: &Path, records: &[ProposalRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Internal(e.to_string()))?;
        out.push(b'\n');
    }
    crate::imgio::write_atomic(path, &out)
}

pub fn load_proposals(path: &Path) -> Result<Vec<ProposalRecord>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProposalRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        rec.bbox().map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}
