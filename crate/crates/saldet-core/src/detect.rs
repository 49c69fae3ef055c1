//! Multi-label detections, per-class NMS, the sliding-window reference
//! detector, and saliency-coverage pruning.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{BBox, Image, NUM_DEFECT_CLASSES};
use crate::proposals::{otsu_threshold, FusedMap};
use crate::saliency::net::Scratch;
use crate::saliency::{softmax, PatchClassifier, PATCH};

/// One box with a score per defect class (background has no box score).
/// A zero score means the class is absent for this box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub scores: [f64; NUM_DEFECT_CLASSES],
}

impl Detection {
    pub fn new(image_id: String, bbox: BBox, scores: [f64; NUM_DEFECT_CLASSES]) -> Result<Detection> {
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("detection scores must lie in [0,1]"));
        }
        if scores.iter().all(|&s| s == 0.0) {
            return Err(Error::invalid("detection must carry at least one positive score"));
        }
        Ok(Detection {
            image_id,
            bbox,
            scores,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub score_floor: f64,
}

impl Default for NmsConfig {
    fn default() -> NmsConfig {
        NmsConfig {
            iou_threshold: 0.45,
            score_floor: 0.05,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("nms.iou_threshold", self.iou_threshold),
            ("nms.score_floor", self.score_floor),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::config(format!("{name} must lie in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Per-class greedy NMS. For each class independently: drop scores below
/// the floor, order by score descending (ties keep input order), keep a
/// box and suppress later same-image boxes with IoU above the threshold.
/// Survivors are reassembled per box with suppressed class scores zeroed;
/// boxes left with no surviving class are dropped. Output preserves input
/// order.
pub fn nms_per_class(dets: &[Detection], cfg: &NmsConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut kept_scores: Vec<[f64; NUM_DEFECT_CLASSES]> =
        vec![[0.0; NUM_DEFECT_CLASSES]; dets.len()];
    for c in 0..NUM_DEFECT_CLASSES {
        let mut order: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].scores[c] >= cfg.score_floor && dets[i].scores[c] > 0.0)
            .collect();
        order.sort_by(|&a, &b| {
            dets[b].scores[c]
                .partial_cmp(&dets[a].scores[c])
                .expect("finite scores")
        });
        let mut kept: Vec<usize> = Vec::new();
        'cand: for &i in &order {
            for &k in &kept {
                if dets[k].image_id == dets[i].image_id
                    && dets[k].bbox.iou(&dets[i].bbox) > cfg.iou_threshold
                {
                    continue 'cand;
                }
            }
            kept.push(i);
            kept_scores[i][c] = dets[i].scores[c];
        }
    }
    Ok(dets
        .iter()
        .enumerate()
        .filter(|(i, _)| kept_scores[*i].iter().any(|&s| s > 0.0))
        .map(|(i, d)| Detection {
            image_id: d.image_id.clone(),
            bbox: d.bbox,
            scores: kept_scores[i],
        })
        .collect())
}

/// Slide a 64x64 window over the image at `stride`, classify each window,
/// and emit a window-sized detection wherever the strongest defect
/// probability reaches `score_floor`; finish with per-class NMS. The last
/// row/column of windows is clamped to the image edge.
pub fn detect_reference(
    image_id: &str,
    img: &Image,
    clf: &PatchClassifier,
    stride: u32,
    score_floor: f64,
    nms: &NmsConfig,
) -> Result<Vec<Detection>> {
    crate::morphology::require_grayscale(img)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < PATCH || h < PATCH {
        return Err(Error::invalid(format!(
            "image {w}x{h} is smaller than one {PATCH}x{PATCH} window"
        )));
    }
    if stride == 0 || stride as usize > PATCH {
        return Err(Error::config(format!(
            "detector stride must lie in 1..={PATCH}, got {stride}"
        )));
    }
    if !(0.0..=1.0).contains(&score_floor) || !score_floor.is_finite() {
        return Err(Error::config("detector score_floor must lie in [0,1]"));
    }
    let starts = |len: usize| {
        let mut v = Vec::new();
        let mut s = 0;
        while s + PATCH <= len {
            v.push(s);
            s += stride as usize;
        }
        let last = len - PATCH;
        if *v.last().expect("len >= PATCH") != last {
            v.push(last);
        }
        v
    };
    let mut scratch = Scratch::new();
    let mut patch = vec![0.0; PATCH * PATCH];
    let mut dets = Vec::new();
    for &y0 in &starts(h) {
        for &x0 in &starts(w) {
            for py in 0..PATCH {
                let src = (y0 + py) * w + x0;
                for px in 0..PATCH {
                    patch[py * PATCH + px] = img.pixels()[src + px] as f64 / 255.0;
                }
            }
            let probs = softmax(&scratch.forward(clf, &patch));
            let mut scores = [0.0; NUM_DEFECT_CLASSES];
            scores.copy_from_slice(&probs[1..]);
            let best = scores.iter().cloned().fold(0.0f64, f64::max);
            if best >= score_floor && best > 0.0 {
                dets.push(Detection {
                    image_id: image_id.to_string(),
                    bbox: BBox::new(x0 as u32, y0 as u32, PATCH as u32, PATCH as u32)?,
                    scores,
                });
            }
        }
    }
    nms_per_class(&dets, nms)
}

/// Drop detections whose boxes cover too little salient area: the
/// fraction of pixels above the fused map's Otsu threshold inside the box
/// must reach `coverage_floor`.
pub fn prune_by_saliency(
    dets: &[Detection],
    fused: &FusedMap,
    coverage_floor: f64,
) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&coverage_floor) || !coverage_floor.is_finite() {
        return Err(Error::config("coverage_floor must lie in [0,1]"));
    }
    let map = fused.map();
    let (w, h) = (map.width(), map.height());
    let t = otsu_threshold(map);
    let mut out = Vec::new();
    for d in dets {
        if !d.bbox.fits_in(w, h) {
            return Err(Error::invalid(format!(
                "detection box ({},{},{},{}) lies outside the {}x{} fused map",
                d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, w, h
            )));
        }
        let mut above = 0u64;
        for y in d.bbox.y..d.bbox.y1() {
            for x in d.bbox.x..d.bbox.x1() {
                if map.at(x as usize, y as usize) > t {
                    above += 1;
                }
            }
        }
        let frac = above as f64 / d.bbox.area() as f64;
        if frac >= coverage_floor {
            out.push(d.clone());
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct DetRecord {
    image_id: String,
    bbox: [u32; 4],
    scores: Vec<f64>,
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut out = Vec::new();
    for d in dets {
        let rec = DetRecord {
            image_id: d.image_id.clone(),
            bbox: [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
            scores: d.scores.to_vec(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Internal(e.to_string()))?;
        out.push(b'\n');
    }
    crate::imgio::write_atomic(path, &out)
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut dets = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lerr = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let line = line.map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetRecord =
            serde_json::from_str(&line).map_err(|e| lerr(e.to_string()))?;
        if rec.scores.len() != NUM_DEFECT_CLASSES {
            return Err(lerr(format!(
                "scores has {} entries, expected {NUM_DEFECT_CLASSES}",
                rec.scores.len()
            )));
        }
        let bbox = BBox::new(rec.bbox[0], rec.bbox[1], rec.bbox[2], rec.bbox[3])
            .map_err(|e| lerr(e.to_string()))?;
        let mut scores = [0.0; NUM_DEFECT_CLASSES];
        scores.copy_from_slice(&rec.scores);
        dets.push(Detection::new(rec.image_id, bbox, scores).map_err(|e| lerr(e.to_string()))?);
    }
    Ok(dets)
}
