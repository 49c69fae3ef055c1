//! Greedy detection matching, precision/recall, average precision, and
//! report assembly.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::{Detection, NmsConfig};
use crate::error::{Error, Result};
use crate::imgio::{ClassId, GroundTruthBox, CLASS_NAMES, NUM_DEFECT_CLASSES};

/// Score-ordered match outcomes for one class at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (score, is_true_positive), sorted by score descending.
    pub scored: Vec<(f64, bool)>,
    pub gt_count: usize,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.scored.iter().filter(|(_, tp)| *tp).count()
    }

    pub fn fp(&self) -> usize {
        self.scored.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_count - self.tp()
    }
}

/// Greedy VOC-style matching for one defect class. Detections carrying a
/// positive score for the class are visited in descending score order
/// (ties keep input order); each matches the highest-IoU unmatched
/// ground-truth box of that class in its image, and counts as a true
/// positive when that IoU reaches `t`. Multi-label ground truth takes
/// part independently in every class it lists.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    t: f64,
    class: ClassId,
) -> MatchResult {
    let c = match class.defect_index() {
        Some(c) => c,
        None => {
            return MatchResult {
                scored: Vec::new(),
                gt_count: 0,
            }
        }
    };
    // Ground-truth instances of this class, grouped per image.
    let mut gt_by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut gt_count = 0usize;
    for (i, gt) in gts.iter().enumerate() {
        if gt.labels.contains(&class) {
            gt_by_image.entry(gt.image_id.as_str()).or_default().push(i);
            gt_count += 1;
        }
    }
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].scores[c] > 0.0)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b].scores[c]
            .partial_cmp(&dets[a].scores[c])
            .expect("finite scores")
    });
    let mut matched = vec![false; gts.len()];
    let mut scored = Vec::with_capacity(order.len());
    for &i in &order {
        let det = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gt_by_image.get(det.image_id.as_str()) {
            for &g in cands {
                if matched[g] {
                    continue;
                }
                let iou = det.bbox.iou(&gts[g].bbox);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
        }
        let is_tp = match best {
            Some((g, iou)) if iou >= t => {
                matched[g] = true;
                true
            }
            _ => false,
        };
        scored.push((dets[i].scores[c], is_tp));
    }
    MatchResult { scored, gt_count }
}

/// Eqs. 3-4 with the empty-set conventions: precision is 1 when no
/// detections were made, recall is 0 when there is nothing to recall.
pub fn precision_recall(m: &MatchResult) -> (f64, f64) {
    let tp = m.tp();
    let precision = if m.scored.is_empty() {
        1.0
    } else {
        tp as f64 / m.scored.len() as f64
    };
    let recall = if m.gt_count == 0 {
        0.0
    } else {
        tp as f64 / m.gt_count as f64
    };
    (precision, recall)
}

/// PR curve points (recall, precision) swept over the score-sorted list.
pub fn pr_curve(m: &MatchResult) -> Vec<(f64, f64)> {
    let mut points = Vec::with_capacity(m.scored.len());
    let mut tp = 0usize;
    for (rank, &(_, is_tp)) in m.scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = if m.gt_count == 0 {
            0.0
        } else {
            tp as f64 / m.gt_count as f64
        };
        points.push((recall, precision));
    }
    points
}

/// All-points average precision: precision envelope (max over equal or
/// higher recall), summed as recall-step x envelope height. `None` when
/// the class never occurs in the ground truth.
pub fn average_precision(m: &MatchResult) -> Option<f64> {
    if m.gt_count == 0 {
        return None;
    }
    let points = pr_curve(m);
    if points.is_empty() {
        return Some(0.0);
    }
    // Envelope from the right: env[i] = max precision over points i..
    let mut env = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        env[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * env[i];
            prev_recall = recall;
        }
    }
    Some(ap)
}

/// Arithmetic mean over the defect classes whose AP is defined. Classes
/// without ground truth are skipped with a warning; all-undefined is an
/// error.
pub fn mean_ap(aps: &[Option<f64>; NUM_DEFECT_CLASSES]) -> Result<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid(
            "mAP undefined: no defect class appears in the ground truth",
        ));
    }
    if defined.len() < NUM_DEFECT_CLASSES {
        let missing: Vec<&str> = aps
            .iter()
            .enumerate()
            .filter(|(_, ap)| ap.is_none())
            .map(|(i, _)| CLASS_NAMES[i + 1])
            .collect();
        eprintln!(
            "warning: classes absent from ground truth excluded from mAP: {}",
            missing.join(", ")
        );
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Also report the COCO-style mean over IoU 0.5:0.05:0.95.
    pub coco_average: bool,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            thresholds: vec![0.5, 0.75, 0.95],
            coco_average: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::config("eval.thresholds must not be empty"));
        }
        if self
            .thresholds
            .iter()
            .any(|t| !(0.0..=1.0).contains(t) || !t.is_finite())
        {
            return Err(Error::config("eval.thresholds must lie in [0,1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub iou_threshold: f64,
    /// Per defect class, `null` when the class has no ground truth.
    pub ap_per_class: [Option<f64>; NUM_DEFECT_CLASSES],
    pub map: Option<f64>,
    pub pr_curves: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_threshold: Vec<ThresholdReport>,
    /// COCO-style average of mAP over IoU 0.5:0.05:0.95, when requested.
    pub map_coco: Option<f64>,
    /// NMS settings echoed by the caller, when known.
    pub nms: Option<NmsConfig>,
    pub detections: usize,
    pub ground_truth_boxes: usize,
}

/// Run matching, AP, and mAP at each threshold and assemble the report.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    cfg: &EvalConfig,
    nms_echo: Option<NmsConfig>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut per_threshold = Vec::with_capacity(cfg.thresholds.len());
    for &t in &cfg.thresholds {
        per_threshold.push(threshold_report(dets, gts, t)?);
    }
    let map_coco = if cfg.coco_average {
        let mut maps = Vec::new();
        for i in 0..10 {
            let t = 0.5 + 0.05 * i as f64;
            if let Some(map) = threshold_report(dets, gts, t)?.map {
                maps.push(map);
            }
        }
        if maps.is_empty() {
            None
        } else {
            Some(maps.iter().sum::<f64>() / maps.len() as f64)
        }
    } else {
        None
    };
    Ok(EvalReport {
        class_names: CLASS_NAMES[1..].iter().map(|s| s.to_string()).collect(),
        per_threshold,
        map_coco,
        nms: nms_echo,
        detections: dets.len(),
        ground_truth_boxes: gts.len(),
    })
}

fn threshold_report(dets: &[Detection], gts: &[GroundTruthBox], t: f64) -> Result<ThresholdReport> {
    let mut ap_per_class = [None; NUM_DEFECT_CLASSES];
    let mut pr_curves = Vec::with_capacity(NUM_DEFECT_CLASSES);
    for c in 0..NUM_DEFECT_CLASSES {
        let class = ClassId::new(c as u8 + 1)?;
        let m = match_detections(dets, gts, t, class);
        ap_per_class[c] = average_precision(&m);
        pr_curves.push(pr_curve(&m));
    }
    let map = mean_ap(&ap_per_class).ok();
    Ok(ThresholdReport {
        iou_threshold: t,
        ap_per_class,
        map,
        pr_curves,
    })
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_vec_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        crate::imgio::write_atomic(path, &json)
    }

    pub fn load_json(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: 1,
            msg: e.to_string(),
        })
    }

    /// Plain-text table, one AP column per IoU threshold.
    pub fn render_text(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "n/a".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!("{:<18}", "class"));
        for tr in &self.per_threshold {
            out.push_str(&format!("{:>10}", format!("AP@{}", tr.iou_threshold)));
        }
        out.push('\n');
        for (c, name) in self.class_names.iter().enumerate() {
            out.push_str(&format!("{name:<18}"));
            for tr in &self.per_threshold {
                out.push_str(&format!("{:>10}", fmt(tr.ap_per_class[c])));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<18}", "mAP"));
        for tr in &self.per_threshold {
            out.push_str(&format!("{:>10}", fmt(tr.map)));
        }
        out.push('\n');
        if let Some(coco) = self.map_coco {
            out.push_str(&format!("mAP@[0.5:0.95]    {coco:>10.4}\n"));
        }
        out.push_str(&format!(
            "detections: {}  ground-truth boxes: {}\n",
            self.detections, self.ground_truth_boxes
        ));
        out
    }

    /// PR samples as CSV files `pr_<class>_<threshold>.csv` in `dir`.
    pub fn save_pr_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Write {
            path: dir.to_path_buf(),
            source,
        })?;
        for tr in &self.per_threshold {
            for (c, curve) in tr.pr_curves.iter().enumerate() {
                let mut csv = String::from("recall,precision\n");
                for (r, p) in curve {
                    csv.push_str(&format!("{r},{p}\n"));
                }
                let name = format!(
                    "pr_{}_{}.csv",
                    self.class_names[c].replace(' ', "_"),
                    tr.iou_threshold
                );
                crate::imgio::write_atomic(&dir.join(name), csv.as_bytes())?;
            }
        }
        Ok(())
    }
}
