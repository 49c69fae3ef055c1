//! End-to-end orchestration: saliency, region proposals, enhancement,
//! detection, pruning, and evaluation over a dataset manifest.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{
    detect_reference, load_detections, nms_per_class, prune_by_saliency, save_detections,
    Detection, NmsConfig,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::imgio::{
    load_ground_truth, load_image, load_manifest, save_image, to_grayscale, write_atomic,
    GroundTruthBox, Image, Split,
};
use crate::morphology::{linearity_map, SeShape, StructuringElement};
use crate::proposals::{
    enhance, fuse_maps, propose_boxes, save_proposals, ProposalConfig, ProposalRecord,
};
use crate::saliency::{image_saliency, PatchClassifier, SmoothGradConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub ground_truth: PathBuf,
    pub out_dir: PathBuf,
    /// Saliency classifier checkpoint.
    pub checkpoint: PathBuf,
    /// Reference-detector checkpoint; defaults to `checkpoint`.
    pub detector_checkpoint: Option<PathBuf>,
    /// External detections (JSON-lines) computed on the enhanced images;
    /// replaces the reference detector when set.
    pub external_detections: Option<PathBuf>,
    pub se: StructuringElement,
    pub smoothgrad: SmoothGradConfig,
    pub saliency_stride: u32,
    pub proposal: ProposalConfig,
    pub nms: NmsConfig,
    pub detector_stride: u32,
    pub detector_score_floor: f64,
    pub coverage_floor: f64,
    pub eval: EvalConfig,
    /// Bypass saliency, proposals, enhancement, and pruning: the detector
    /// sees the raw grayscale image (the A/B comparison arm).
    pub no_saliency: bool,
    /// Also write per-class PR curves as CSV.
    pub write_pr_csv: bool,
    /// Worker threads for per-image parallelism; 0 uses the default.
    pub threads: usize,
}

impl PipelineConfig {
    /// Defaults for everything but the four paths.
    pub fn new(
        manifest: PathBuf,
        ground_truth: PathBuf,
        out_dir: PathBuf,
        checkpoint: PathBuf,
    ) -> PipelineConfig {
        PipelineConfig {
            manifest,
            ground_truth,
            out_dir,
            checkpoint,
            detector_checkpoint: None,
            external_detections: None,
            se: StructuringElement {
                shape: SeShape::Disk,
                radius: 3,
            },
            smoothgrad: SmoothGradConfig::default(),
            saliency_stride: 32,
            proposal: ProposalConfig::default(),
            nms: NmsConfig::default(),
            detector_stride: 32,
            detector_score_floor: 0.5,
            coverage_floor: 0.05,
            eval: EvalConfig::default(),
            no_saliency: false,
            write_pr_csv: false,
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.smoothgrad.validate()?;
        self.proposal.validate()?;
        self.nms.validate()?;
        self.eval.validate()?;
        if !(0.0..=1.0).contains(&self.detector_score_floor) {
            return Err(Error::config("detector_score_floor must lie in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.coverage_floor) {
            return Err(Error::config("coverage_floor must lie in [0,1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub processed: usize,
    pub failed: usize,
    pub failures: Vec<ImageFailure>,
    pub eval: EvalReport,
}

struct Stages<'a> {
    cfg: &'a PipelineConfig,
    saliency_clf: &'a PatchClassifier,
    detector_clf: &'a PatchClassifier,
    external: Option<&'a [Detection]>,
}

/// Run every stage for one test image and return its detections.
fn process_image(
    stages: &Stages,
    image_id: &str,
    path: &Path,
    gts: &[&GroundTruthBox],
) -> Result<Vec<Detection>> {
    let cfg = stages.cfg;
    let img = load_image(path)?;
    let gray = to_grayscale(&img);
    for gt in gts {
        if !gt
            .bbox
            .fits_in(gray.width() as usize, gray.height() as usize)
        {
            return Err(Error::invalid(format!(
                "ground-truth box ({},{},{},{}) escapes {}x{} image",
                gt.bbox.x,
                gt.bbox.y,
                gt.bbox.w,
                gt.bbox.h,
                gray.width(),
                gray.height()
            )));
        }
    }

    let detector_input;
    let fused_for_prune;
    if cfg.no_saliency {
        detector_input = gray;
        fused_for_prune = None;
    } else {
        let sal = image_saliency(
            stages.saliency_clf,
            &gray,
            &cfg.smoothgrad,
            cfg.saliency_stride,
        )?;
        let lin = linearity_map(&gray, &cfg.se)?;
        let fused = fuse_maps(&sal, &lin)?.with_context(cfg.se.radius, cfg.smoothgrad);
        let props = propose_boxes(&fused, &cfg.proposal)?;
        let boxes: Vec<_> = props.iter().map(|p| p.bbox).collect();
        let enhanced = enhance(&gray, &boxes, cfg.proposal.brightness_gain)?;

        fused.map().save_raw(&cfg.out_dir.join(format!("fused/{image_id}.raw")))?;
        fused.map().save_pgm(&cfg.out_dir.join(format!("fused/{image_id}.pgm")))?;
        save_image(
            &enhanced,
            &cfg.out_dir.join(format!("enhanced/{image_id}.pgm")),
        )?;
        let records: Vec<ProposalRecord> = props
            .iter()
            .map(|p| ProposalRecord::new(image_id, p))
            .collect();
        save_proposals(
            &cfg.out_dir.join(format!("proposals/{image_id}.jsonl")),
            &records,
        )?;

        detector_input = enhanced;
        fused_for_prune = Some(fused);
    }

    let dets = match stages.external {
        Some(all) => {
            let mine: Vec<Detection> = all
                .iter()
                .filter(|d| d.image_id == image_id)
                .cloned()
                .collect();
            nms_per_class(&mine, &cfg.nms)?
        }
        None => detect_reference(
            image_id,
            &detector_input,
            stages.detector_clf,
            cfg.detector_stride,
            cfg.detector_score_floor,
            &cfg.nms,
        )?,
    };
    match &fused_for_prune {
        Some(fused) => prune_by_saliency(&dets, fused, cfg.coverage_floor),
        None => Ok(dets),
    }
}

/// Run the full pipeline over the manifest's test split and evaluate.
/// Per-image failures are logged, counted, and do not abort the run.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.manifest)?;
    let all_gts = load_ground_truth(&cfg.ground_truth)?;
    let saliency_clf = PatchClassifier::load(&cfg.checkpoint)?;
    let detector_clf = match &cfg.detector_checkpoint {
        Some(path) => PatchClassifier::load(path)?,
        None => saliency_clf.clone(),
    };
    let external = match &cfg.external_detections {
        Some(path) => Some(load_detections(path)?),
        None => None,
    };
    for sub in ["fused", "enhanced", "proposals"] {
        let dir = cfg.out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|source| Error::Write { path: dir, source })?;
    }

    let test_entries: Vec<_> = manifest.split(Split::Test).collect();
    if test_entries.is_empty() {
        eprintln!("warning: manifest has no test-split images; report is empty");
    }
    let test_gts: Vec<GroundTruthBox> = all_gts
        .iter()
        .filter(|gt| test_entries.iter().any(|e| e.image_id == gt.image_id))
        .cloned()
        .collect();

    let stages = Stages {
        cfg,
        saliency_clf: &saliency_clf,
        detector_clf: &detector_clf,
        external: external.as_deref(),
    };
    let work = |entries: &[&crate::imgio::ManifestEntry]| -> Vec<(String, Result<Vec<Detection>>)> {
        entries
            .par_iter()
            .map(|entry| {
                let gts: Vec<&GroundTruthBox> = test_gts
                    .iter()
                    .filter(|gt| gt.image_id == entry.image_id)
                    .collect();
                let outcome = process_image(&stages, &entry.image_id, &entry.path, &gts);
                (entry.image_id.clone(), outcome)
            })
            .collect()
    };
    let outcomes = if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?;
        pool.install(|| work(&test_entries))
    } else {
        work(&test_entries)
    };

    let mut detections = Vec::new();
    let mut failures = Vec::new();
    for (image_id, outcome) in outcomes {
        match outcome {
            Ok(dets) => detections.extend(dets),
            Err(e) => {
                eprintln!("warning: {image_id} failed: {e}");
                failures.push(ImageFailure {
                    image_id,
                    error: e.to_string(),
                });
            }
        }
    }

    save_detections(&cfg.out_dir.join("detections.jsonl"), &detections)?;
    let eval_report = evaluate(&detections, &test_gts, &cfg.eval, Some(cfg.nms))?;
    eval_report.save_json(&cfg.out_dir.join("report.json"))?;
    write_atomic(
        &cfg.out_dir.join("report.txt"),
        eval_report.render_text().as_bytes(),
    )?;
    if cfg.write_pr_csv {
        eval_report.save_pr_csv(&cfg.out_dir.join("pr"))?;
    }

    let run = RunReport {
        processed: test_entries.len() - failures.len(),
        failed: failures.len(),
        failures,
        eval: eval_report,
    };
    // The provenance file is itself a valid pipeline config: feeding it back
    // through `--config` reproduces the run. The two counters are ignored on
    // deserialization.
    let mut provenance =
        serde_json::to_value(cfg).map_err(|e| Error::Internal(e.to_string()))?;
    provenance["processed"] = serde_json::json!(run.processed);
    provenance["failed"] = serde_json::json!(run.failed);
    write_atomic(
        &cfg.out_dir.join("provenance.json"),
        serde_json::to_string_pretty(&provenance)
            .map_err(|e| Error::Internal(e.to_string()))?
            .as_bytes(),
    )?;
    Ok(run)
}

/// Convenience for tests and the smoke script: run one image through the
/// saliency-side stages without touching the filesystem.
pub fn enhance_image(
    clf: &PatchClassifier,
    img: &Image,
    cfg: &PipelineConfig,
) -> Result<(Image, Vec<ProposalRecord>)> {
    let gray = to_grayscale(img);
    let sal = image_saliency(clf, &gray, &cfg.smoothgrad, cfg.saliency_stride)?;
    let lin = linearity_map(&gray, &cfg.se)?;
    let fused = fuse_maps(&sal, &lin)?;
    let props = propose_boxes(&fused, &cfg.proposal)?;
    let boxes: Vec<_> = props.iter().map(|p| p.bbox).collect();
    let enhanced = enhance(&gray, &boxes, cfg.proposal.brightness_gain)?;
    let records = props.iter().map(|p| ProposalRecord::new("", p)).collect();
    Ok((enhanced, records))
}
