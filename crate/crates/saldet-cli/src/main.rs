use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use saldet_core::config::{self, kv, kv_flag, read_overlay, Overlay};
use saldet_core::detect::{detect_reference, load_detections, nms_per_class, save_detections, NmsConfig};
use saldet_core::eval::{evaluate, EvalConfig};
use saldet_core::imgio::{
    load_ground_truth, load_image, load_manifest, save_image, to_grayscale, GroundTruthBox, Split,
};
use saldet_core::morphology::{linearity_map, SeShape, StructuringElement};
use saldet_core::pipeline::{run_pipeline, PipelineConfig};
use saldet_core::proposals::{
    enhance, fuse_maps, load_proposals, propose_boxes, save_proposals, ProposalConfig,
    ProposalRecord,
};
use saldet_core::saliency::{
    accuracy, image_saliency, train, PatchClassifier, SmoothGradConfig, TrainConfig,
};
use saldet_core::synth::{generate_dataset, SynthConfig};
use saldet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "saldet", version, about = "Saliency-guided defect detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic defect dataset.
    Synth(SynthArgs),
    /// Train the patch classifier on a dataset's train split.
    Train(TrainArgs),
    /// Compute a saliency map for one image.
    Saliency(SaliencyArgs),
    /// Propose defect boxes for one image.
    Propose(ProposeArgs),
    /// Brighten proposed regions of one image.
    Enhance(EnhanceArgs),
    /// Run the reference sliding-window detector on one image.
    DetectRef(DetectRefArgs),
    /// Apply per-class non-maximum suppression to a detection file.
    Nms(NmsArgs),
    /// Evaluate detections against ground truth.
    Eval(EvalArgs),
    /// Run the full pipeline over a dataset manifest.
    Pipeline(PipelineArgs),
}

/// Config file shared by all commands: JSON object with flat dotted keys
/// (nested objects work too); CLI flags override file entries.
#[derive(Args)]
struct ConfigFile {
    /// JSON config with dotted keys; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigFile {
    fn overlay(&self) -> Result<Overlay> {
        match &self.config {
            Some(path) => read_overlay(path),
            None => Ok(Overlay::new()),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigFile,
    /// Images per defect class, five comma-separated counts.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigFile,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Background patches sampled per training image.
    #[arg(long, default_value_t = 2)]
    negatives_per_image: usize,
    /// Read `{image_id}.pgm` from this directory instead of manifest paths.
    #[arg(long)]
    enhanced_dir: Option<PathBuf>,
    /// Accept a train split that lacks some classes.
    #[arg(long)]
    allow_missing_classes: bool,
    /// Also write the per-epoch loss trace as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Visualization output (PGM).
    #[arg(long)]
    out_pgm: PathBuf,
    /// Exact float output (little-endian f64 raster).
    #[arg(long)]
    out_raw: PathBuf,
    #[command(flatten)]
    config: ConfigFile,
    #[arg(long)]
    stride: Option<u32>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Saliency-side knobs shared by `propose` and single-image saliency.
#[derive(Serialize, Deserialize)]
struct SaliencyCfg {
    smoothgrad: SmoothGradConfig,
    stride: u32,
}

impl Default for SaliencyCfg {
    fn default() -> Self {
        SaliencyCfg {
            smoothgrad: SmoothGradConfig::default(),
            stride: 32,
        }
    }
}

#[derive(Args)]
struct ProposeArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Proposal output (JSON-lines).
    #[arg(long)]
    out: PathBuf,
    /// Image id recorded in the output; defaults to the file stem.
    #[arg(long)]
    image_id: Option<String>,
    #[command(flatten)]
    config: ConfigFile,
    /// Structuring element shape: square or disk.
    #[arg(long)]
    se_shape: Option<String>,
    #[arg(long)]
    se_radius: Option<u32>,
    #[arg(long)]
    stride: Option<u32>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_area: Option<usize>,
    #[arg(long)]
    pad: Option<u32>,
    #[arg(long)]
    merge_iou: Option<f64>,
    /// Also write the fused saliency map as PGM.
    #[arg(long)]
    fused_pgm: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct ProposeCfg {
    se: StructuringElement,
    smoothgrad: SmoothGradConfig,
    stride: u32,
    proposal: ProposalConfig,
}

impl Default for ProposeCfg {
    fn default() -> Self {
        ProposeCfg {
            se: StructuringElement {
                shape: SeShape::Disk,
                radius: 3,
            },
            smoothgrad: SmoothGradConfig::default(),
            stride: 32,
            proposal: ProposalConfig::default(),
        }
    }
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    image: PathBuf,
    /// Proposal file (JSON-lines) supplying the boxes.
    #[arg(long)]
    proposals: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use only proposals with this image id; default uses every record.
    #[arg(long)]
    image_id: Option<String>,
    #[command(flatten)]
    config: ConfigFile,
    #[arg(long)]
    gain: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct EnhanceCfg {
    gain: f64,
}

#[derive(Args)]
struct DetectRefArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Detection output (JSON-lines).
    #[arg(long)]
    out: PathBuf,
    /// Image id recorded in the output; defaults to the file stem.
    #[arg(long)]
    image_id: Option<String>,
    #[command(flatten)]
    config: ConfigFile,
    #[arg(long)]
    stride: Option<u32>,
    /// Minimum best-defect probability for a window to be emitted.
    #[arg(long)]
    score_floor: Option<f64>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    nms_score_floor: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct DetectRefCfg {
    stride: u32,
    score_floor: f64,
    nms: NmsConfig,
}

impl Default for DetectRefCfg {
    fn default() -> Self {
        DetectRefCfg {
            stride: 32,
            score_floor: 0.5,
            nms: NmsConfig::default(),
        }
    }
}

#[derive(Args)]
struct NmsArgs {
    /// Detection input (JSON-lines).
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigFile,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    score_floor: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection input (JSON-lines).
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[command(flatten)]
    config: ConfigFile,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_text: Option<PathBuf>,
    /// Directory for per-class precision-recall CSV files.
    #[arg(long)]
    pr_csv: Option<PathBuf>,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Also report COCO-style mAP averaged over IoU 0.5:0.05:0.95.
    #[arg(long)]
    coco: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    config: ConfigFile,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Saliency classifier checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Separate reference-detector checkpoint.
    #[arg(long)]
    detector_checkpoint: Option<PathBuf>,
    /// Evaluate these detections (JSON-lines) instead of the reference detector.
    #[arg(long)]
    external_detections: Option<PathBuf>,
    /// Feed the detector raw images, bypassing saliency and enhancement.
    #[arg(long)]
    no_saliency: bool,
    #[arg(long)]
    write_pr_csv: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    saliency_stride: Option<u32>,
    #[arg(long)]
    detector_stride: Option<u32>,
    #[arg(long)]
    detector_score_floor: Option<f64>,
    #[arg(long)]
    coverage_floor: Option<f64>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    se_shape: Option<String>,
    #[arg(long)]
    se_radius: Option<u32>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long)]
    min_area: Option<usize>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    coco: bool,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string().lines().next().unwrap_or("bad usage").to_string();
            eprintln!("{}", serde_json::json!({ "error": msg, "code": 1 }));
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "code": code }));
            code
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Saliency(a) => cmd_saliency(a),
        Cmd::Propose(a) => cmd_propose(a),
        Cmd::Enhance(a) => cmd_enhance(a),
        Cmd::DetectRef(a) => cmd_detect_ref(a),
        Cmd::Nms(a) => cmd_nms(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Pipeline(a) => cmd_pipeline(a),
    }
}

fn stem_id(path: &Path, explicit: &Option<String>) -> String {
    match explicit {
        Some(id) => id.clone(),
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    }
}

fn se_overlay(flags: &mut Overlay, shape: &Option<String>, radius: &Option<u32>) -> Result<()> {
    if let Some(s) = shape {
        let shape = match s.as_str() {
            "square" => SeShape::Square,
            "disk" => SeShape::Disk,
            other => {
                return Err(Error::config(format!(
                    "unknown structuring element shape {other:?} (square or disk)"
                )))
            }
        };
        kv(flags, "se.shape", &Some(shape));
    }
    kv(flags, "se.radius", radius);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let file = a.config.overlay()?;
    let mut flags = Overlay::new();
    if let Some(counts) = &a.counts {
        if counts.len() != saldet_core::imgio::NUM_DEFECT_CLASSES {
            return Err(Error::config("--counts takes exactly five values"));
        }
        kv(&mut flags, "counts", &Some(counts));
    }
    kv(&mut flags, "size", &a.size);
    kv(&mut flags, "rng_seed", &a.seed);
    let cfg: SynthConfig = config::resolve(&SynthConfig::default(), &[&file, &flags])?;
    let ds = generate_dataset(&a.out, &cfg)?;
    let (train_n, val_n, test_n) = ds.manifest.split_counts();
    println!(
        "wrote {} images ({} train, {} val, {} test) to {}",
        ds.manifest.entries.len(),
        train_n,
        val_n,
        test_n,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = a.config.overlay()?;
    let mut flags = Overlay::new();
    kv(&mut flags, "epochs", &a.epochs);
    kv(&mut flags, "lr", &a.lr);
    kv(&mut flags, "batch_size", &a.batch_size);
    kv(&mut flags, "rng_seed", &a.seed);
    if a.allow_missing_classes {
        flags.push(("require_all_classes".into(), serde_json::json!(false)));
    }
    let cfg: TrainConfig = config::resolve(&TrainConfig::default(), &[&file, &flags])?;

    let manifest = load_manifest(&a.manifest)?;
    let gts = load_ground_truth(&a.ground_truth)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut patches = Vec::new();
    for entry in manifest.split(Split::Train) {
        let path = match &a.enhanced_dir {
            Some(dir) => dir.join(format!("{}.pgm", entry.image_id)),
            None => entry.path.clone(),
        };
        let img = to_grayscale(&load_image(&path)?);
        let mine: Vec<GroundTruthBox> = gts
            .iter()
            .filter(|gt| gt.image_id == entry.image_id)
            .cloned()
            .collect();
        patches.extend(saldet_core::saliency::training_patches(
            &img,
            &mine,
            a.negatives_per_image,
            &mut rng,
        )?);
    }

    let (clf, trace) = train(&PatchClassifier::init(cfg.rng_seed), &patches, &cfg)?;
    clf.save(&a.out)?;
    if let Some(path) = &a.loss_csv {
        trace.save_csv(path)?;
    }
    let acc = accuracy(&clf, &patches)?;
    println!(
        "trained on {} patches, final mean loss {:.6}, train accuracy {:.3}",
        patches.len(),
        trace.mean_loss.last().copied().unwrap_or(f64::NAN),
        acc
    );
    Ok(())
}

fn cmd_saliency(a: SaliencyArgs) -> Result<()> {
    let file = a.config.overlay()?;
    let mut flags = Overlay::new();
    kv(&mut flags, "smoothgrad.n_samples", &a.n_samples);
    kv(&mut flags, "smoothgrad.sigma", &a.sigma);
    kv(&mut flags, "smoothgrad.rng_seed", &a.seed);
    kv(&mut flags, "stride", &a.stride);
    let cfg: SaliencyCfg = config::resolve(&SaliencyCfg::default(), &[&file, &flags])?;

    let clf = PatchClassifier::load(&a.checkpoint)?;
    let img = to_grayscale(&load_image(&a.image)?);
    let map = image_saliency(&clf, &img, &cfg.smoothgrad, cfg.stride)?;
    map.save_pgm(&a.out_pgm)?;
    map.save_raw(&a.out_raw)?;
    println!(
        "saliency map {}x{} written to {} and {}",
        map.width(),
        map.height(),
        a.out_pgm.display(),
        a.out_raw.display()
    );
    Ok(())
}

fn cmd_propose(a: ProposeArgs) -> Result<()> {
    let file = a.config.overlay()?;
    let mut flags = Overlay::new();
    se_overlay(&mut flags, &a.se_shape, &a.se_radius)?;
    kv(&mut flags, "smoothgrad.n_samples", &a.n_samples);
    kv(&mut flags, "smoothgrad.sigma", &a.sigma);
    kv(&mut flags, "smoothgrad.rng_seed", &a.seed);
    kv(&mut flags, "stride", &a.stride);
    kv(&mut flags, "proposal.min_area", &a.min_area);
    kv(&mut flags, "proposal.pad", &a.pad);
    kv(&mut flags, "proposal.merge_iou", &a.merge_iou);
    let cfg: ProposeCfg = config::resolve(&ProposeCfg::default(), &[&file, &flags])?;

    let clf = PatchClassifier::load(&a.checkpoint)?;
    let img = to_grayscale(&load_image(&a.image)?);
    let sal = image_saliency(&clf, &img, &cfg.smoothgrad, cfg.stride)?;
    let lin = linearity_map(&img, &cfg.se)?;
    let fused = fuse_maps(&sal, &lin)?.with_context(cfg.se.radius, cfg.smoothgrad);
    let props = propose_boxes(&fused, &cfg.proposal)?;
    if let Some(path) = &a.fused_pgm {
        fused.map().save_pgm(path)?;
    }
    let id = stem_id(&a.image, &a.image_id);
    let records: Vec<ProposalRecord> = props.iter().map(|p| ProposalRecord::new(&id, p)).collect();
    save_proposals(&a.out, &records)?;
    println!("{} proposals written to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_enhance(a: EnhanceArgs) -> Result<()> {
    let file = a.config.overlay()?;
    let mut flags = Overlay::new();
    kv(&mut flags, "gain", &a.gain);
    let base = EnhanceCfg {
        gain: ProposalConfig::default().brightness_gain,
    };
    let cfg: EnhanceCfg = config::resolve(&base, &[&file, &flags])?;

    let img = load_image(&a.image)?;
    let records = load_proposals(&a.proposals)?;
    let mut boxes = Vec::new();
    for r in &records {
        if a.image_id.as_ref().is_none_or(|id| *id == r.image_id) {
            boxes.push(r.bbox()?);
        }
    }
    let out = enhance(&img, &boxes, cfg.gain)?;
    save_image(&out, &a.out)?;
    println!(
        "enhanced {} regions at gain {} into {}",
        boxes.len(),
        cfg.gain,
        a.out.display()
    );
    Ok(())
}

fn cmd_detect_ref(a: DetectRefArgs) -> Result<()> {
    let file = a.config.overlay()?;
    let mut flags = Overlay::new();
    kv(&mut flags, "stride", &a.stride);
    kv(&mut flags, "score_floor", &a.score_floor);
    kv(&mut flags, "nms.iou_threshold", &a.iou_threshold);
    kv(&mut flags, "nms.score_floor", &a.nms_score_floor);
    let cfg: DetectRefCfg = config::resolve(&DetectRefCfg::default(), &[&file, &flags])?;

    let clf = PatchClassifier::load(&a.checkpoint)?;
    let img = to_grayscale(&load_image(&a.image)?);
    let id = stem_id(&a.image, &a.image_id);
    let dets = detect_reference(&id, &img, &clf, cfg.stride, cfg.score_floor, &cfg.nms)?;
    save_detections(&a.out, &dets)?;
    println!("{} detections written to {}", dets.len(), a.out.display());
    Ok(())
}

fn cmd_nms(a: NmsArgs) -> Result<()> {
    let file = a.config.overlay()?;
    let mut flags = Overlay::new();
    kv(&mut flags, "iou_threshold", &a.iou_threshold);
    kv(&mut flags, "score_floor", &a.score_floor);
    let cfg: NmsConfig = config::resolve(&NmsConfig::default(), &[&file, &flags])?;

    let dets = load_detections(&a.detections)?;
    let kept = nms_per_class(&dets, &cfg)?;
    save_detections(&a.out, &kept)?;
    println!(
        "{} of {} detections kept, written to {}",
        kept.len(),
        dets.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let file = a.config.overlay()?;
    let mut flags = Overlay::new();
    kv(&mut flags, "thresholds", &a.thresholds);
    kv_flag(&mut flags, "coco_average", a.coco);
    let cfg: EvalConfig = config::resolve(&EvalConfig::default(), &[&file, &flags])?;

    let dets = load_detections(&a.detections)?;
    let gts = load_ground_truth(&a.ground_truth)?;
    let report = evaluate(&dets, &gts, &cfg, None)?;
    print!("{}", report.render_text());
    if let Some(path) = &a.out_json {
        report.save_json(path)?;
    }
    if let Some(path) = &a.out_text {
        saldet_core::imgio::write_atomic(path, report.render_text().as_bytes())?;
    }
    if let Some(dir) = &a.pr_csv {
        report.save_pr_csv(dir)?;
    }
    Ok(())
}

fn require_path(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::config(format!(
            "{what} is required (flag --{} or config key \"{}\")",
            what.replace('_', "-"),
            what
        )));
    }
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let file = a.config.overlay()?;
    let mut flags = Overlay::new();
    kv(&mut flags, "manifest", &a.manifest);
    kv(&mut flags, "ground_truth", &a.ground_truth);
    kv(&mut flags, "out_dir", &a.out_dir);
    kv(&mut flags, "checkpoint", &a.checkpoint);
    kv(&mut flags, "detector_checkpoint", &a.detector_checkpoint);
    kv(&mut flags, "external_detections", &a.external_detections);
    kv_flag(&mut flags, "no_saliency", a.no_saliency);
    kv_flag(&mut flags, "write_pr_csv", a.write_pr_csv);
    kv(&mut flags, "threads", &a.threads);
    kv(&mut flags, "saliency_stride", &a.saliency_stride);
    kv(&mut flags, "detector_stride", &a.detector_stride);
    kv(&mut flags, "detector_score_floor", &a.detector_score_floor);
    kv(&mut flags, "coverage_floor", &a.coverage_floor);
    kv(&mut flags, "smoothgrad.n_samples", &a.n_samples);
    kv(&mut flags, "smoothgrad.sigma", &a.sigma);
    kv(&mut flags, "smoothgrad.rng_seed", &a.seed);
    se_overlay(&mut flags, &a.se_shape, &a.se_radius)?;
    kv(&mut flags, "proposal.brightness_gain", &a.gain);
    kv(&mut flags, "proposal.min_area", &a.min_area);
    kv(&mut flags, "nms.iou_threshold", &a.iou_threshold);
    kv(&mut flags, "eval.thresholds", &a.thresholds);
    kv_flag(&mut flags, "eval.coco_average", a.coco);

    let base = PipelineConfig::new(PathBuf::new(), PathBuf::new(), PathBuf::new(), PathBuf::new());
    let mut cfg: PipelineConfig = config::resolve(&base, &[&file, &flags])?;
    require_path(&cfg.manifest, "manifest")?;
    require_path(&cfg.ground_truth, "ground_truth")?;
    require_path(&cfg.out_dir, "out_dir")?;
    require_path(&cfg.checkpoint, "checkpoint")?;

    if let Ok(raw) = std::env::var("SALDET_THREADS") {
        let cap: usize = raw
            .parse()
            .map_err(|_| Error::config(format!("SALDET_THREADS={raw:?} is not a thread count")))?;
        if cap == 0 {
            return Err(Error::config("SALDET_THREADS must be at least 1"));
        }
        cfg.threads = if cfg.threads == 0 { cap } else { cfg.threads.min(cap) };
    }

    let run = run_pipeline(&cfg)?;
    print!("{}", run.eval.render_text());
    println!(
        "processed {} images, {} failed; artifacts in {}",
        run.processed,
        run.failed,
        cfg.out_dir.display()
    );
    Ok(())
}
