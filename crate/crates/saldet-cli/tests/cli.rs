use std::path::Path;
use std::process::{Command, Output};

use saldet_core::detect::{load_detections, nms_per_class, save_detections, Detection, NmsConfig};
use saldet_core::imgio::{load_image, save_ground_truth, BBox, ClassId, GroundTruthBox};
use saldet_core::morphology::FloatMap;
use saldet_core::saliency::{image_saliency, PatchClassifier, SmoothGradConfig};
use saldet_core::synth::{generate_dataset, SynthConfig, GROUND_TRUTH_FILE, MANIFEST_FILE};

fn saldet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saldet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = saldet(args);
    assert!(
        out.status.success(),
        "saldet {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn synth_flag_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"size": 80, "counts": [1,1,1,1,1]}"#).unwrap();
    let ds = dir.path().join("ds");
    ok(&[
        "synth",
        "--out",
        &path_str(&ds),
        "--config",
        &path_str(&cfg_path),
        "--size",
        "96",
        "--seed",
        "5",
    ]);
    let img = load_image(&ds.join("crack_0000.pgm")).unwrap();
    assert_eq!((img.width(), img.height()), (96, 96));
}

#[test]
fn nms_command_reproduces_library_nms() {
    let dir = tempfile::tempdir().unwrap();
    let mut dets = Vec::new();
    for i in 0..40u32 {
        let bbox = BBox::new((i * 7) % 50, (i * 13) % 40, 20 + i % 9, 15 + i % 7).unwrap();
        let mut scores = [0.0; 5];
        scores[(i % 5) as usize] = 0.1 + 0.8 * ((i * 37 % 97) as f64 / 97.0);
        scores[((i + 2) % 5) as usize] = 0.05 + 0.5 * ((i * 53 % 89) as f64 / 89.0);
        dets.push(Detection::new(format!("img_{}", i % 3), bbox, scores).unwrap());
    }
    let input = dir.path().join("dets.jsonl");
    save_detections(&input, &dets).unwrap();

    let output = dir.path().join("kept.jsonl");
    ok(&[
        "nms",
        "--detections",
        &path_str(&input),
        "--out",
        &path_str(&output),
        "--iou-threshold",
        "0.45",
    ]);
    let got = load_detections(&output).unwrap();
    let want = nms_per_class(
        &dets,
        &NmsConfig {
            iou_threshold: 0.45,
            ..NmsConfig::default()
        },
    )
    .unwrap();
    assert_eq!(got, want);
}

#[test]
fn eval_perfect_fixture_reports_map_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for (i, class) in ClassId::defect_classes().enumerate() {
        let bbox = BBox::new(10 + 70 * i as u32, 12, 30, 24).unwrap();
        gts.push(GroundTruthBox {
            image_id: "img".into(),
            bbox,
            labels: vec![class],
        });
        let mut scores = [0.0; 5];
        scores[i] = 0.9;
        dets.push(Detection::new("img".to_string(), bbox, scores).unwrap());
    }
    let gt_path = dir.path().join("gt.jsonl");
    let det_path = dir.path().join("dets.jsonl");
    save_ground_truth(&gts, &gt_path).unwrap();
    save_detections(&det_path, &dets).unwrap();

    let stdout = ok(&[
        "eval",
        "--detections",
        &path_str(&det_path),
        "--ground-truth",
        &path_str(&gt_path),
    ]);
    let map_line = stdout
        .lines()
        .find(|l| l.starts_with("mAP"))
        .expect("table has a mAP row");
    assert_eq!(
        map_line.split_whitespace().collect::<Vec<_>>(),
        vec!["mAP", "1.0000", "1.0000", "1.0000"]
    );
}

#[test]
fn saliency_command_writes_exact_float_binary() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let cfg = SynthConfig {
        counts: [1; 5],
        size: 64,
        rng_seed: 9,
        ..SynthConfig::default()
    };
    generate_dataset(&ds, &cfg).unwrap();
    let clf = PatchClassifier::init(4);
    let ckpt = dir.path().join("clf.ckpt");
    clf.save(&ckpt).unwrap();

    let image = ds.join("crack_0000.pgm");
    let out_pgm = dir.path().join("sal.pgm");
    let out_raw = dir.path().join("sal.raw");
    ok(&[
        "saliency",
        "--image",
        &path_str(&image),
        "--checkpoint",
        &path_str(&ckpt),
        "--out-pgm",
        &path_str(&out_pgm),
        "--out-raw",
        &path_str(&out_raw),
        "--n-samples",
        "2",
        "--seed",
        "3",
    ]);

    let sg = SmoothGradConfig {
        n_samples: 2,
        rng_seed: 3,
        ..SmoothGradConfig::default()
    };
    let img = load_image(&image).unwrap();
    let want = image_saliency(&clf, &img, &sg, 32).unwrap();
    let got = FloatMap::load_raw(&out_raw).unwrap();
    assert_eq!(got.values(), want.values());
    let pgm = std::fs::read(&out_pgm).unwrap();
    assert!(pgm.starts_with(b"P5"));
}

#[test]
fn train_then_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    ok(&[
        "synth",
        "--out",
        &path_str(&ds),
        "--counts",
        "4,1,1,1,1",
        "--size",
        "96",
        "--seed",
        "2",
    ]);
    let manifest = ds.join(MANIFEST_FILE);
    let gt = ds.join(GROUND_TRUTH_FILE);
    let ckpt = dir.path().join("clf.ckpt");
    ok(&[
        "train",
        "--manifest",
        &path_str(&manifest),
        "--ground-truth",
        &path_str(&gt),
        "--out",
        &path_str(&ckpt),
        "--epochs",
        "2",
        "--allow-missing-classes",
    ]);
    let out = dir.path().join("run");
    let stdout = ok(&[
        "pipeline",
        "--manifest",
        &path_str(&manifest),
        "--ground-truth",
        &path_str(&gt),
        "--checkpoint",
        &path_str(&ckpt),
        "--out-dir",
        &path_str(&out),
        "--n-samples",
        "2",
        "--detector-stride",
        "32",
    ]);
    assert!(stdout.contains("failed"));
    assert!(out.join("report.json").exists());
    assert!(out.join("provenance.json").exists());
}

#[test]
fn errors_are_one_json_line_with_exit_codes() {
    let out = saldet(&["eval", "--detections", "/nope.jsonl", "--ground-truth", "/nope2.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    let parsed: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(parsed["code"], 1);
    assert!(parsed["error"].is_string());

    let usage = saldet(&["eval", "--not-a-flag"]);
    assert_eq!(usage.status.code(), Some(1));

    let help = saldet(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
}
