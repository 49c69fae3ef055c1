//! Python bindings for the saliency-guided defect detection pipeline.
//! Build with `python/build.py`, which places `saldet.so` next to the
//! smoke-test script.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use saldet_core::detect;
use saldet_core::eval;
use saldet_core::imgio::{self, BBox, ClassId, GroundTruthBox};
use saldet_core::morphology::{self, FloatMap, SeShape, StructuringElement};
use saldet_core::pipeline;
use saldet_core::proposals;
use saldet_core::saliency::{self, SmoothGradConfig};
use saldet_core::synth;

fn pyerr(e: saldet_core::Error) -> PyErr {
    match e.exit_code() {
        2 => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn bbox_from(t: (u32, u32, u32, u32)) -> PyResult<BBox> {
    BBox::new(t.0, t.1, t.2, t.3).map_err(pyerr)
}

fn bbox_tuple(b: &BBox) -> (u32, u32, u32, u32) {
    (b.x, b.y, b.w, b.h)
}

fn class_from(id: u8) -> PyResult<ClassId> {
    ClassId::new(id).map_err(pyerr)
}

fn patches_from(data: Vec<(Vec<f64>, u8)>) -> PyResult<Vec<(Vec<f64>, ClassId)>> {
    data.into_iter()
        .map(|(p, l)| Ok((p, class_from(l)?)))
        .collect()
}

fn gts_from(gts: Vec<(String, (u32, u32, u32, u32), Vec<u8>)>) -> PyResult<Vec<GroundTruthBox>> {
    gts.into_iter()
        .map(|(id, bbox, labels)| {
            let labels = labels
                .into_iter()
                .map(class_from)
                .collect::<PyResult<Vec<_>>>()?;
            GroundTruthBox::new(id, bbox_from(bbox)?, labels).map_err(pyerr)
        })
        .collect()
}

/// Grayscale or RGB raster, 8 bits per channel.
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: imgio::Image,
}

#[pymethods]
impl PyImage {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyImage {
            inner: imgio::load_image(&path).map_err(pyerr)?,
        })
    }

    #[staticmethod]
    fn from_pixels(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> PyResult<Self> {
        Ok(PyImage {
            inner: imgio::Image::new(width, height, channels, pixels).map_err(pyerr)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        imgio::save_image(&self.inner, &path).map_err(pyerr)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels().to_vec()
    }

    fn to_grayscale(&self) -> Self {
        PyImage {
            inner: imgio::to_grayscale(&self.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Image({}x{}, {} channel{})",
            self.inner.width(),
            self.inner.height(),
            self.inner.channels(),
            if self.inner.channels() == 1 { "" } else { "s" }
        )
    }
}

/// Dense float raster in row-major order (saliency, linearity, fused maps).
#[pyclass(name = "FloatMap", from_py_object)]
#[derive(Clone)]
struct PyFloatMap {
    inner: FloatMap,
}

#[pymethods]
impl PyFloatMap {
    #[staticmethod]
    fn load_raw(path: PathBuf) -> PyResult<Self> {
        Ok(PyFloatMap {
            inner: FloatMap::load_raw(&path).map_err(pyerr)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.inner.at(x, y)
    }

    fn min_max(&self) -> (f64, f64) {
        self.inner.min_max()
    }

    fn normalized(&self) -> Self {
        PyFloatMap {
            inner: self.inner.normalized(),
        }
    }

    fn to_image(&self) -> PyImage {
        PyImage {
            inner: self.inner.to_image(),
        }
    }

    fn save_pgm(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_pgm(&path).map_err(pyerr)
    }

    fn save_raw(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_raw(&path).map_err(pyerr)
    }

    fn __repr__(&self) -> String {
        format!("FloatMap({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Fused saliency map with its provenance ranges.
#[pyclass(name = "FusedMap", from_py_object)]
#[derive(Clone)]
struct PyFusedMap {
    inner: proposals::FusedMap,
}

#[pymethods]
impl PyFusedMap {
    /// Wrap an already normalized map (values in [0,1]).
    #[staticmethod]
    fn from_normalized(map: PyFloatMap) -> PyResult<Self> {
        Ok(PyFusedMap {
            inner: proposals::FusedMap::from_normalized(map.inner).map_err(pyerr)?,
        })
    }

    fn map(&self) -> PyFloatMap {
        PyFloatMap {
            inner: self.inner.map().clone(),
        }
    }

    #[getter]
    fn m_range(&self) -> (f64, f64) {
        self.inner.info().m_range
    }

    #[getter]
    fn l_range(&self) -> (f64, f64) {
        self.inner.info().l_range
    }

    #[getter]
    fn sum_range(&self) -> (f64, f64) {
        self.inner.info().sum_range
    }

    fn __repr__(&self) -> String {
        format!(
            "FusedMap({}x{})",
            self.inner.map().width(),
            self.inner.map().height()
        )
    }
}

/// Fixed-architecture patch classifier (64x64 grayscale, 6 logits).
#[pyclass(name = "PatchClassifier", from_py_object)]
#[derive(Clone)]
struct PyClassifier {
    inner: saliency::PatchClassifier,
}

#[pymethods]
impl PyClassifier {
    /// Glorot-initialized weights from the seed.
    #[staticmethod]
    fn init(seed: u64) -> Self {
        PyClassifier {
            inner: saliency::PatchClassifier::init(seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyClassifier {
            inner: saliency::PatchClassifier::load(&path).map_err(pyerr)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(pyerr)
    }

    /// Pre-softmax logits for one 4096-value patch in [0,1].
    fn forward(&self, patch: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&patch).map_err(pyerr)?.to_vec())
    }

    /// |d logit_class / d input| as a 64x64 map.
    fn input_gradient(&self, patch: Vec<f64>, class_id: u8) -> PyResult<PyFloatMap> {
        let c = class_from(class_id)?;
        Ok(PyFloatMap {
            inner: self.inner.input_gradient(&patch, c).map_err(pyerr)?,
        })
    }

    fn __repr__(&self) -> String {
        "PatchClassifier(64x64x1 -> 6)".to_string()
    }
}

/// One detected box with a score per defect class.
#[pyclass(name = "Detection", from_py_object)]
#[derive(Clone)]
struct PyDetection {
    inner: detect::Detection,
}

#[pymethods]
impl PyDetection {
    #[new]
    fn new(image_id: String, bbox: (u32, u32, u32, u32), scores: Vec<f64>) -> PyResult<Self> {
        if scores.len() != imgio::NUM_DEFECT_CLASSES {
            return Err(PyValueError::new_err(format!(
                "scores has {} entries, expected {}",
                scores.len(),
                imgio::NUM_DEFECT_CLASSES
            )));
        }
        let mut arr = [0.0; imgio::NUM_DEFECT_CLASSES];
        arr.copy_from_slice(&scores);
        Ok(PyDetection {
            inner: detect::Detection::new(image_id, bbox_from(bbox)?, arr).map_err(pyerr)?,
        })
    }

    #[getter]
    fn image_id(&self) -> String {
        self.inner.image_id.clone()
    }

    #[getter]
    fn bbox(&self) -> (u32, u32, u32, u32) {
        bbox_tuple(&self.inner.bbox)
    }

    #[getter]
    fn scores(&self) -> Vec<f64> {
        self.inner.scores.to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Detection({:?}, bbox={:?}, scores={:?})",
            self.inner.image_id,
            bbox_tuple(&self.inner.bbox),
            self.inner.scores
        )
    }
}

/// Per-threshold AP table produced by `evaluate`.
#[pyclass(name = "EvalReport", from_py_object)]
#[derive(Clone)]
struct PyEvalReport {
    inner: eval::EvalReport,
}

#[pymethods]
impl PyEvalReport {
    /// mAP at one IoU threshold, or None if no class had ground truth.
    fn map_at(&self, iou_threshold: f64) -> PyResult<Option<f64>> {
        let report = self
            .inner
            .per_threshold
            .iter()
            .find(|t| t.iou_threshold == iou_threshold)
            .ok_or_else(|| {
                PyValueError::new_err(format!("report has no threshold {iou_threshold}"))
            })?;
        Ok(report.map)
    }

    /// AP for one defect class (1-5) at one IoU threshold.
    fn ap_at(&self, class_id: u8, iou_threshold: f64) -> PyResult<Option<f64>> {
        let c = class_from(class_id)?;
        let idx = c
            .defect_index()
            .ok_or_else(|| PyValueError::new_err("background has no AP"))?;
        let report = self
            .inner
            .per_threshold
            .iter()
            .find(|t| t.iou_threshold == iou_threshold)
            .ok_or_else(|| {
                PyValueError::new_err(format!("report has no threshold {iou_threshold}"))
            })?;
        Ok(report.ap_per_class[idx])
    }

    #[getter]
    fn thresholds(&self) -> Vec<f64> {
        self.inner
            .per_threshold
            .iter()
            .map(|t| t.iou_threshold)
            .collect()
    }

    #[getter]
    fn map_coco(&self) -> Option<f64> {
        self.inner.map_coco
    }

    #[getter]
    fn detections(&self) -> usize {
        self.inner.detections
    }

    #[getter]
    fn ground_truth_boxes(&self) -> usize {
        self.inner.ground_truth_boxes
    }

    fn render_text(&self) -> String {
        self.inner.render_text()
    }

    fn save_json(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_json(&path).map_err(pyerr)
    }

    fn __repr__(&self) -> String {
        format!(
            "EvalReport(thresholds={:?}, detections={})",
            self.thresholds(),
            self.inner.detections
        )
    }
}

fn se_from(shape: &str, radius: u32) -> PyResult<StructuringElement> {
    let shape = match shape {
        "square" => SeShape::Square,
        "disk" => SeShape::Disk,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown structuring element shape {other:?} (square or disk)"
            )))
        }
    };
    StructuringElement::new(shape, radius).map_err(pyerr)
}

/// SmoothGrad map for one 64x64 patch.
#[pyfunction]
#[pyo3(signature = (clf, patch, class_id, n_samples = 25, sigma = 0.10, seed = 0))]
fn smoothgrad(
    clf: &PyClassifier,
    patch: Vec<f64>,
    class_id: u8,
    n_samples: usize,
    sigma: f64,
    seed: u64,
) -> PyResult<PyFloatMap> {
    let cfg = SmoothGradConfig {
        n_samples,
        sigma,
        rng_seed: seed,
    };
    let c = class_from(class_id)?;
    Ok(PyFloatMap {
        inner: saliency::smoothgrad(&clf.inner, &patch, c, &cfg).map_err(pyerr)?,
    })
}

/// Tiled SmoothGrad saliency over a whole grayscale image.
#[pyfunction]
#[pyo3(signature = (clf, image, n_samples = 25, sigma = 0.10, seed = 0, stride = 32))]
fn image_saliency(
    clf: &PyClassifier,
    image: &PyImage,
    n_samples: usize,
    sigma: f64,
    seed: u64,
    stride: u32,
) -> PyResult<PyFloatMap> {
    let cfg = SmoothGradConfig {
        n_samples,
        sigma,
        rng_seed: seed,
    };
    Ok(PyFloatMap {
        inner: saliency::image_saliency(&clf.inner, &image.inner, &cfg, stride).map_err(pyerr)?,
    })
}

/// Bottom-hat response |closing(x) - x| highlighting thin dark structure.
#[pyfunction]
#[pyo3(signature = (image, shape = "disk", radius = 3))]
fn linearity_map(image: &PyImage, shape: &str, radius: u32) -> PyResult<PyFloatMap> {
    let se = se_from(shape, radius)?;
    Ok(PyFloatMap {
        inner: morphology::linearity_map(&image.inner, &se).map_err(pyerr)?,
    })
}

/// Morphological closing (dilate then erode).
#[pyfunction]
#[pyo3(signature = (image, shape = "disk", radius = 3))]
fn closing(image: &PyImage, shape: &str, radius: u32) -> PyResult<PyImage> {
    let se = se_from(shape, radius)?;
    Ok(PyImage {
        inner: morphology::closing(&image.inner, &se).map_err(pyerr)?,
    })
}

/// Normalize both maps, add them, normalize again.
#[pyfunction]
fn fuse_maps(m: &PyFloatMap, l: &PyFloatMap) -> PyResult<PyFusedMap> {
    Ok(PyFusedMap {
        inner: proposals::fuse_maps(&m.inner, &l.inner).map_err(pyerr)?,
    })
}

/// Otsu threshold over 256 bins of a map in [0,1].
#[pyfunction]
fn otsu_threshold(map: &PyFloatMap) -> f64 {
    proposals::otsu_threshold(&map.inner)
}

/// Threshold, label, filter, pad, and merge the fused map into proposals.
/// Returns [((x, y, w, h), score), ...]; `threshold=None` selects Otsu.
#[pyfunction]
#[pyo3(signature = (fused, min_area = 25, pad = 4, merge_iou = 0.3, threshold = None))]
fn propose_boxes(
    fused: &PyFusedMap,
    min_area: usize,
    pad: u32,
    merge_iou: f64,
    threshold: Option<f64>,
) -> PyResult<Vec<((u32, u32, u32, u32), f64)>> {
    let cfg = proposals::ProposalConfig {
        threshold_mode: match threshold {
            Some(t) => proposals::ThresholdMode::Fixed(t),
            None => proposals::ThresholdMode::Otsu,
        },
        min_area,
        pad,
        merge_iou,
        ..proposals::ProposalConfig::default()
    };
    Ok(proposals::propose_boxes(&fused.inner, &cfg)
        .map_err(pyerr)?
        .iter()
        .map(|p| (bbox_tuple(&p.bbox), p.score))
        .collect())
}

/// Brighten the boxes by `gain`, leaving other pixels untouched.
#[pyfunction]
#[pyo3(signature = (image, boxes, gain = 1.25))]
fn enhance(image: &PyImage, boxes: Vec<(u32, u32, u32, u32)>, gain: f64) -> PyResult<PyImage> {
    let boxes = boxes
        .into_iter()
        .map(bbox_from)
        .collect::<PyResult<Vec<_>>>()?;
    Ok(PyImage {
        inner: proposals::enhance(&image.inner, &boxes, gain).map_err(pyerr)?,
    })
}

/// Sliding-window softmax detector with per-class NMS applied.
#[pyfunction]
#[pyo3(signature = (image_id, image, clf, stride = 32, score_floor = 0.5, iou_threshold = 0.45, nms_score_floor = 0.05))]
#[allow(clippy::too_many_arguments)]
fn detect_reference(
    image_id: &str,
    image: &PyImage,
    clf: &PyClassifier,
    stride: u32,
    score_floor: f64,
    iou_threshold: f64,
    nms_score_floor: f64,
) -> PyResult<Vec<PyDetection>> {
    let nms = detect::NmsConfig {
        iou_threshold,
        score_floor: nms_score_floor,
    };
    Ok(
        detect::detect_reference(image_id, &image.inner, &clf.inner, stride, score_floor, &nms)
            .map_err(pyerr)?
            .into_iter()
            .map(|d| PyDetection { inner: d })
            .collect(),
    )
}

/// Greedy per-class NMS; suppressed classes are zeroed, empty boxes dropped.
#[pyfunction]
#[pyo3(signature = (detections, iou_threshold = 0.45, score_floor = 0.05))]
fn nms_per_class(
    detections: Vec<PyDetection>,
    iou_threshold: f64,
    score_floor: f64,
) -> PyResult<Vec<PyDetection>> {
    let dets: Vec<detect::Detection> = detections.into_iter().map(|d| d.inner).collect();
    let cfg = detect::NmsConfig {
        iou_threshold,
        score_floor,
    };
    Ok(detect::nms_per_class(&dets, &cfg)
        .map_err(pyerr)?
        .into_iter()
        .map(|d| PyDetection { inner: d })
        .collect())
}

/// Drop detections whose box covers too little above-Otsu saliency mass.
#[pyfunction]
#[pyo3(signature = (detections, fused, coverage_floor = 0.05))]
fn prune_by_saliency(
    detections: Vec<PyDetection>,
    fused: &PyFusedMap,
    coverage_floor: f64,
) -> PyResult<Vec<PyDetection>> {
    let dets: Vec<detect::Detection> = detections.into_iter().map(|d| d.inner).collect();
    Ok(detect::prune_by_saliency(&dets, &fused.inner, coverage_floor)
        .map_err(pyerr)?
        .into_iter()
        .map(|d| PyDetection { inner: d })
        .collect())
}

/// Intersection-over-union of two boxes.
#[pyfunction]
fn iou(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32)) -> PyResult<f64> {
    Ok(detect::iou(&bbox_from(a)?, &bbox_from(b)?))
}

/// Evaluate detections against ground truth given as
/// (image_id, (x, y, w, h), [class_id, ...]) triples.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, thresholds = vec![0.5, 0.75, 0.95], coco = false))]
fn evaluate(
    detections: Vec<PyDetection>,
    ground_truth: Vec<(String, (u32, u32, u32, u32), Vec<u8>)>,
    thresholds: Vec<f64>,
    coco: bool,
) -> PyResult<PyEvalReport> {
    let dets: Vec<detect::Detection> = detections.into_iter().map(|d| d.inner).collect();
    let gts = gts_from(ground_truth)?;
    let cfg = eval::EvalConfig {
        thresholds,
        coco_average: coco,
    };
    Ok(PyEvalReport {
        inner: eval::evaluate(&dets, &gts, &cfg, None).map_err(pyerr)?,
    })
}

/// Read detections from a JSON-lines file.
#[pyfunction]
fn load_detections(path: PathBuf) -> PyResult<Vec<PyDetection>> {
    Ok(detect::load_detections(&path)
        .map_err(pyerr)?
        .into_iter()
        .map(|d| PyDetection { inner: d })
        .collect())
}

/// Write detections as JSON-lines.
#[pyfunction]
fn save_detections(path: PathBuf, detections: Vec<PyDetection>) -> PyResult<()> {
    let dets: Vec<detect::Detection> = detections.into_iter().map(|d| d.inner).collect();
    detect::save_detections(&path, &dets).map_err(pyerr)
}

/// Read ground truth as (image_id, (x, y, w, h), [class_id, ...]) triples.
#[pyfunction]
fn load_ground_truth(path: PathBuf) -> PyResult<Vec<(String, (u32, u32, u32, u32), Vec<u8>)>> {
    Ok(imgio::load_ground_truth(&path)
        .map_err(pyerr)?
        .into_iter()
        .map(|gt| {
            (
                gt.image_id,
                bbox_tuple(&gt.bbox),
                gt.labels.iter().map(|c| c.id()).collect(),
            )
        })
        .collect())
}

/// Generate a synthetic dataset; returns the manifest path.
/// `config_json` takes the same dotted or nested keys as the CLI.
#[pyfunction]
#[pyo3(signature = (out_dir, counts = (10, 10, 10, 10, 10), size = 256, seed = 0, config_json = None))]
fn generate_dataset(
    out_dir: PathBuf,
    counts: (usize, usize, usize, usize, usize),
    size: u32,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<PathBuf> {
    let mut cfg = synth::SynthConfig {
        counts: [counts.0, counts.1, counts.2, counts.3, counts.4],
        size,
        rng_seed: seed,
        ..synth::SynthConfig::default()
    };
    if let Some(text) = config_json {
        let overlay = overlay_from_str(text)?;
        cfg = saldet_core::config::resolve(&cfg, &[&overlay]).map_err(pyerr)?;
    }
    synth::generate_dataset(&out_dir, &cfg).map_err(pyerr)?;
    Ok(out_dir.join(synth::MANIFEST_FILE))
}

/// Balanced 64x64 patch corpus as (patch, class_id) pairs.
#[pyfunction]
#[pyo3(signature = (per_class, seed = 0))]
fn patch_corpus(per_class: usize, seed: u64) -> Vec<(Vec<f64>, u8)> {
    synth::patch_corpus(per_class, seed)
        .into_iter()
        .map(|(p, c)| (p, c.id()))
        .collect()
}

/// Minibatch SGD on (patch, class_id) pairs; returns the trained
/// classifier and the per-epoch mean loss trace.
#[pyfunction]
#[pyo3(signature = (clf, data, epochs = 20, lr = 0.05, batch_size = 8, seed = 0, require_all_classes = true))]
#[allow(clippy::too_many_arguments)]
fn train(
    clf: &PyClassifier,
    data: Vec<(Vec<f64>, u8)>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    require_all_classes: bool,
) -> PyResult<(PyClassifier, Vec<f64>)> {
    let cfg = saliency::TrainConfig {
        epochs,
        lr,
        batch_size,
        rng_seed: seed,
        require_all_classes,
    };
    let data = patches_from(data)?;
    let (trained, trace) = saliency::train(&clf.inner, &data, &cfg).map_err(pyerr)?;
    Ok((PyClassifier { inner: trained }, trace.mean_loss))
}

/// Fraction of (patch, class_id) pairs the classifier labels correctly.
#[pyfunction]
fn accuracy(clf: &PyClassifier, data: Vec<(Vec<f64>, u8)>) -> PyResult<f64> {
    let data = patches_from(data)?;
    saliency::accuracy(&clf.inner, &data).map_err(pyerr)
}

fn overlay_from_str(text: &str) -> PyResult<saldet_core::config::Overlay> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut pairs = saldet_core::config::Overlay::new();
    saldet_core::config::flatten(&value, "", &mut pairs);
    Ok(pairs)
}

/// Run the full pipeline. `config_json` uses the same keys as the CLI
/// (dotted or nested); manifest, ground_truth, out_dir, and checkpoint
/// are required. Returns (processed, failed, report).
#[pyfunction]
fn run_pipeline(config_json: &str) -> PyResult<(usize, usize, PyEvalReport)> {
    let overlay = overlay_from_str(config_json)?;
    let base = pipeline::PipelineConfig::new(
        PathBuf::new(),
        PathBuf::new(),
        PathBuf::new(),
        PathBuf::new(),
    );
    let cfg: pipeline::PipelineConfig =
        saldet_core::config::resolve(&base, &[&overlay]).map_err(pyerr)?;
    for (path, what) in [
        (&cfg.manifest, "manifest"),
        (&cfg.ground_truth, "ground_truth"),
        (&cfg.out_dir, "out_dir"),
        (&cfg.checkpoint, "checkpoint"),
    ] {
        if path.as_os_str().is_empty() {
            return Err(PyValueError::new_err(format!("config key {what:?} is required")));
        }
    }
    let run = pipeline::run_pipeline(&cfg).map_err(pyerr)?;
    Ok((
        run.processed,
        run.failed,
        PyEvalReport { inner: run.eval },
    ))
}

#[pymodule]
fn saldet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyFloatMap>()?;
    m.add_class::<PyFusedMap>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(smoothgrad, m)?)?;
    m.add_function(wrap_pyfunction!(image_saliency, m)?)?;
    m.add_function(wrap_pyfunction!(linearity_map, m)?)?;
    m.add_function(wrap_pyfunction!(closing, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_maps, m)?)?;
    m.add_function(wrap_pyfunction!(otsu_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(propose_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(enhance, m)?)?;
    m.add_function(wrap_pyfunction!(detect_reference, m)?)?;
    m.add_function(wrap_pyfunction!(nms_per_class, m)?)?;
    m.add_function(wrap_pyfunction!(prune_by_saliency, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(load_detections, m)?)?;
    m.add_function(wrap_pyfunction!(save_detections, m)?)?;
    m.add_function(wrap_pyfunction!(load_ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(patch_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("BACKGROUND", 0u8)?;
    m.add("CRACK", 1u8)?;
    m.add("SPALLATION", 2u8)?;
    m.add("EXPOSED_BAR", 3u8)?;
    m.add("EFFLORESCENCE", 4u8)?;
    m.add("CORROSION_STAIN", 5u8)?;
    m.add("CLASS_NAMES", imgio::CLASS_NAMES.to_vec())?;
    Ok(())
}
