//! Minibatch SGD on softmax cross-entropy for the patch classifier.
//!
//! Training is single-threaded on purpose: the sample visit order is part
//! of the determinism contract.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{ClassId, GroundTruthBox, Image, NUM_CLASSES};
use crate::morphology::require_grayscale;

use super::net::{self, softmax, ParamGrads, PatchClassifier, Scratch, PATCH, PATCH_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Require every class to appear in the training set. Disable for
    /// deliberately degenerate fits (single-sample overfit checks).
    pub require_all_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            lr: 0.05,
            batch_size: 8,
            rng_seed: 0,
            require_all_classes: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::config("train.lr must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-epoch mean cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub mean_loss: Vec<f64>,
}

impl LossTrace {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, loss) in self.mean_loss.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, loss));
        }
        crate::imgio::write_atomic(path, out.as_bytes())
    }
}

/// Train a copy of `clf` and return it with the loss trace. Samples are
/// visited in a seeded shuffle per epoch; gradients are averaged over each
/// batch (final short batch included).
pub fn train(
    clf: &PatchClassifier,
    data: &[(Vec<f64>, ClassId)],
    cfg: &TrainConfig,
) -> Result<(PatchClassifier, LossTrace)> {
    cfg.validate()?;
    clf.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for (patch, _) in data {
        net::validate_patch(patch)?;
    }
    if cfg.require_all_classes {
        let mut seen = [false; NUM_CLASSES];
        for (_, label) in data {
            seen[label.id() as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::invalid(format!(
                "training set has no {} samples",
                ClassId::new(missing as u8).unwrap().name()
            )));
        }
    }

    let mut clf = clf.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut scratch = Scratch::new();
    let mut grads = ParamGrads::zeros();
    let mut trace = LossTrace {
        mean_loss: Vec::with_capacity(cfg.epochs),
    };

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            scratch.refresh_transposed(&clf);
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let (patch, label) = &data[idx];
                let logits = scratch.forward(&clf, patch);
                let probs = softmax(&logits);
                let li = label.id() as usize;
                total_loss += -probs[li].max(f64::MIN_POSITIVE).ln();
                let mut d_logits = probs;
                d_logits[li] -= 1.0;
                for d in &mut d_logits {
                    *d *= scale;
                }
                scratch.backward_params(&clf, &d_logits, &mut grads);
            }
            sgd_step(&mut clf, &grads, cfg.lr);
        }
        trace.mean_loss.push(total_loss / data.len() as f64);
    }

    if trace.mean_loss.len() >= 3 && trace.mean_loss.windows(2).take(2).any(|w| w[1] > w[0]) {
        eprintln!(
            "warning: training loss not monotone over first 3 epochs: {:?}",
            &trace.mean_loss[..3]
        );
    }
    Ok((clf, trace))
}

fn sgd_step(clf: &mut PatchClassifier, grads: &ParamGrads, lr: f64) {
    let pairs: [(&mut Vec<f64>, &Vec<f64>); 6] = [
        (&mut clf.conv1_w, &grads.conv1_w),
        (&mut clf.conv1_b, &grads.conv1_b),
        (&mut clf.conv2_w, &grads.conv2_w),
        (&mut clf.conv2_b, &grads.conv2_b),
        (&mut clf.fc_w, &grads.fc_w),
        (&mut clf.fc_b, &grads.fc_b),
    ];
    for (param, grad) in pairs {
        for (p, g) in param.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}

/// Training accuracy of `clf` on labeled patches.
pub fn accuracy(clf: &PatchClassifier, data: &[(Vec<f64>, ClassId)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy needs at least one sample"));
    }
    let mut scratch = Scratch::new();
    let mut hits = 0usize;
    for (patch, label) in data {
        net::validate_patch(patch)?;
        let logits = scratch.forward(clf, patch);
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        if best == label.id() as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Extract labeled 64x64 training patches from one image: a positive
/// centered on each ground-truth box (clamped to the frame, labeled with
/// the box's lowest class) plus `negatives` background patches sampled at
/// seeded positions that do not touch any box.
pub fn training_patches(
    img: &Image,
    boxes: &[GroundTruthBox],
    negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<f64>, ClassId)>> {
    require_grayscale(img)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < PATCH || h < PATCH {
        return Err(Error::invalid(format!(
            "image {w}x{h} is smaller than one {PATCH}x{PATCH} patch"
        )));
    }
    let mut out = Vec::new();
    for gt in boxes {
        let cx = gt.bbox.x as i64 + gt.bbox.w as i64 / 2;
        let cy = gt.bbox.y as i64 + gt.bbox.h as i64 / 2;
        let x0 = (cx - PATCH as i64 / 2).clamp(0, (w - PATCH) as i64) as usize;
        let y0 = (cy - PATCH as i64 / 2).clamp(0, (h - PATCH) as i64) as usize;
        out.push((extract(img, x0, y0), gt.labels[0]));
    }
    let intersects = |x0: usize, y0: usize| {
        boxes.iter().any(|gt| {
            let (bx, by) = (gt.bbox.x as usize, gt.bbox.y as usize);
            let (bw, bh) = (gt.bbox.w as usize, gt.bbox.h as usize);
            x0 < bx + bw && bx < x0 + PATCH && y0 < by + bh && by < y0 + PATCH
        })
    };
    for _ in 0..negatives {
        for _attempt in 0..50 {
            let x0 = rng.random_range(0..=w - PATCH);
            let y0 = rng.random_range(0..=h - PATCH);
            if !intersects(x0, y0) {
                out.push((extract(img, x0, y0), ClassId::BACKGROUND));
                break;
            }
        }
    }
    Ok(out)
}

fn extract(img: &Image, x0: usize, y0: usize) -> Vec<f64> {
    let w = img.width() as usize;
    let mut patch = vec![0.0; PATCH_LEN];
    for py in 0..PATCH {
        let src = (y0 + py) * w + x0;
        for px in 0..PATCH {
            patch[py * PATCH + px] = img.pixels()[src + px] as f64 / 255.0;
        }
    }
    patch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::BBox;

    fn rand_patch(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..PATCH_LEN).map(|_| rng.random_range(0.0..=1.0)).collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<(Vec<f64>, ClassId)> = (0..12)
            .map(|i| (rand_patch(&mut rng), ClassId::new((i % 6) as u8).unwrap()))
            .collect();
        let clf = PatchClassifier::init(1);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let (trained, trace) = train(&clf, &data, &cfg).unwrap();
        assert_eq!(trained, clf);
        assert_eq!(trace.mean_loss.len(), 3);
    }

    #[test]
    fn overfits_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = vec![(rand_patch(&mut rng), ClassId::SPALLATION)];
        let cfg = TrainConfig {
            epochs: 200,
            lr: 0.1,
            require_all_classes: false,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&PatchClassifier::init(3), &data, &cfg).unwrap();
        let logits = trained.forward(&data[0].0).unwrap();
        let p = softmax(&logits)[ClassId::SPALLATION.id() as usize];
        assert!(-p.ln() < 0.01, "cross-entropy {} too high", -p.ln());
    }

    #[test]
    fn rejects_empty_and_missing_class() {
        let clf = PatchClassifier::init(0);
        let cfg = TrainConfig::default();
        assert!(train(&clf, &[], &cfg).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = vec![(rand_patch(&mut rng), ClassId::CRACK)];
        let err = train(&clf, &data, &cfg).unwrap_err();
        assert!(err.to_string().contains("background"));
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<(Vec<f64>, ClassId)> = (0..24)
            .map(|i| (rand_patch(&mut rng), ClassId::new((i % 6) as u8).unwrap()))
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let clf = PatchClassifier::init(9);
        let (a, ta) = train(&clf, &data, &cfg).unwrap();
        let (b, tb) = train(&clf, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn patch_extraction_clamps_and_avoids_boxes() {
        let img = Image::flat(128, 128, 100);
        let gt = GroundTruthBox::new(
            "img".into(),
            BBox::new(0, 0, 10, 10).unwrap(),
            vec![ClassId::CRACK],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches = training_patches(&img, &[gt], 3, &mut rng).unwrap();
        assert_eq!(patches.len(), 4);
        assert_eq!(patches[0].1, ClassId::CRACK);
        assert!(patches[1..].iter().all(|(_, c)| c.is_background()));
    }
}
