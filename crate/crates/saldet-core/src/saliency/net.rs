//! Fixed patch-classifier architecture with manual forward and
//! reverse-mode passes.
//!
//! Layout: 64x64x1 input in [0,1] -> conv 3x3x8 (same-padding, zero
//! border) -> ReLU -> 2x2 max-pool -> conv 3x3x16 -> ReLU -> 2x2 max-pool
//! -> flatten (channel-major) -> fully-connected to 6 logits. All
//! arithmetic is double precision.
//!
//! The conv kernels process 4 output channels over 16-wide column strips
//! so the compiler can keep the accumulators in vector registers; inputs
//! live in zero-padded buffers to keep the inner loops branch-free.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{ClassId, NUM_CLASSES};
use crate::morphology::FloatMap;

/// Input patch side in pixels.
pub const PATCH: usize = 64;
/// Conv layer filter counts.
pub const C1: usize = 8;
pub const C2: usize = 16;
/// Spatial side after each pool.
const P1: usize = PATCH / 2;
const P2: usize = P1 / 2;
/// Flattened feature length (channel-major: [channel][y][x]).
pub const FEAT: usize = C2 * P2 * P2;

pub const PATCH_LEN: usize = PATCH * PATCH;

const CONV1_W_LEN: usize = C1 * 1 * 9;
const CONV2_W_LEN: usize = C2 * C1 * 9;
const FC_W_LEN: usize = NUM_CLASSES * FEAT;

/// Trainable parameters of the fixed architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchClassifier {
    pub conv1_w: Vec<f64>, // [C1][1][3][3]
    pub conv1_b: Vec<f64>, // [C1]
    pub conv2_w: Vec<f64>, // [C2][C1][3][3]
    pub conv2_b: Vec<f64>, // [C2]
    pub fc_w: Vec<f64>,    // [NUM_CLASSES][FEAT]
    pub fc_b: Vec<f64>,    // [NUM_CLASSES]
}

impl PatchClassifier {
    /// All-zero parameters.
    pub fn zeros() -> PatchClassifier {
        PatchClassifier {
            conv1_w: vec![0.0; CONV1_W_LEN],
            conv1_b: vec![0.0; C1],
            conv2_w: vec![0.0; CONV2_W_LEN],
            conv2_b: vec![0.0; C2],
            fc_w: vec![0.0; FC_W_LEN],
            fc_b: vec![0.0; NUM_CLASSES],
        }
    }

    /// Glorot-uniform weights (k = sqrt(6/(fan_in+fan_out))), zero biases.
    pub fn init(seed: u64) -> PatchClassifier {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clf = PatchClassifier::zeros();
        let k1 = (6.0 / (9.0 + (C1 * 9) as f64)).sqrt();
        for w in &mut clf.conv1_w {
            *w = rng.random_range(-k1..=k1);
        }
        let k2 = (6.0 / ((C1 * 9) as f64 + (C2 * 9) as f64)).sqrt();
        for w in &mut clf.conv2_w {
            *w = rng.random_range(-k2..=k2);
        }
        let kf = (6.0 / (FEAT as f64 + NUM_CLASSES as f64)).sqrt();
        for w in &mut clf.fc_w {
            *w = rng.random_range(-kf..=kf);
        }
        clf
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            ("conv1.w", self.conv1_w.len(), CONV1_W_LEN),
            ("conv1.b", self.conv1_b.len(), C1),
            ("conv2.w", self.conv2_w.len(), CONV2_W_LEN),
            ("conv2.b", self.conv2_b.len(), C2),
            ("fc.w", self.fc_w.len(), FC_W_LEN),
            ("fc.b", self.fc_b.len(), NUM_CLASSES),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::invalid(format!(
                    "{name} has {got} parameters, expected {want}"
                )));
            }
        }
        for (name, tensor) in self.tensors() {
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }

    fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("conv1.w", &self.conv1_w),
            ("conv1.b", &self.conv1_b),
            ("conv2.w", &self.conv2_w),
            ("conv2.b", &self.conv2_b),
            ("fc.w", &self.fc_w),
            ("fc.b", &self.fc_b),
        ]
    }

    fn tensor_shape(name: &str) -> &'static [usize] {
        match name {
            "conv1.w" => &[C1, 1, 3, 3],
            "conv1.b" => &[C1],
            "conv2.w" => &[C2, C1, 3, 3],
            "conv2.b" => &[C2],
            "fc.w" => &[NUM_CLASSES, FEAT],
            "fc.b" => &[NUM_CLASSES],
            _ => unreachable!("fixed tensor set"),
        }
    }

    /// Classifier logits for a 64x64 patch with values in [0,1].
    pub fn forward(&self, patch: &[f64]) -> Result<[f64; NUM_CLASSES]> {
        validate_patch(patch)?;
        let mut scratch = Scratch::new();
        Ok(scratch.forward(self, patch))
    }

    /// Exact |d logit_c / d pixel| via reverse-mode backpropagation.
    pub fn input_gradient(&self, patch: &[f64], c: ClassId) -> Result<FloatMap> {
        validate_patch(patch)?;
        let mut scratch = Scratch::new();
        scratch.refresh_transposed(self);
        let mut grad = vec![0.0; PATCH_LEN];
        scratch.forward_backward_input(self, patch, c.id() as usize, &mut grad);
        for g in &mut grad {
            *g = g.abs();
        }
        FloatMap::new(PATCH, PATCH, grad)
    }

    /// Serialize as raw little-endian f64 plus a JSON sidecar
    /// (`<path>.json`) listing tensor names, shapes, and byte offsets.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut bytes = Vec::new();
        let mut sidecar = CheckpointSidecar {
            tensors: Vec::new(),
        };
        for (name, tensor) in self.tensors() {
            sidecar.tensors.push(TensorMeta {
                name: name.to_string(),
                shape: Self::tensor_shape(name).to_vec(),
                offset: bytes.len(),
            });
            for &v in tensor {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::imgio::write_atomic(path, &bytes)?;
        let json = serde_json::to_vec_pretty(&sidecar).expect("serializable sidecar");
        crate::imgio::write_atomic(&sidecar_path(path), &json)
    }

    pub fn load(path: &Path) -> Result<PatchClassifier> {
        let sc_path = sidecar_path(path);
        let sc_text = std::fs::read_to_string(&sc_path).map_err(|source| Error::Read {
            path: sc_path.clone(),
            source,
        })?;
        let sidecar: CheckpointSidecar =
            serde_json::from_str(&sc_text).map_err(|e| Error::Record {
                path: sc_path.clone(),
                line: 1,
                msg: e.to_string(),
            })?;
        let data = std::fs::read(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let ferr = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        let mut clf = PatchClassifier::zeros();
        for meta in &sidecar.tensors {
            let want_shape = match meta.name.as_str() {
                "conv1.w" | "conv1.b" | "conv2.w" | "conv2.b" | "fc.w" | "fc.b" => {
                    Self::tensor_shape(&meta.name)
                }
                other => {
                    return Err(ferr(meta.offset, format!("unknown tensor {other:?}")));
                }
            };
            if meta.shape != want_shape {
                return Err(ferr(
                    meta.offset,
                    format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        meta.name, meta.shape, want_shape
                    ),
                ));
            }
            let len: usize = meta.shape.iter().product();
            let end = meta.offset + len * 8;
            if end > data.len() {
                return Err(ferr(
                    data.len(),
                    format!("tensor {} runs past end of file", meta.name),
                ));
            }
            let dst: &mut Vec<f64> = match meta.name.as_str() {
                "conv1.w" => &mut clf.conv1_w,
                "conv1.b" => &mut clf.conv1_b,
                "conv2.w" => &mut clf.conv2_w,
                "conv2.b" => &mut clf.conv2_b,
                "fc.w" => &mut clf.fc_w,
                "fc.b" => &mut clf.fc_b,
                _ => unreachable!("validated above"),
            };
            for (i, chunk) in data[meta.offset..end].chunks_exact(8).enumerate() {
                dst[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        clf.validate()?;
        Ok(clf)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    std::path::PathBuf::from(os)
}

#[derive(Serialize, Deserialize)]
struct CheckpointSidecar {
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub(crate) fn validate_patch(patch: &[f64]) -> Result<()> {
    if patch.len() != PATCH_LEN {
        return Err(Error::invalid(format!(
            "patch has {} values, expected {PATCH_LEN} (64x64)",
            patch.len()
        )));
    }
    if patch.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("patch values must lie in [0,1]"));
    }
    Ok(())
}

#[inline(always)]
fn fmadd(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// 3x3 convolution over a zero-padded input ([IC][W+2][W+2]) into a dense
/// output ([OC][W][W]), 4 output channels x 16-wide strips per block.
/// Weights are [OC][IC][3][3]. Requires OC % 4 == 0 and W % 16 == 0.
/// Reference path; builds with AVX-512 dispatch to `zmm` instead.
#[cfg_attr(
    all(target_arch = "x86_64", target_feature = "avx512f"),
    allow(dead_code)
)]
fn conv3x3_block4<const IC: usize, const OC: usize, const W: usize>(
    inp: &[f64],
    w: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    const { assert!(OC % 4 == 0 && W % 16 == 0) };
    let pw = W + 2;
    for ocb in 0..OC / 4 {
        let oc = ocb * 4;
        for y in 0..W {
            let mut xb = 0;
            while xb < W {
                let mut acc = [[0.0f64; 16]; 4];
                for k in 0..4 {
                    acc[k] = [bias[oc + k]; 16];
                }
                for ic in 0..IC {
                    for ky in 0..3 {
                        let row = (ic * pw + y + ky) * pw + xb;
                        for kx in 0..3 {
                            let src: &[f64; 16] = inp[row + kx..row + kx + 16]
                                .try_into()
                                .expect("strip in bounds");
                            for k in 0..4 {
                                let wv = w[((oc + k) * IC + ic) * 9 + ky * 3 + kx];
                                for j in 0..16 {
                                    acc[k][j] = fmadd(src[j], wv, acc[k][j]);
                                }
                            }
                        }
                    }
                }
                for k in 0..4 {
                    let base = ((oc + k) * W + y) * W + xb;
                    out[base..base + 16].copy_from_slice(&acc[k]);
                }
                xb += 16;
            }
        }
    }
}

/// Single-output-channel variant processing one full row per block; used
/// for the gradient back to the input plane.
#[cfg_attr(
    all(target_arch = "x86_64", target_feature = "avx512f"),
    allow(dead_code)
)]
fn conv3x3_single<const IC: usize, const W: usize>(
    inp: &[f64],
    w: &[f64],
    out: &mut [f64],
) {
    let pw = W + 2;
    for y in 0..W {
        let mut acc = [0.0f64; W];
        for ic in 0..IC {
            for ky in 0..3 {
                let row = (ic * pw + y + ky) * pw;
                for kx in 0..3 {
                    let wv = w[ic * 9 + ky * 3 + kx];
                    let src: &[f64; W] = inp[row + kx..row + kx + W]
                        .try_into()
                        .expect("row in bounds");
                    for j in 0..W {
                        acc[j] = fmadd(src[j], wv, acc[j]);
                    }
                }
            }
        }
        out[y * W..(y + 1) * W].copy_from_slice(&acc);
    }
}

/// In-place ReLU. `max` keeps the loop branch-free; saliency inputs are
/// noise-perturbed, so a compare-and-branch here mispredicts constantly.
#[cfg_attr(
    all(target_arch = "x86_64", target_feature = "avx512f"),
    allow(dead_code)
)]
fn relu(buf: &mut [f64]) {
    for v in buf {
        *v = v.max(0.0);
    }
}

/// 512-bit kernels for the fixed layer shapes, selected when the build
/// target has AVX-512. The autovectorizer keeps the portable kernels at
/// 256-bit vectors, leaving half the FMA throughput idle, and saliency
/// spends nearly all its time in these loops. Accumulation order per
/// output element (bias, then ic-major 3x3 taps) matches the portable
/// kernels exactly, so both paths produce identical bits.
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
mod zmm {
    use super::{C1, P1, PATCH};
    use std::arch::x86_64::*;

    /// conv1 + bias + ReLU: [1][66][66] -> [C1][64][64], weights [C1][3][3].
    /// Four output channels x 32-wide half-rows: each strip load feeds four
    /// accumulators, and the 16 accumulators plus strip and tap registers
    /// stay inside the 32 zmm registers.
    pub fn conv1_relu(inp: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
        const PW: usize = PATCH + 2;
        assert_eq!(inp.len(), PW * PW);
        assert_eq!(w.len(), C1 * 9);
        assert_eq!(bias.len(), C1);
        assert_eq!(out.len(), C1 * PATCH * PATCH);
        unsafe {
            for ocb in 0..C1 / 4 {
                let oc = ocb * 4;
                for y in 0..PATCH {
                    for xh in 0..2 {
                        let xb = xh * (PATCH / 2);
                        let mut acc: [[__m512d; PATCH / 16]; 4] =
                            core::array::from_fn(|k| [_mm512_set1_pd(bias[oc + k]); PATCH / 16]);
                        for ky in 0..3 {
                            let row = inp.as_ptr().add((y + ky) * PW + xb);
                            for kx in 0..3 {
                                let t = ky * 3 + kx;
                                let w0 = _mm512_set1_pd(*w.get_unchecked(oc * 9 + t));
                                let w1 = _mm512_set1_pd(*w.get_unchecked((oc + 1) * 9 + t));
                                let w2 = _mm512_set1_pd(*w.get_unchecked((oc + 2) * 9 + t));
                                let w3 = _mm512_set1_pd(*w.get_unchecked((oc + 3) * 9 + t));
                                for ch in 0..PATCH / 16 {
                                    let s = _mm512_loadu_pd(row.add(kx + ch * 8));
                                    acc[0][ch] = _mm512_fmadd_pd(s, w0, acc[0][ch]);
                                    acc[1][ch] = _mm512_fmadd_pd(s, w1, acc[1][ch]);
                                    acc[2][ch] = _mm512_fmadd_pd(s, w2, acc[2][ch]);
                                    acc[3][ch] = _mm512_fmadd_pd(s, w3, acc[3][ch]);
                                }
                            }
                        }
                        let z = _mm512_setzero_pd();
                        for k in 0..4 {
                            let o = out.as_mut_ptr().add(((oc + k) * PATCH + y) * PATCH + xb);
                            for ch in 0..PATCH / 16 {
                                _mm512_storeu_pd(o.add(ch * 8), _mm512_max_pd(acc[k][ch], z));
                            }
                        }
                    }
                }
            }
        }
    }

    /// 3x3 conv on the pooled 32x32 planes: [IC][34][34] -> [OC][32][32],
    /// weights [OC][IC][3][3], ReLU fused when `RELU`.
    pub fn conv_p1<const IC: usize, const OC: usize, const RELU: bool>(
        inp: &[f64],
        w: &[f64],
        bias: &[f64],
        out: &mut [f64],
    ) {
        const { assert!(OC % 4 == 0) };
        const PW: usize = P1 + 2;
        assert_eq!(inp.len(), IC * PW * PW);
        assert_eq!(w.len(), OC * IC * 9);
        assert_eq!(bias.len(), OC);
        assert_eq!(out.len(), OC * P1 * P1);
        unsafe {
            for ocb in 0..OC / 4 {
                let oc = ocb * 4;
                for y in 0..P1 {
                    let mut acc: [[__m512d; P1 / 8]; 4] =
                        core::array::from_fn(|k| [_mm512_set1_pd(bias[oc + k]); P1 / 8]);
                    for ic in 0..IC {
                        for ky in 0..3 {
                            let row = inp.as_ptr().add((ic * PW + y + ky) * PW);
                            for kx in 0..3 {
                                let t = ky * 3 + kx;
                                let w0 =
                                    _mm512_set1_pd(*w.get_unchecked((oc * IC + ic) * 9 + t));
                                let w1 = _mm512_set1_pd(
                                    *w.get_unchecked(((oc + 1) * IC + ic) * 9 + t),
                                );
                                let w2 = _mm512_set1_pd(
                                    *w.get_unchecked(((oc + 2) * IC + ic) * 9 + t),
                                );
                                let w3 = _mm512_set1_pd(
                                    *w.get_unchecked(((oc + 3) * IC + ic) * 9 + t),
                                );
                                for ch in 0..P1 / 8 {
                                    let s = _mm512_loadu_pd(row.add(kx + ch * 8));
                                    acc[0][ch] = _mm512_fmadd_pd(s, w0, acc[0][ch]);
                                    acc[1][ch] = _mm512_fmadd_pd(s, w1, acc[1][ch]);
                                    acc[2][ch] = _mm512_fmadd_pd(s, w2, acc[2][ch]);
                                    acc[3][ch] = _mm512_fmadd_pd(s, w3, acc[3][ch]);
                                }
                            }
                        }
                    }
                    for k in 0..4 {
                        let o = out.as_mut_ptr().add(((oc + k) * P1 + y) * P1);
                        for ch in 0..P1 / 8 {
                            let v = if RELU {
                                _mm512_max_pd(acc[k][ch], _mm512_setzero_pd())
                            } else {
                                acc[k][ch]
                            };
                            _mm512_storeu_pd(o.add(ch * 8), v);
                        }
                    }
                }
            }
        }
    }

    /// Pool-argmax gradient routing, 8 pooled cells per step. Tie-break and
    /// the ReLU gate match the scalar version: the first maximum in scan
    /// order (tl, tr, bl, br) takes the gradient, blocked when the max
    /// is <= 0. Lane plumbing: even/odd compress splits the two act rows
    /// into the four pool candidates, lo/hi interleave spreads the routed
    /// gradients back out to the two output rows.
    pub fn unpool<const C: usize, const W: usize>(
        act: &[f64],
        g_pooled: &[f64],
        g_out_pad: &mut [f64],
    ) {
        const { assert!(W % 16 == 0) };
        let half = W / 2;
        let pw = W + 2;
        assert_eq!(act.len(), C * W * W);
        assert_eq!(g_pooled.len(), C * half * half);
        assert_eq!(g_out_pad.len(), C * pw * pw);
        unsafe {
            let even = _mm512_setr_epi64(0, 2, 4, 6, 8, 10, 12, 14);
            let odd = _mm512_setr_epi64(1, 3, 5, 7, 9, 11, 13, 15);
            let ilo = _mm512_setr_epi64(0, 8, 1, 9, 2, 10, 3, 11);
            let ihi = _mm512_setr_epi64(4, 12, 5, 13, 6, 14, 7, 15);
            let zero = _mm512_setzero_pd();
            for c in 0..C {
                for py in 0..half {
                    let r0 = act.as_ptr().add((c * W + 2 * py) * W);
                    let r1 = r0.add(W);
                    let gr = g_pooled.as_ptr().add((c * half + py) * half);
                    let oe = g_out_pad.as_mut_ptr().add((c * pw + 2 * py + 1) * pw + 1);
                    let oo = oe.add(pw);
                    for i in 0..half / 8 {
                        let za0 = _mm512_loadu_pd(r0.add(16 * i));
                        let za1 = _mm512_loadu_pd(r0.add(16 * i + 8));
                        let zb0 = _mm512_loadu_pd(r1.add(16 * i));
                        let zb1 = _mm512_loadu_pd(r1.add(16 * i + 8));
                        let v0 = _mm512_permutex2var_pd(za0, even, za1);
                        let v1 = _mm512_permutex2var_pd(za0, odd, za1);
                        let v2 = _mm512_permutex2var_pd(zb0, even, zb1);
                        let v3 = _mm512_permutex2var_pd(zb0, odd, zb1);
                        let m = _mm512_max_pd(_mm512_max_pd(v0, v1), _mm512_max_pd(v2, v3));
                        let k0 = _mm512_cmp_pd_mask::<_CMP_EQ_OQ>(v0, m);
                        let k1 = _mm512_cmp_pd_mask::<_CMP_EQ_OQ>(v1, m) & !k0;
                        let k2 = _mm512_cmp_pd_mask::<_CMP_EQ_OQ>(v2, m) & !(k0 | k1);
                        let k3 = !(k0 | k1 | k2);
                        let kpos = _mm512_cmp_pd_mask::<_CMP_GT_OQ>(m, zero);
                        let g = _mm512_maskz_mov_pd(kpos, _mm512_loadu_pd(gr.add(8 * i)));
                        let g0 = _mm512_maskz_mov_pd(k0, g);
                        let g1 = _mm512_maskz_mov_pd(k1, g);
                        let g2 = _mm512_maskz_mov_pd(k2, g);
                        let g3 = _mm512_maskz_mov_pd(k3, g);
                        _mm512_storeu_pd(oe.add(16 * i), _mm512_permutex2var_pd(g0, ilo, g1));
                        _mm512_storeu_pd(
                            oe.add(16 * i + 8),
                            _mm512_permutex2var_pd(g0, ihi, g1),
                        );
                        _mm512_storeu_pd(oo.add(16 * i), _mm512_permutex2var_pd(g2, ilo, g3));
                        _mm512_storeu_pd(
                            oo.add(16 * i + 8),
                            _mm512_permutex2var_pd(g2, ihi, g3),
                        );
                    }
                }
            }
        }
    }

    /// Gradient back to the input plane: [C1][66][66] -> [64][64],
    /// weights [C1][3][3] (already flipped by the caller).
    pub fn conv1_t(inp: &[f64], w: &[f64], out: &mut [f64]) {
        const PW: usize = PATCH + 2;
        assert_eq!(inp.len(), C1 * PW * PW);
        assert_eq!(w.len(), C1 * 9);
        assert_eq!(out.len(), PATCH * PATCH);
        unsafe {
            for y in 0..PATCH {
                let mut acc = [_mm512_setzero_pd(); PATCH / 8];
                for ic in 0..C1 {
                    for ky in 0..3 {
                        let row = inp.as_ptr().add((ic * PW + y + ky) * PW);
                        for kx in 0..3 {
                            let wv = _mm512_set1_pd(*w.get_unchecked(ic * 9 + ky * 3 + kx));
                            for ch in 0..PATCH / 8 {
                                let s = _mm512_loadu_pd(row.add(kx + ch * 8));
                                acc[ch] = _mm512_fmadd_pd(s, wv, acc[ch]);
                            }
                        }
                    }
                }
                let o = out.as_mut_ptr().add(y * PATCH);
                for ch in 0..PATCH / 8 {
                    _mm512_storeu_pd(o.add(ch * 8), acc[ch]);
                }
            }
        }
    }
}

/// conv1 + ReLU into `act1`.
fn conv1_layer(x_pad: &[f64], w: &[f64], bias: &[f64], act1: &mut [f64]) {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    zmm::conv1_relu(x_pad, w, bias, act1);
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
    {
        conv3x3_block4::<1, C1, PATCH>(x_pad, w, bias, act1);
        relu(act1);
    }
}

/// conv2 + ReLU into `act2`.
fn conv2_layer(pool1_pad: &[f64], w: &[f64], bias: &[f64], act2: &mut [f64]) {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    zmm::conv_p1::<C1, C2, true>(pool1_pad, w, bias, act2);
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
    {
        conv3x3_block4::<C1, C2, P1>(pool1_pad, w, bias, act2);
        relu(act2);
    }
}

/// Gradient through conv2: transposed kernels over the padded layer-2
/// gradient plane.
fn conv2_back(g_act2_pad: &[f64], t2_w: &[f64], g_pool1: &mut [f64]) {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    zmm::conv_p1::<C2, C1, false>(g_act2_pad, t2_w, &[0.0; C1], g_pool1);
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
    conv3x3_block4::<C2, C1, P1>(g_act2_pad, t2_w, &[0.0; C1], g_pool1);
}

/// Gradient through conv1 back to the input plane.
fn conv1_back(g_act1_pad: &[f64], t1_w: &[f64], grad: &mut [f64]) {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    zmm::conv1_t(g_act1_pad, t1_w, grad);
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
    conv3x3_single::<C1, PATCH>(g_act1_pad, t1_w, grad);
}

/// 2x2 max-pool of [C][W][W] into the center of a zero-padded
/// [C][W/2+2][W/2+2] buffer.
fn pool_into_padded<const C: usize, const W: usize>(act: &[f64], out_pad: &mut [f64]) {
    let half = W / 2;
    let pw = half + 2;
    for c in 0..C {
        for py in 0..half {
            let base = (c * W + 2 * py) * W;
            let dst = (c * pw + py + 1) * pw + 1;
            for px in 0..half {
                let i = base + 2 * px;
                let m = act[i].max(act[i + 1]).max(act[i + W]).max(act[i + W + 1]);
                out_pad[dst + px] = m;
            }
        }
    }
}

/// 2x2 max-pool of [C][W][W] into a dense [C][W/2][W/2] buffer.
fn pool_dense<const C: usize, const W: usize>(act: &[f64], out: &mut [f64]) {
    let half = W / 2;
    for c in 0..C {
        for py in 0..half {
            let base = (c * W + 2 * py) * W;
            let dst = (c * half + py) * half;
            for px in 0..half {
                let i = base + 2 * px;
                let m = act[i].max(act[i + 1]).max(act[i + W]).max(act[i + W + 1]);
                out[dst + px] = m;
            }
        }
    }
}

/// Route pooled gradients back through the pool argmax and the ReLU mask.
/// `act` holds post-ReLU values; the first maximum in scan order
/// (top-left, top-right, bottom-left, bottom-right) receives the gradient,
/// and a zero activation blocks it. Writes every slot of the 2x2 blocks in
/// the center of the zero-padded output.
fn unpool_into_padded<const C: usize, const W: usize>(
    act: &[f64],
    g_pooled: &[f64],
    g_out_pad: &mut [f64],
) {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    zmm::unpool::<C, W>(act, g_pooled, g_out_pad);
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
    unpool_scalar::<C, W>(act, g_pooled, g_out_pad);
}

/// Reference path for `unpool_into_padded`.
#[cfg_attr(
    all(target_arch = "x86_64", target_feature = "avx512f"),
    allow(dead_code)
)]
fn unpool_scalar<const C: usize, const W: usize>(
    act: &[f64],
    g_pooled: &[f64],
    g_out_pad: &mut [f64],
) {
    let half = W / 2;
    let pw = W + 2;
    for c in 0..C {
        for py in 0..half {
            for px in 0..half {
                let i = (c * W + 2 * py) * W + 2 * px;
                let v0 = act[i];
                let v1 = act[i + 1];
                let v2 = act[i + W];
                let v3 = act[i + W + 1];
                let m = v0.max(v1).max(v2).max(v3);
                // First index holding the maximum; selects instead of a
                // scan because the argmax is data-dependent noise.
                let mut arg = 3usize;
                arg = if v2 == m { 2 } else { arg };
                arg = if v1 == m { 1 } else { arg };
                arg = if v0 == m { 0 } else { arg };
                let g = g_pooled[(c * half + py) * half + px] * f64::from(m > 0.0);
                let o = (c * pw + 2 * py + 1) * pw + 2 * px + 1;
                g_out_pad[o] = g * f64::from(arg == 0);
                g_out_pad[o + 1] = g * f64::from(arg == 1);
                g_out_pad[o + pw] = g * f64::from(arg == 2);
                g_out_pad[o + pw + 1] = g * f64::from(arg == 3);
            }
        }
    }
}

/// Accumulate weight gradients: dW[oc][ic][ky][kx] += sum over the output
/// plane of g_out[oc] * inp_pad[ic] at the tap offset; dB[oc] += sum g_out.
fn conv3x3_wgrad<const IC: usize, const OC: usize, const W: usize>(
    inp_pad: &[f64],
    g_out: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let pw = W + 2;
    for oc in 0..OC {
        let g_plane = &g_out[oc * W * W..(oc + 1) * W * W];
        let mut bsum = 0.0;
        for &g in g_plane {
            bsum += g;
        }
        db[oc] += bsum;
        for ic in 0..IC {
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut s = 0.0;
                    for y in 0..W {
                        let g_row = &g_plane[y * W..(y + 1) * W];
                        let i_row = &inp_pad[(ic * pw + y + ky) * pw + kx..][..W];
                        for j in 0..W {
                            s = fmadd(g_row[j], i_row[j], s);
                        }
                    }
                    dw[((oc * IC + ic) * 3 + ky) * 3 + kx] += s;
                }
            }
        }
    }
}

/// Reusable buffers for forward/backward passes. Padded buffers are
/// zeroed once; passes only ever write their interiors. Callers that
/// need signed input gradients use this directly; `input_gradient`
/// returns magnitudes.
pub struct Scratch {
    x_pad: Vec<f64>,      // [1][66][66]
    act1: Vec<f64>,       // [C1][64][64] post-ReLU
    pool1_pad: Vec<f64>,  // [C1][34][34]
    act2: Vec<f64>,       // [C2][32][32] post-ReLU
    pool2: Vec<f64>,      // [C2][16][16] == features
    g_feat: Vec<f64>,     // [FEAT]
    g_act2_pad: Vec<f64>, // [C2][34][34]
    g_pool1: Vec<f64>,    // [C1][32][32]
    g_act1_pad: Vec<f64>, // [C1][66][66]
    g_act2_dense: Vec<f64>, // [C2][32][32], training only
    g_act1_dense: Vec<f64>, // [C1][64][64], training only
    t1_w: Vec<f64>,       // conv1 weights flipped, [1][C1][3][3]
    t2_w: Vec<f64>,       // conv2 weights flipped+transposed, [C1][C2][3][3]
}

/// Copy the interior of a zero-padded [C][W+2][W+2] buffer into a dense
/// [C][W][W] one.
fn strip_padding<const C: usize, const W: usize>(pad: &[f64], dense: &mut [f64]) {
    let pw = W + 2;
    for c in 0..C {
        for y in 0..W {
            let src = (c * pw + y + 1) * pw + 1;
            let dst = (c * W + y) * W;
            dense[dst..dst + W].copy_from_slice(&pad[src..src + W]);
        }
    }
}

impl Scratch {
    pub fn new() -> Scratch {
        const PAD1: usize = (PATCH + 2) * (PATCH + 2);
        const PADP1: usize = (P1 + 2) * (P1 + 2);
        Scratch {
            x_pad: vec![0.0; PAD1],
            act1: vec![0.0; C1 * PATCH_LEN],
            pool1_pad: vec![0.0; C1 * PADP1],
            act2: vec![0.0; C2 * P1 * P1],
            pool2: vec![0.0; FEAT],
            g_feat: vec![0.0; FEAT],
            g_act2_pad: vec![0.0; C2 * PADP1],
            g_pool1: vec![0.0; C1 * P1 * P1],
            g_act1_pad: vec![0.0; C1 * PAD1],
            g_act2_dense: vec![0.0; C2 * P1 * P1],
            g_act1_dense: vec![0.0; C1 * PATCH_LEN],
            t1_w: vec![0.0; CONV1_W_LEN],
            t2_w: vec![0.0; CONV2_W_LEN],
        }
    }

    /// Rebuild the flipped/transposed kernels used by the backward pass.
    /// Call after any parameter change, before backward passes.
    pub fn refresh_transposed(&mut self, clf: &PatchClassifier) {
        for oc in 0..C1 {
            for ky in 0..3 {
                for kx in 0..3 {
                    self.t1_w[(oc * 3 + ky) * 3 + kx] =
                        clf.conv1_w[(oc * 3 + (2 - ky)) * 3 + (2 - kx)];
                }
            }
        }
        for o in 0..C1 {
            for i in 0..C2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        self.t2_w[((o * C2 + i) * 3 + ky) * 3 + kx] =
                            clf.conv2_w[((i * C1 + o) * 3 + (2 - ky)) * 3 + (2 - kx)];
                    }
                }
            }
        }
    }

    /// Run the conv/pool trunk, leaving activations in the buffers.
    fn trunk(&mut self, clf: &PatchClassifier, patch: &[f64]) {
        debug_assert_eq!(patch.len(), PATCH_LEN);
        for y in 0..PATCH {
            let dst = (y + 1) * (PATCH + 2) + 1;
            self.x_pad[dst..dst + PATCH].copy_from_slice(&patch[y * PATCH..(y + 1) * PATCH]);
        }
        conv1_layer(&self.x_pad, &clf.conv1_w, &clf.conv1_b, &mut self.act1);
        pool_into_padded::<C1, PATCH>(&self.act1, &mut self.pool1_pad);
        conv2_layer(&self.pool1_pad, &clf.conv2_w, &clf.conv2_b, &mut self.act2);
        pool_dense::<C2, P1>(&self.act2, &mut self.pool2);
    }

    /// Full forward pass returning all logits.
    pub fn forward(&mut self, clf: &PatchClassifier, patch: &[f64]) -> [f64; NUM_CLASSES] {
        self.trunk(clf, patch);
        let mut logits = [0.0; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            let row = &clf.fc_w[k * FEAT..(k + 1) * FEAT];
            let mut s = clf.fc_b[k];
            for j in 0..FEAT {
                s = fmadd(row[j], self.pool2[j], s);
            }
            logits[k] = s;
        }
        logits
    }

    /// Forward then backward for d logit_c / d input; `grad` receives the
    /// signed gradient. `refresh_transposed` must be current.
    pub fn forward_backward_input(
        &mut self,
        clf: &PatchClassifier,
        patch: &[f64],
        c: usize,
        grad: &mut [f64],
    ) {
        self.trunk(clf, patch);
        // d logit_c / d features is the c-th fc row; the logit value
        // itself is not needed.
        self.g_feat
            .copy_from_slice(&clf.fc_w[c * FEAT..(c + 1) * FEAT]);
        self.backward_from_features(grad);
    }

    /// Backward from `g_feat` through the trunk to the input plane.
    fn backward_from_features(&mut self, grad: &mut [f64]) {
        unpool_into_padded::<C2, P1>(&self.act2, &self.g_feat, &mut self.g_act2_pad);
        conv2_back(&self.g_act2_pad, &self.t2_w, &mut self.g_pool1);
        unpool_into_padded::<C1, PATCH>(&self.act1, &self.g_pool1, &mut self.g_act1_pad);
        conv1_back(&self.g_act1_pad, &self.t1_w, grad);
    }

    /// Training backward: softmax cross-entropy gradient from `d_logits`
    /// accumulated into `grads`. Activations must hold the sample's
    /// forward state.
    pub(crate) fn backward_params(
        &mut self,
        clf: &PatchClassifier,
        d_logits: &[f64; NUM_CLASSES],
        grads: &mut ParamGrads,
    ) {
        for k in 0..NUM_CLASSES {
            grads.fc_b[k] += d_logits[k];
            let dw = &mut grads.fc_w[k * FEAT..(k + 1) * FEAT];
            let d = d_logits[k];
            for j in 0..FEAT {
                dw[j] = fmadd(d, self.pool2[j], dw[j]);
            }
        }
        for j in 0..FEAT {
            let mut s = 0.0;
            for k in 0..NUM_CLASSES {
                s = fmadd(clf.fc_w[k * FEAT + j], d_logits[k], s);
            }
            self.g_feat[j] = s;
        }
        unpool_into_padded::<C2, P1>(&self.act2, &self.g_feat, &mut self.g_act2_pad);
        // Weight gradients read the dense (unpadded) gradient plane.
        strip_padding::<C2, P1>(&self.g_act2_pad, &mut self.g_act2_dense);
        conv3x3_wgrad::<C1, C2, P1>(
            &self.pool1_pad,
            &self.g_act2_dense,
            &mut grads.conv2_w,
            &mut grads.conv2_b,
        );
        conv2_back(&self.g_act2_pad, &self.t2_w, &mut self.g_pool1);
        unpool_into_padded::<C1, PATCH>(&self.act1, &self.g_pool1, &mut self.g_act1_pad);
        strip_padding::<C1, PATCH>(&self.g_act1_pad, &mut self.g_act1_dense);
        conv3x3_wgrad::<1, C1, PATCH>(
            &self.x_pad,
            &self.g_act1_dense,
            &mut grads.conv1_w,
            &mut grads.conv1_b,
        );
    }
}

/// Parameter-shaped gradient accumulators.
pub(crate) struct ParamGrads {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros() -> ParamGrads {
        ParamGrads {
            conv1_w: vec![0.0; CONV1_W_LEN],
            conv1_b: vec![0.0; C1],
            conv2_w: vec![0.0; CONV2_W_LEN],
            conv2_b: vec![0.0; C2],
            fc_w: vec![0.0; FC_W_LEN],
            fc_b: vec![0.0; NUM_CLASSES],
        }
    }

    pub fn clear(&mut self) {
        self.conv1_w.fill(0.0);
        self.conv1_b.fill(0.0);
        self.conv2_w.fill(0.0);
        self.conv2_b.fill(0.0);
        self.fc_w.fill(0.0);
        self.fc_b.fill(0.0);
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let mut m = logits[0];
    for &v in &logits[1..] {
        m = m.max(v);
    }
    let mut out = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for k in 0..NUM_CLASSES {
        out[k] = (logits[k] - m).exp();
        sum += out[k];
    }
    for v in &mut out {
        *v /= sum;
    }
    out
}
