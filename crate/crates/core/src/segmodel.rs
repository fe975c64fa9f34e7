//! Per-pixel segmentation network with hand-derived gradients.
//!
//! Each pixel is classified from its 3×3 neighbourhood (edge-replicated, all
//! channels) plus its normalized row/column coordinates, all shifted by −0.5
//! so inputs are roughly centred:
//!
//! ```text
//! x (9·channels + 2) → squareplus(W1 x + b1) = z (hidden) → W2 z + b2 = logits (classes)
//! ```
//!
//! `z` is the penultimate feature used for rank statistics. Squareplus,
//! `(x + sqrt(x² + 4)) / 2`, keeps it strictly positive and smooth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{argmax, ce_unchecked, check_finite, softmax_into, Tensor2, Tensor3};
use crate::maskgeom::LabelMap;

pub const DEFAULT_HIDDEN: usize = 16;
/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.1;
/// Subtracted from every pixel value and normalized coordinate.
pub const INPUT_SHIFT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegModelConfig {
    /// Image channels.
    pub channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl SegModelConfig {
    pub fn input_dim(&self) -> usize {
        9 * self.channels + 2
    }

    pub fn num_params(&self) -> usize {
        let (i, h, c) = (self.input_dim(), self.hidden, self.num_classes);
        h * i + h + c * h + c
    }
}

/// Two affine layers with a squareplus between them, stored as one flat
/// parameter vector `[W1 | b1 | W2 | b2]` (weights row-major, output-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModel {
    config: SegModelConfig,
    params: Vec<f64>,
}

/// Row-major per-pixel inputs for a batch of pixels, with targets and loss
/// weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelBatch {
    pub input_dim: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl PixelBatch {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn push(&mut self, input: &[f64], target: usize, weight: f64) {
        debug_assert_eq!(input.len(), self.input_dim);
        self.inputs.extend_from_slice(input);
        self.targets.push(target);
        self.weights.push(weight);
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn extend(&mut self, other: &PixelBatch) {
        debug_assert_eq!(self.input_dim, other.input_dim);
        self.inputs.extend_from_slice(&other.inputs);
        self.targets.extend_from_slice(&other.targets);
        self.weights.extend_from_slice(&other.weights);
    }
}

#[inline]
fn squareplus(x: f64) -> f64 {
    // squareplus(-a) = 1 / squareplus(a); avoids cancellation for negative x
    let big = 0.5 * (x.abs() + (x * x + 4.0).sqrt());
    if x >= 0.0 {
        big
    } else {
        big.recip()
    }
}

#[inline]
fn squareplus_grad(x: f64) -> f64 {
    0.5 * (1.0 + x / (x * x + 4.0).sqrt())
}

struct Kernel {
    hid: usize,
    nc: usize,
    /// `input_dim × hidden`.
    w1t: Vec<f64>,
    b1: Vec<f64>,
    /// `hidden × classes`.
    w2t: Vec<f64>,
    b2: Vec<f64>,
}

impl Kernel {
    /// Hidden pre-activations, features and logits for one pixel input.
    #[inline]
    fn pixel_forward(&self, x: &[f64], pre: &mut [f64], z: &mut [f64], logits: &mut [f64]) {
        let nc = self.nc;
        pre.copy_from_slice(&self.b1);
        match self.hid {
            8 => accumulate_fixed::<8>(&self.w1t, x, pre),
            16 => accumulate_fixed::<16>(&self.w1t, x, pre),
            32 => accumulate_fixed::<32>(&self.w1t, x, pre),
            hid => {
                for (row, &v) in self.w1t.chunks_exact(hid).zip(x) {
                    for (a, w) in pre.iter_mut().zip(row) {
                        *a += w * v;
                    }
                }
            }
        }
        logits.copy_from_slice(&self.b2);
        for ((zj, &a), row) in z.iter_mut().zip(pre.iter()).zip(self.w2t.chunks_exact(nc)) {
            *zj = squareplus(a);
            for (l, w) in logits.iter_mut().zip(row) {
                *l += w * *zj;
            }
        }
    }
}

/// `acc += Σ_i x_i · w_i` with a compile-time width, so the loop over hidden
/// units unrolls; same per-unit operation order as the generic path.
#[inline]
fn accumulate_fixed<const H: usize>(w1t: &[f64], x: &[f64], acc: &mut [f64]) {
    let acc: &mut [f64; H] = acc.try_into().expect("hidden width");
    for (row, &v) in w1t.chunks_exact(H).zip(x) {
        let row: &[f64; H] = row.try_into().expect("hidden width");
        for j in 0..H {
            acc[j] += row[j] * v;
        }
    }
}

/// Patch inputs for every pixel of `image`, row-major, `input_dim` values each.
pub fn extract_patches(image: &Tensor3) -> Vec<f64> {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let dim = 9 * ch + 2;
    let mut out = Vec::with_capacity(h * w * dim);
    let rn = if h > 1 { (h - 1) as f64 } else { 1.0 };
    let cn = if w > 1 { (w - 1) as f64 } else { 1.0 };
    for r in 0..h {
        for c in 0..w {
            for dr in [-1isize, 0, 1] {
                let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                for dc in [-1isize, 0, 1] {
                    let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                    out.extend(image.pixel(rr, cc).iter().map(|v| v - INPUT_SHIFT));
                }
            }
            out.push(r as f64 / rn - INPUT_SHIFT);
            out.push(c as f64 / cn - INPUT_SHIFT);
        }
    }
    out
}

impl SegModel {
    /// Uniform `[-INIT_SCALE, INIT_SCALE]` initialization.
    pub fn new(config: SegModelConfig, seed: u64) -> Result<Self> {
        Self::validate_config(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..config.num_params())
            .map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        Ok(Self { config, params })
    }

    pub fn zeros(config: SegModelConfig) -> Result<Self> {
        Self::validate_config(&config)?;
        Ok(Self {
            params: vec![0.0; config.num_params()],
            config,
        })
    }

    pub fn from_params(config: SegModelConfig, params: Vec<f64>) -> Result<Self> {
        Self::validate_config(&config)?;
        if params.len() != config.num_params() {
            return Err(Error::DimMismatch {
                expected: config.num_params(),
                actual: params.len(),
            });
        }
        check_finite(&params)?;
        Ok(Self { config, params })
    }

    fn validate_config(config: &SegModelConfig) -> Result<()> {
        if config.channels == 0 || config.hidden == 0 || config.num_classes < 2 {
            return Err(Error::InvalidConfig(format!("degenerate model config {config:?}")));
        }
        Ok(())
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let (i, h, c) = (self.config.input_dim(), self.config.hidden, self.config.num_classes);
        let b1 = h * i;
        let w2 = b1 + h;
        let b2 = w2 + c * h;
        (b1, w2, b2)
    }

    /// Input-major copies of the weights, so each input value updates all
    /// hidden units with independent accumulators.
    fn kernel(&self) -> Kernel {
        let (i_dim, hid, nc) = (self.config.input_dim(), self.config.hidden, self.config.num_classes);
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut w1t = vec![0.0; i_dim * hid];
        for j in 0..hid {
            for i in 0..i_dim {
                w1t[i * hid + j] = p[j * i_dim + i];
            }
        }
        let mut w2t = vec![0.0; hid * nc];
        for k in 0..nc {
            for j in 0..hid {
                w2t[j * nc + k] = p[w2 + k * hid + j];
            }
        }
        Kernel {
            hid,
            nc,
            w1t,
            b1: p[b1..w2].to_vec(),
            w2t,
            b2: p[b2..].to_vec(),
        }
    }

    /// Features and logits for a row-major block of pixel inputs.
    pub fn forward_inputs(&self, inputs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (i_dim, hid, nc) = (self.config.input_dim(), self.config.hidden, self.config.num_classes);
        let n = inputs.len() / i_dim;
        let mut feats = vec![0.0; n * hid];
        let mut logits = vec![0.0; n * nc];
        let mut pre = vec![0.0; hid];
        let kernel = self.kernel();
        for t in 0..n {
            kernel.pixel_forward(
                &inputs[t * i_dim..(t + 1) * i_dim],
                &mut pre,
                &mut feats[t * hid..(t + 1) * hid],
                &mut logits[t * nc..(t + 1) * nc],
            );
        }
        (feats, logits)
    }

    /// Per-pixel features `(h, w, hidden)` and logits `(h, w, classes)`.
    pub fn forward(&self, image: &Tensor3) -> Result<(Tensor3, Tensor3)> {
        if image.channels() != self.config.channels {
            return Err(Error::DimMismatch {
                expected: self.config.channels,
                actual: image.channels(),
            });
        }
        let (h, w) = (image.height(), image.width());
        let (feats, logits) = self.forward_inputs(&extract_patches(image));
        Ok((
            Tensor3::from_vec(h, w, self.config.hidden, feats)?,
            Tensor3::from_vec(h, w, self.config.num_classes, logits)?,
        ))
    }

    /// Per-pixel argmax class (ties to the lowest id) and max softmax probability.
    pub fn predict(&self, image: &Tensor3) -> Result<(LabelMap, Tensor2)> {
        let (_, logits) = self.forward(image)?;
        Ok(predict_from_logits(&logits))
    }

    /// `Σ_i w_i · CE_i / normalizer` and its gradient w.r.t. the parameters.
    /// Samples with zero weight are skipped (they contribute exactly zero).
    pub fn loss_and_grad(&self, batch: &PixelBatch, normalizer: f64) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate(batch, normalizer, &mut grad);
        (loss, grad)
    }

    /// Adds the gradient of `Σ w_i CE_i / normalizer` into `grad`; returns the loss.
    pub fn accumulate(&self, batch: &PixelBatch, normalizer: f64, grad: &mut [f64]) -> f64 {
        let (i_dim, hid, nc) = (self.config.input_dim(), self.config.hidden, self.config.num_classes);
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let kernel = self.kernel();
        let mut pre = vec![0.0; hid];
        let mut z = vec![0.0; hid];
        let mut logits = vec![0.0; nc];
        let mut probs = vec![0.0; nc];
        let mut dz = vec![0.0; hid];
        let mut loss = 0.0;
        for t in 0..batch.len() {
            let w = batch.weights[t];
            if w == 0.0 {
                continue;
            }
            let x = batch.input(t);
            let target = batch.targets[t];
            kernel.pixel_forward(x, &mut pre, &mut z, &mut logits);
            softmax_into(&logits, &mut probs);
            loss += w * ce_unchecked(probs[target]);
            let scale = w / normalizer;
            dz.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..nc {
                let g = scale * (probs[k] - if k == target { 1.0 } else { 0.0 });
                grad[b2 + k] += g;
                let row = w2 + k * hid;
                for j in 0..hid {
                    grad[row + j] += g * z[j];
                    dz[j] += g * p[row + j];
                }
            }
            for j in 0..hid {
                let d = dz[j] * squareplus_grad(pre[j]);
                grad[b1 + j] += d;
                let row = j * i_dim;
                for (g, &v) in grad[row..row + i_dim].iter_mut().zip(x) {
                    *g += d * v;
                }
            }
        }
        loss / normalizer
    }

    /// Loss only (same definition as [`loss_and_grad`](Self::loss_and_grad)).
    pub fn loss(&self, batch: &PixelBatch, normalizer: f64) -> f64 {
        let (hid, nc) = (self.config.hidden, self.config.num_classes);
        let mut pre = vec![0.0; hid];
        let mut z = vec![0.0; hid];
        let mut logits = vec![0.0; nc];
        let mut probs = vec![0.0; nc];
        let mut loss = 0.0;
        let kernel = self.kernel();
        for t in 0..batch.len() {
            let w = batch.weights[t];
            if w == 0.0 {
                continue;
            }
            kernel.pixel_forward(batch.input(t), &mut pre, &mut z, &mut logits);
            softmax_into(&logits, &mut probs);
            loss += w * ce_unchecked(probs[batch.targets[t]]);
        }
        loss / normalizer
    }

    /// `θ ← θ − lr · grad`.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    /// One SGD step on the mean weighted cross-entropy of `batch`.
    pub fn train_step(&mut self, batch: &PixelBatch, lr: f64) -> Result<f64> {
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {lr}")));
        }
        if batch.input_dim != self.config.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.config.input_dim(),
                actual: batch.input_dim,
            });
        }
        if let Some(&w) = batch.weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidConfig(format!("pixel weight {w} outside [0, 1]")));
        }
        if let Some(&t) = batch.targets.iter().find(|&&t| t >= self.config.num_classes) {
            return Err(Error::ClassOutOfRange {
                class: t,
                num_classes: self.config.num_classes,
            });
        }
        if batch.is_empty() {
            return Ok(0.0);
        }
        let (loss, grad) = self.loss_and_grad(batch, batch.len() as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        self.apply_gradient(&grad, lr);
        Ok(loss)
    }
}

/// Argmax class and its softmax probability at every pixel of a logit map.
pub fn predict_from_logits(logits: &Tensor3) -> (LabelMap, Tensor2) {
    let (h, w, nc) = (logits.height(), logits.width(), logits.channels());
    let mut labels = LabelMap::filled(h, w, 0);
    let mut conf = Tensor2::zeros(h, w);
    let mut probs = vec![0.0; nc];
    for idx in 0..h * w {
        softmax_into(logits.pixel_at(idx), &mut probs);
        let (c, p) = argmax(&probs);
        labels.as_mut_slice()[idx] = c as u8;
        conf.as_mut_slice()[idx] = p;
    }
    (labels, conf)
}
