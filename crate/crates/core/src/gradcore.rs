//! Dense numeric kernel: row-major tensors, softmax, cross-entropy and a
//! central-difference gradient checker.
//!
//! Everything is `f64`. Tensors are indexed `(row, col, channel)`.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied inside the logarithm of [`cross_entropy`].
pub const LOG_EPS: f64 = 1e-12;

/// A 2-D row-major grid of reals (one value per pixel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimMismatch {
                expected: height * width,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// A 3-D row-major tensor `(row, col, channel)`; images, feature maps and
/// logit maps all use this layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    /// All channels of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Channels of the pixel at flat index `idx = row * width + col`.
    pub fn pixel_at(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// A per-pixel embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for FeatureVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl From<&[f64]> for FeatureVector {
    fn from(values: &[f64]) -> Self {
        Self(values.to_vec())
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("element {i} is {}", values[i]))),
        None => Ok(()),
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    check_finite(logits)?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Unchecked softmax into a caller-provided buffer; `out.len() == logits.len() >= 1`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `-ln(max(probs[target], LOG_EPS))`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    if target >= probs.len() {
        return Err(Error::ClassOutOfRange {
            class: target,
            num_classes: probs.len(),
        });
    }
    Ok(ce_unchecked(probs[target]))
}

#[inline]
pub(crate) fn ce_unchecked(p_target: f64) -> f64 {
    -(p_target.max(LOG_EPS)).ln()
}

/// Index and value of the largest element; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// Result of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index where `max_rel_error` occurred.
    pub worst_index: usize,
    pub numeric: Vec<f64>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.rel_tol
    }
}

/// Denominator floor for the relative error; gradients smaller than this are
/// compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compare `analytic` with central finite differences of `f` at `params`.
///
/// Step size is `1e-4 * max(1, |θ_j|)`. The relative error of component `j`
/// is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], rel_tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::DimMismatch {
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    if !(rel_tol > 0.0) {
        return Err(Error::InvalidConfig(format!("rel_tol must be positive, got {rel_tol}")));
    }
    let mut theta = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for j in 0..params.len() {
        let h = 1e-4 * params[j].abs().max(1.0);
        theta[j] = params[j] + h;
        let plus = f(&theta);
        theta[j] = params[j] - h;
        let minus = f(&theta);
        theta[j] = params[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at parameter {j}")));
        }
        let n = (plus - minus) / (2.0 * h);
        let a = analytic[j];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = j;
        }
        numeric.push(n);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        numeric,
        rel_tol,
    })
}
