//! Sliding-window region classifier used as the second, crop-level opinion
//! on unlabeled images.
//!
//! Every window is resized to a fixed `crop_size × crop_size` grid by area
//! averaging, summarized by pooled statistics, and classified by a softmax
//! linear layer over `num_classes + 1` outputs (the last one is "no object").
//! It is trained only on boxes derived from labeled masks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{argmax, softmax_into, Tensor3};
use crate::maskgeom::{boxes_from_mask, iou, LabelMap, LabeledBox, Rect};

/// Default detection confidence threshold.
pub const DEFAULT_BBOX_CONF: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Side of the resized crop.
    pub crop_size: usize,
    /// Window sizes; each is scanned with stride `size / 2`.
    pub scales: Vec<usize>,
    pub nms_iou: f64,
    /// Windows below this IoU with every GT box become "no object" examples.
    pub negative_iou: f64,
    /// Windows at or above this IoU with a GT box become extra positives.
    pub positive_iou: f64,
    pub negatives_per_image: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            crop_size: 8,
            scales: vec![8, 16],
            nms_iou: 0.5,
            negative_iou: 0.3,
            positive_iou: 0.5,
            negatives_per_image: 6,
            epochs: 200,
            lr: 0.1,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// One training crop.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionExample {
    pub image_index: usize,
    pub rect: Rect,
    /// Resized crop, `crop_size × crop_size × channels`.
    pub crop: Tensor3,
    /// Foreground class id, or `num_classes` for "no object".
    pub class_id: usize,
}

/// Area-average resize of `rect` in `image` to `size × size`.
pub fn resize_crop(image: &Tensor3, rect: &Rect, size: usize) -> Tensor3 {
    let ch = image.channels();
    let (h, w) = (rect.height(), rect.width());
    let mut out = Tensor3::zeros(size, size, ch);
    for i in 0..size {
        let r0 = i * h / size;
        let r1 = ((i + 1) * h).div_ceil(size).max(r0 + 1);
        for j in 0..size {
            let c0 = j * w / size;
            let c1 = ((j + 1) * w).div_ceil(size).max(c0 + 1);
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let cell = out.pixel_mut(i, j);
            for r in r0..r1 {
                for c in c0..c1 {
                    for (o, v) in cell.iter_mut().zip(image.pixel(rect.row_min + r, rect.col_min + c)) {
                        *o += v / n;
                    }
                }
            }
        }
    }
    out
}

/// Sliding windows for every scale (stride `scale / 2`, last window flush
/// with the border). Scales larger than the image are skipped.
pub fn sliding_windows(height: usize, width: usize, scales: &[usize]) -> Vec<Rect> {
    let positions = |extent: usize, size: usize| -> Vec<usize> {
        let stride = (size / 2).max(1);
        let mut p: Vec<usize> = (0..=extent - size).step_by(stride).collect();
        if *p.last().expect("non-empty") != extent - size {
            p.push(extent - size);
        }
        p
    };
    let mut out = Vec::new();
    for &s in scales {
        if s == 0 || s > height || s > width {
            continue;
        }
        for &r in &positions(height, s) {
            for &c in &positions(width, s) {
                out.push(Rect::new(r, c, r + s - 1, c + s - 1));
            }
        }
    }
    out
}

/// Pooled statistics of a resized crop: 4×4 cell means per channel, then per
/// channel the crop mean, standard deviation, chromaticity (mean over sum of
/// channel means) and centre-minus-border contrast.
pub fn crop_features(crop: &Tensor3) -> Vec<f64> {
    let (s, ch) = (crop.height(), crop.channels());
    let cells = 4.min(s);
    let mut f = Vec::with_capacity(cells * cells * ch + 4 * ch);
    for ci in 0..cells {
        for cj in 0..cells {
            let (r0, r1) = (ci * s / cells, (ci + 1) * s / cells);
            let (c0, c1) = (cj * s / cells, (cj + 1) * s / cells);
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            for k in 0..ch {
                let mut m = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        m += crop.get(r, c, k);
                    }
                }
                f.push(m / n);
            }
        }
    }
    let n = (s * s) as f64;
    let q = s / 4;
    let means: Vec<f64> = (0..ch)
        .map(|k| (0..s * s).map(|i| crop.pixel_at(i)[k]).sum::<f64>() / n)
        .collect();
    let total: f64 = means.iter().sum::<f64>();
    for k in 0..ch {
        let m = means[k];
        let var = (0..s * s).map(|i| (crop.pixel_at(i)[k] - m).powi(2)).sum::<f64>() / n;
        let (mut centre, mut nc, mut border, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..s {
            for c in 0..s {
                let v = crop.get(r, c, k);
                if (q..s - q).contains(&r) && (q..s - q).contains(&c) {
                    centre += v;
                    nc += 1.0;
                } else {
                    border += v;
                    nb += 1.0;
                }
            }
        }
        let contrast = if nc > 0.0 && nb > 0.0 {
            centre / nc - border / nb
        } else {
            0.0
        };
        let chroma = if total.abs() > 1e-12 { m / total } else { 0.0 };
        f.extend_from_slice(&[m, var.sqrt(), chroma, contrast]);
    }
    f
}

/// Positive crops for every GT box (and every window overlapping one at
/// `positive_iou` or more), plus up to `negatives_per_image` "no object"
/// windows per image whose IoU with all GT boxes is below `negative_iou`.
pub fn make_detection_trainset(
    images: &[&Tensor3],
    masks: &[&LabelMap],
    excluded_classes: &[usize],
    num_classes: usize,
    config: &DetectorConfig,
) -> Result<Vec<DetectionExample>> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("detector needs at least one labeled image".into()));
    }
    if images.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    for (idx, (image, mask)) in images.iter().zip(masks).enumerate() {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::ShapeMismatch(format!(
                "image {idx} is {}x{} but its mask is {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        let gt = boxes_from_mask(mask, excluded_classes);
        let mut push = |rect: Rect, class_id: usize| {
            out.push(DetectionExample {
                image_index: idx,
                rect,
                crop: resize_crop(image, &rect, config.crop_size),
                class_id,
            });
        };
        for b in &gt {
            push(b.rect, b.class_id);
        }
        let mut negatives = Vec::new();
        for w in sliding_windows(image.height(), image.width(), &config.scales) {
            let best = gt
                .iter()
                .map(|b| (iou(&w, &b.rect), b.class_id))
                .max_by(|a, b| a.0.total_cmp(&b.0));
            match best {
                Some((v, class)) if v >= config.positive_iou => push(w, class),
                Some((v, _)) if v >= config.negative_iou => {}
                _ => negatives.push(w),
            }
        }
        negatives.shuffle(&mut rng);
        for w in negatives.into_iter().take(config.negatives_per_image) {
            push(w, num_classes);
        }
    }
    Ok(out)
}

/// Softmax linear classifier over standardized [`crop_features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionClassifier {
    config: DetectorConfig,
    num_classes: usize,
    channels: usize,
    feature_mean: Vec<f64>,
    feature_scale: Vec<f64>,
    /// `(num_classes + 1) × (features + 1)`, bias last in each row.
    weights: Vec<f64>,
    trained: bool,
}

impl RegionClassifier {
    pub fn num_features(channels: usize, crop_size: usize) -> usize {
        let cells = 4.min(crop_size);
        cells * cells * channels + 4 * channels
    }

    /// Seeded uniform `[-0.01, 0.01]` weights; not usable for detection until trained.
    pub fn new(config: DetectorConfig, num_classes: usize, channels: usize) -> Self {
        let nf = Self::num_features(channels, config.crop_size);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let weights = (0..(num_classes + 1) * (nf + 1))
            .map(|_| rng.gen_range(-0.01..=0.01))
            .collect();
        Self {
            config,
            num_classes,
            channels,
            feature_mean: vec![0.0; nf],
            feature_scale: vec![1.0; nf],
            weights,
            trained: false,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Output index used for "no object".
    pub fn no_object(&self) -> usize {
        self.num_classes
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// `[feature_mean | feature_scale | weights]`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.feature_mean.clone();
        v.extend_from_slice(&self.feature_scale);
        v.extend_from_slice(&self.weights);
        v
    }

    pub fn from_flat_params(
        config: DetectorConfig,
        num_classes: usize,
        channels: usize,
        trained: bool,
        flat: &[f64],
    ) -> Result<Self> {
        let mut m = Self::new(config, num_classes, channels);
        let nf = m.feature_mean.len();
        let expected = 2 * nf + m.weights.len();
        if flat.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                actual: flat.len(),
            });
        }
        m.feature_mean.copy_from_slice(&flat[..nf]);
        m.feature_scale.copy_from_slice(&flat[nf..2 * nf]);
        m.weights.copy_from_slice(&flat[2 * nf..]);
        m.trained = trained;
        Ok(m)
    }

    fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let nf = x.len();
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * (nf + 1)..(k + 1) * (nf + 1)];
            *o = row[nf] + row[..nf].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Class probabilities (`num_classes + 1`) for a resized crop.
    pub fn classify_crop(&self, crop: &Tensor3) -> Vec<f64> {
        let x = self.standardize(&crop_features(crop));
        let mut logits = vec![0.0; self.num_classes + 1];
        self.logits(&x, &mut logits);
        let mut p = vec![0.0; logits.len()];
        softmax_into(&logits, &mut p);
        p
    }

    /// Sliding-window detection followed by per-class greedy NMS.
    pub fn detect(&self, image: &Tensor3, conf_thresh: f64) -> Result<Vec<LabeledBox>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        if image.channels() != self.channels {
            return Err(Error::DimMismatch {
                expected: self.channels,
                actual: image.channels(),
            });
        }
        let mut cands = Vec::new();
        for rect in sliding_windows(image.height(), image.width(), &self.config.scales) {
            let p = self.classify_crop(&resize_crop(image, &rect, self.config.crop_size));
            let (class_id, confidence) = argmax(&p);
            if class_id != self.no_object() && confidence >= conf_thresh {
                cands.push(LabeledBox {
                    class_id,
                    rect,
                    confidence,
                });
            }
        }
        Ok(nms(cands, self.config.nms_iou))
    }
}

/// Greedy per-class non-maximum suppression: boxes are visited by class, then
/// descending confidence (stable for ties); a box is dropped when its IoU with
/// an already-kept box of its class is at least `iou_thresh`.
pub fn nms(mut boxes: Vec<LabeledBox>, iou_thresh: f64) -> Vec<LabeledBox> {
    boxes.sort_by(|a, b| a.class_id.cmp(&b.class_id).then(b.confidence.total_cmp(&a.confidence)));
    let mut kept: Vec<LabeledBox> = Vec::new();
    for b in boxes {
        let suppressed = kept
            .iter()
            .rev()
            .take_while(|k| k.class_id == b.class_id)
            .any(|k| iou(&k.rect, &b.rect) >= iou_thresh);
        if !suppressed {
            kept.push(b);
        }
    }
    kept
}

/// Minibatch SGD on softmax cross-entropy. Deterministic for a fixed
/// `config.seed`; zero epochs returns the initialized model (marked trained).
pub fn train_region_classifier(
    trainset: &[DetectionExample],
    num_classes: usize,
    config: &DetectorConfig,
) -> Result<RegionClassifier> {
    let mut classes: Vec<usize> = trainset.iter().map(|e| e.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::DegenerateTrainset(classes.len()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c > num_classes) {
        return Err(Error::ClassOutOfRange {
            class: c,
            num_classes: num_classes + 1,
        });
    }
    let channels = trainset[0].crop.channels();
    let mut model = RegionClassifier::new(config.clone(), num_classes, channels);
    let raw: Vec<Vec<f64>> = trainset.iter().map(|e| crop_features(&e.crop)).collect();
    let nf = model.feature_mean.len();
    let n = raw.len() as f64;
    for j in 0..nf {
        let m = raw.iter().map(|f| f[j]).sum::<f64>() / n;
        let var = raw.iter().map(|f| (f[j] - m).powi(2)).sum::<f64>() / n;
        model.feature_mean[j] = m;
        model.feature_scale[j] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let xs: Vec<Vec<f64>> = raw.iter().map(|f| model.standardize(f)).collect();
    let nk = num_classes + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut logits = vec![0.0; nk];
    let mut probs = vec![0.0; nk];
    let batch = config.batch_size.max(1);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; model.weights.len()];
            for &i in chunk {
                let x = &xs[i];
                model.logits(x, &mut logits);
                softmax_into(&logits, &mut probs);
                for k in 0..nk {
                    let g = (probs[k] - if k == trainset[i].class_id { 1.0 } else { 0.0 }) / chunk.len() as f64;
                    let row = &mut grad[k * (nf + 1)..(k + 1) * (nf + 1)];
                    for (gw, v) in row[..nf].iter_mut().zip(x) {
                        *gw += g * v;
                    }
                    row[nf] += g;
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= config.lr * g;
            }
        }
    }
    model.trained = true;
    Ok(model)
}

/// Fraction of examples whose argmax class matches the label.
pub fn training_accuracy(model: &RegionClassifier, trainset: &[DetectionExample]) -> f64 {
    let hits = trainset
        .iter()
        .filter(|e| argmax(&model.classify_crop(&e.crop)).0 == e.class_id)
        .count();
    hits as f64 / trainset.len().max(1) as f64
}
