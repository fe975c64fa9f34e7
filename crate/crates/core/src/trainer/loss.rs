//! Per-pixel weight maps, the supervised and unsupervised losses, their
//! combination and the EMA teacher update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradcore::{ce_unchecked, check_finite, softmax_into, Tensor2, Tensor3};
use crate::maskgeom::{LabelMap, IGNORE};
use crate::protobank::ClassPrototype;
use crate::ranksim::{cosine_similarity, top_k_unchecked, Similarity};
use crate::segmodel::{extract_patches, PixelBatch, SegModel};

/// Per-pixel loss weights in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl WeightMap {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            weights: vec![1.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a {height}×{width} map",
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidConfig(format!("pixel weight {w} outside [0, 1]")));
        }
        Ok(Self { height, width, weights })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// Weight of every pixel against the prototype of its pseudo-label class:
/// top-k overlap `s / k` for [`Similarity::Rank`], cosine clamped to `[0, 1]`
/// for [`Similarity::Cosine`], and 1 where the class has no prototype.
pub fn compute_weight_map(
    features: &Tensor3,
    pseudo: &LabelMap,
    prototypes: &BTreeMap<usize, ClassPrototype>,
    k: usize,
    similarity: Similarity,
) -> Result<WeightMap> {
    let (h, w, dim) = (features.height(), features.width(), features.channels());
    if pseudo.height() != h || pseudo.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "features {h}×{w}, pseudo-labels {}×{}",
            pseudo.height(),
            pseudo.width()
        )));
    }
    if k == 0 {
        return Err(Error::ZeroK);
    }
    if k > dim {
        return Err(Error::KExceedsDim { k, dim });
    }
    let mut proto_sets = BTreeMap::new();
    for (&c, p) in prototypes {
        if p.vector.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: p.vector.dim(),
            });
        }
        proto_sets.insert(c, top_k_unchecked(&p.vector, k));
    }
    let mut weights = vec![1.0; h * w];
    for (idx, wt) in weights.iter_mut().enumerate() {
        let c = pseudo.as_slice()[idx] as usize;
        let Some(proto) = prototypes.get(&c) else {
            continue;
        };
        let z = features.pixel_at(idx);
        *wt = match similarity {
            Similarity::Rank => top_k_unchecked(z, k).overlap(&proto_sets[&c]) as f64 / k as f64,
            Similarity::Cosine => cosine_similarity(z, &proto.vector).unwrap_or(0.0).clamp(0.0, 1.0),
        };
    }
    Ok(WeightMap {
        height: h,
        width: w,
        weights,
    })
}

fn check_logits_vs_map(logits: &Tensor3, h: usize, w: usize) -> Result<()> {
    if logits.height() != h || logits.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "logits {}×{}, map {h}×{w}",
            logits.height(),
            logits.width()
        )));
    }
    Ok(())
}

fn check_class(class: usize, num_classes: usize) -> Result<()> {
    if class >= num_classes {
        return Err(Error::ClassOutOfRange { class, num_classes });
    }
    Ok(())
}

/// Mean cross-entropy over the non-ignored pixels of `gt`.
pub fn supervised_loss(logits: &Tensor3, gt: &LabelMap) -> Result<f64> {
    check_logits_vs_map(logits, gt.height(), gt.width())?;
    let nc = logits.channels();
    let mut probs = vec![0.0; nc];
    let (mut sum, mut n) = (0.0, 0usize);
    for (idx, &g) in gt.as_slice().iter().enumerate() {
        if g == IGNORE {
            continue;
        }
        check_class(g as usize, nc)?;
        softmax_into(logits.pixel_at(idx), &mut probs);
        sum += ce_unchecked(probs[g as usize]);
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoSupervisedPixels);
    }
    Ok(sum / n as f64)
}

/// `Σ_i 1[conf_i ≥ tau] · w_i · CE(p_i, pseudo_i) / (H·W)`.
pub fn unsupervised_loss(
    logits: &Tensor3,
    pseudo: &LabelMap,
    conf: &Tensor2,
    weights: &WeightMap,
    tau: f64,
) -> Result<f64> {
    let (h, w) = (pseudo.height(), pseudo.width());
    check_logits_vs_map(logits, h, w)?;
    if conf.height() != h || conf.width() != w || weights.height != h || weights.width != w {
        return Err(Error::ShapeMismatch("confidence or weight map size".into()));
    }
    let nc = logits.channels();
    let mut probs = vec![0.0; nc];
    let mut sum = 0.0;
    for idx in 0..h * w {
        let wt = weights.weights[idx];
        if conf.as_slice()[idx] < tau || wt == 0.0 {
            continue;
        }
        let c = pseudo.as_slice()[idx] as usize;
        check_class(c, nc)?;
        softmax_into(logits.pixel_at(idx), &mut probs);
        sum += wt * ce_unchecked(probs[c]);
    }
    Ok(sum / (h * w) as f64)
}

/// `θ_T ← m·θ_T + (1 − m)·θ_S`.
pub fn ema_update(teacher: &mut SegModel, student: &SegModel, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::InvalidConfig(format!("ema momentum {m} outside [0, 1)")));
    }
    if teacher.config() != student.config() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {:?} vs student {:?}",
            teacher.config(),
            student.config()
        )));
    }
    for (t, &s) in teacher.params_mut().iter_mut().zip(student.params()) {
        *t = m * *t + (1.0 - m) * s;
    }
    Ok(())
}

/// One labeled image as seen by the student.
#[derive(Debug, Clone)]
pub struct LabeledView {
    pub image: Tensor3,
    pub mask: LabelMap,
}

/// One unlabeled image: the student's strong view and the teacher's targets
/// from the matching weak view.
#[derive(Debug, Clone)]
pub struct UnlabeledView {
    pub image: Tensor3,
    pub pseudo: LabelMap,
    pub conf: Tensor2,
    pub weights: WeightMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub sup: f64,
    pub unsup: f64,
    pub total: f64,
}

/// Pixel batch and normalizer of the supervised term.
pub fn supervised_batch(views: &[LabeledView], input_dim: usize) -> Result<(PixelBatch, f64)> {
    let mut batch = PixelBatch::new(input_dim);
    for v in views {
        if v.image.height() != v.mask.height() || v.image.width() != v.mask.width() {
            return Err(Error::ShapeMismatch("labeled image and mask differ in size".into()));
        }
        let patches = extract_patches(&v.image);
        for (idx, &g) in v.mask.as_slice().iter().enumerate() {
            if g != IGNORE {
                batch.push(&patches[idx * input_dim..(idx + 1) * input_dim], g as usize, 1.0);
            }
        }
    }
    if batch.is_empty() {
        return Err(Error::NoSupervisedPixels);
    }
    let n = batch.len() as f64;
    Ok((batch, n))
}

/// Pixel batch and normalizer (`Σ H·W`) of the unsupervised term. Pixels
/// below `tau` or with zero weight are left out; they contribute nothing.
pub fn unsupervised_batch(views: &[UnlabeledView], input_dim: usize, tau: f64) -> Result<(PixelBatch, f64)> {
    let mut batch = PixelBatch::new(input_dim);
    let mut normalizer = 0usize;
    for v in views {
        let (h, w) = (v.pseudo.height(), v.pseudo.width());
        if v.image.height() != h
            || v.image.width() != w
            || v.conf.height() != h
            || v.conf.width() != w
            || v.weights.height != h
            || v.weights.width != w
        {
            return Err(Error::ShapeMismatch("unlabeled view maps differ in size".into()));
        }
        normalizer += h * w;
        let patches = extract_patches(&v.image);
        for idx in 0..h * w {
            let wt = v.weights.weights[idx];
            if v.conf.as_slice()[idx] >= tau && wt > 0.0 {
                batch.push(
                    &patches[idx * input_dim..(idx + 1) * input_dim],
                    v.pseudo.as_slice()[idx] as usize,
                    wt,
                );
            }
        }
    }
    Ok((batch, normalizer.max(1) as f64))
}

/// `L = L_s + α·L_u` and its gradient. An empty `unlabeled` slice gives the
/// supervised loss alone.
pub fn combined_loss_and_grad(
    model: &SegModel,
    labeled: &[LabeledView],
    unlabeled: &[UnlabeledView],
    alpha: f64,
    tau: f64,
) -> Result<(LossParts, Vec<f64>)> {
    let cfg = model.config();
    let dim = cfg.input_dim();
    let (sb, sn) = supervised_batch(labeled, dim)?;
    for &t in sb.targets.iter() {
        check_class(t, cfg.num_classes)?;
    }
    let (sup, mut grad) = model.loss_and_grad(&sb, sn);
    let mut unsup = 0.0;
    if !unlabeled.is_empty() {
        let (ub, un) = unsupervised_batch(unlabeled, dim, tau)?;
        for &t in ub.targets.iter() {
            check_class(t, cfg.num_classes)?;
        }
        let (lu, gu) = model.loss_and_grad(&ub, un);
        unsup = lu;
        for (g, u) in grad.iter_mut().zip(&gu) {
            *g += alpha * u;
        }
    }
    let total = sup + alpha * unsup;
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    check_finite(&grad)?;
    Ok((LossParts { sup, unsup, total }, grad))
}
