//! Teacher/student training with confidence-filtered pseudo-labels,
//! detector-confirmed prototype updates and rank-statistics pixel weighting.

pub mod ablate;
pub mod augment;
pub mod checkpoint;
mod config;
pub mod loss;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::TrainConfig;
pub use loss::{
    combined_loss_and_grad, compute_weight_map, ema_update, supervised_loss, unsupervised_loss, LabeledView, LossParts,
    UnlabeledView, WeightMap,
};

use crate::detector::{make_detection_trainset, train_region_classifier, RegionClassifier};
use crate::error::{Error, Result};
use crate::gradcore::{FeatureVector, Tensor2, Tensor3};
use crate::maskgeom::{LabelMap, LabeledBox, IGNORE};
use crate::metrics::{selection_counter, AccuracyCounter, ConfusionMatrix};
use crate::protobank::PrototypeBank;
use crate::reliability::reliable_pixels;
use crate::segmodel::{predict_from_logits, SegModel, SegModelConfig};
use crate::synthdata::{Sample, StoredDataset};

pub const METRICS_CSV_HEADER: &str =
    "epoch,miou,pl_acc_conf,pl_acc_weighted,reliable_acc,loss_sup,loss_unsup,loss_total";

pub const SELECTION_CSV_HEADER: &str = "epoch,selection,correct,total";

/// Images a run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub labeled: Vec<&'a Sample>,
    pub unlabeled: Vec<&'a Sample>,
    pub val: Vec<&'a Sample>,
    pub num_classes: usize,
}

impl<'a> TrainData<'a> {
    pub fn from_stored(stored: &'a StoredDataset) -> Self {
        Self {
            labeled: stored.labeled(),
            unlabeled: stored.unlabeled(),
            val: stored.dataset.val.iter().collect(),
            num_classes: stored.dataset.spec.num_classes,
        }
    }

    /// The same data with the unlabeled split removed.
    pub fn supervised_only(&self) -> Self {
        Self {
            unlabeled: Vec::new(),
            ..self.clone()
        }
    }

    fn channels(&self) -> Result<usize> {
        self.labeled
            .first()
            .map(|s| s.image.channels())
            .ok_or_else(|| Error::InvalidConfig("labeled split is empty".into()))
    }

    fn validate(&self) -> Result<()> {
        let ch = self.channels()?;
        for s in self.labeled.iter().chain(&self.unlabeled).chain(&self.val) {
            if s.image.channels() != ch || s.image.height() != s.mask.height() || s.image.width() != s.mask.width() {
                return Err(Error::ShapeMismatch(
                    "inconsistent image/mask shapes in training data".into(),
                ));
            }
            s.mask.validate(self.num_classes)?;
        }
        Ok(())
    }
}

/// Pseudo-label accuracy tallies of one epoch, all on clean unlabeled images.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SelectionStats {
    /// `conf ≥ τ`.
    pub confident: AccuracyCounter,
    /// `conf ≥ τ ∧ weight ≥ weight_selection`.
    pub weighted: AccuracyCounter,
    /// Confident and inside a detector box of the same class.
    pub reliable: AccuracyCounter,
    /// Confident, foreground, but in no matching box.
    pub unboxed: AccuracyCounter,
}

impl SelectionStats {
    fn merge(&mut self, o: &SelectionStats) {
        self.confident.merge(o.confident);
        self.weighted.merge(o.weighted);
        self.reliable.merge(o.reliable);
        self.unboxed.merge(o.unboxed);
    }

    fn named(&self) -> [(&'static str, AccuracyCounter); 4] {
        [
            ("confident", self.confident),
            ("weighted", self.weighted),
            ("reliable", self.reliable),
            ("unboxed", self.unboxed),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Teacher mIoU on the validation split.
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    pub selection: SelectionStats,
    /// Mean over the epoch's steps.
    pub loss: LossParts,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EpochMetrics {
    pub fn pl_acc_conf(&self) -> Option<f64> {
        self.selection.confident.accuracy()
    }

    pub fn pl_acc_weighted(&self) -> Option<f64> {
        self.selection.weighted.accuracy()
    }

    pub fn reliable_acc(&self) -> Option<f64> {
        self.selection.reliable.accuracy()
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.miou,
            opt(self.pl_acc_conf()),
            opt(self.pl_acc_weighted()),
            opt(self.reliable_acc()),
            self.loss.sup,
            self.loss.unsup,
            self.loss.total
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// Per-epoch selection counts, including incorrect counts the metrics CSV omits.
pub fn selection_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{SELECTION_CSV_HEADER}\n");
    for m in history {
        for (name, c) in m.selection.named() {
            let _ = writeln!(s, "{},{name},{},{}", m.epoch, c.correct, c.total);
        }
    }
    s
}

/// Model, bank and history of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub student: SegModel,
    /// First-moment estimate of the student's Adam optimizer.
    pub velocity: Vec<f64>,
    /// Second-moment estimate.
    pub second_moment: Vec<f64>,
    pub teacher: SegModel,
    pub bank: PrototypeBank,
    /// `None` when the labeled split cannot train one and the run does not need it.
    pub detector: Option<RegionClassifier>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub steps: usize,
    pub history: Vec<EpochMetrics>,
    /// Per class, one teacher class-mean feature over labeled pixels per epoch.
    pub feature_history: BTreeMap<usize, Vec<FeatureVector>>,
    /// Filled only with `log_steps`.
    pub step_losses: Vec<LossParts>,
    /// Detector boxes on the clean unlabeled images, computed once.
    unlabeled_boxes: Vec<Vec<LabeledBox>>,
}

// stream ids per epoch
const ROLE_LABELED_ORDER: u64 = 0;
const ROLE_UNLABELED_ORDER: u64 = 1;
const ROLE_LABELED_AUG: u64 = 2;
const ROLE_UNLABELED_AUG: u64 = 3;
const ROLES: u64 = 4;

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

const BANK_SEED_SALT: u64 = 0x6261_6e6b;

fn epoch_rng(seed: u64, epoch: usize, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 * ROLES + role);
    rng
}

/// EMA momentum after `step` updates: `min(m, 1 − 1/(step + 1))`, so the
/// teacher follows the student closely at first.
pub fn ema_momentum_at(m: f64, step: usize) -> f64 {
    m.min(1.0 - 1.0 / (step as f64 + 1.0))
}

/// Cycles through a shuffled order.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        (0..count)
            .map(|_| {
                let i = self.order[self.pos % self.order.len()];
                self.pos += 1;
                i
            })
            .collect()
    }
}

/// Groups pixel features by class label, skipping `IGNORE` and unselected pixels.
fn features_by_class<'f>(
    features: &'f Tensor3,
    labels: &LabelMap,
    selected: impl Fn(usize) -> bool,
) -> BTreeMap<usize, Vec<&'f [f64]>> {
    let mut out: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (idx, &c) in labels.as_slice().iter().enumerate() {
        if c != IGNORE && selected(idx) {
            out.entry(c as usize).or_default().push(features.pixel_at(idx));
        }
    }
    out
}

struct TeacherView {
    features: Tensor3,
    pseudo: LabelMap,
    conf: Tensor2,
}

fn teacher_view(teacher: &SegModel, image: &Tensor3) -> Result<TeacherView> {
    let (features, logits) = teacher.forward(image)?;
    let (pseudo, conf) = predict_from_logits(&logits);
    Ok(TeacherView { features, pseudo, conf })
}

impl TrainState {
    /// Validates the configuration and data, initializes both models from
    /// `config.seed` and trains the detector on the labeled split.
    pub fn new(config: TrainConfig, data: &TrainData) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        let channels = data.channels()?;
        let model_cfg = SegModelConfig {
            channels,
            hidden: config.hidden,
            num_classes: data.num_classes,
        };
        let student = SegModel::new(model_cfg, config.seed)?;
        let teacher = student.clone();
        let bank = PrototypeBank::new(config.hidden, config.bank_capacity, config.seed ^ BANK_SEED_SALT)?;
        let images: Vec<&Tensor3> = data.labeled.iter().map(|s| &s.image).collect();
        let masks: Vec<&LabelMap> = data.labeled.iter().map(|s| &s.mask).collect();
        let trainset = make_detection_trainset(
            &images,
            &masks,
            &[config.background_class],
            data.num_classes,
            &config.detector,
        )?;
        let detector = match train_region_classifier(&trainset, data.num_classes, &config.detector) {
            Ok(d) => Some(d),
            Err(Error::DegenerateTrainset(_)) if !config.use_rppi => None,
            Err(e) => return Err(e),
        };
        let unlabeled_boxes = match &detector {
            Some(d) => data
                .unlabeled
                .par_iter()
                .map(|s| d.detect(&s.image, config.bbox_conf))
                .collect::<Result<Vec<_>>>()?,
            None => vec![Vec::new(); data.unlabeled.len()],
        };
        Ok(Self {
            velocity: vec![0.0; student.params().len()],
            second_moment: vec![0.0; student.params().len()],
            config,
            num_classes: data.num_classes,
            student,
            teacher,
            bank,
            detector,
            epoch: 0,
            steps: 0,
            history: Vec::new(),
            feature_history: BTreeMap::new(),
            step_losses: Vec::new(),
            unlabeled_boxes,
        })
    }

    /// One epoch of `steps_per_epoch` steps followed by metric logging.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<&EpochMetrics> {
        if data.unlabeled.len() != self.unlabeled_boxes.len() {
            return Err(Error::ShapeMismatch(
                "unlabeled split changed since initialization".into(),
            ));
        }
        let cfg = self.config.clone();
        let e = self.epoch;
        let mut lab_cursor = Cursor::new(data.labeled.len(), &mut epoch_rng(cfg.seed, e, ROLE_LABELED_ORDER));
        let mut unl_cursor = Cursor::new(data.unlabeled.len(), &mut epoch_rng(cfg.seed, e, ROLE_UNLABELED_ORDER));
        let mut lab_aug = epoch_rng(cfg.seed, e, ROLE_LABELED_AUG);
        let mut unl_aug = epoch_rng(cfg.seed, e, ROLE_UNLABELED_AUG);
        let mut sum = LossParts::default();
        for _ in 0..cfg.steps_per_epoch {
            let lab: Vec<(&Sample, u64)> = lab_cursor
                .take(cfg.labeled_batch)
                .into_iter()
                .map(|i| (data.labeled[i], lab_aug.next_u64()))
                .collect();
            let unl: Vec<(&Sample, u64)> = if data.unlabeled.is_empty() {
                Vec::new()
            } else {
                unl_cursor
                    .take(cfg.unlabeled_batch)
                    .into_iter()
                    .map(|i| (data.unlabeled[i], unl_aug.next_u64()))
                    .collect()
            };
            let parts = self.step(&lab, &unl)?;
            sum.sup += parts.sup;
            sum.unsup += parts.unsup;
            sum.total += parts.total;
            if cfg.log_steps {
                self.step_losses.push(parts);
            }
        }
        let n = cfg.steps_per_epoch as f64;
        let loss = LossParts {
            sup: sum.sup / n,
            unsup: sum.unsup / n,
            total: sum.total / n,
        };
        self.epoch += 1;
        let metrics = self.evaluate_epoch(data, loss)?;
        self.history.push(metrics);
        Ok(self.history.last().expect("just pushed"))
    }

    fn step(&mut self, lab: &[(&Sample, u64)], unl: &[(&Sample, u64)]) -> Result<LossParts> {
        let cfg = &self.config;
        let labeled: Vec<LabeledView> = lab
            .iter()
            .map(|(s, seed)| LabeledView {
                image: augment::weak_augment(&s.image, *seed),
                mask: augment::augment_mask(&s.mask, *seed),
            })
            .collect();
        let teacher = &self.teacher;
        // teacher pass on unlabeled weak views
        let weak: Vec<(TeacherView, Tensor3)> = unl
            .par_iter()
            .map(|(s, seed)| {
                let view = teacher_view(teacher, &augment::weak_augment(&s.image, *seed))?;
                Ok((view, augment::strong_augment(&s.image, *seed)))
            })
            .collect::<Result<_>>()?;
        // bank: labeled pixels, then reliable unlabeled pixels
        let lab_feats: Vec<Tensor3> = labeled
            .par_iter()
            .map(|v| teacher.forward(&v.image).map(|(f, _)| f))
            .collect::<Result<_>>()?;
        for (f, v) in lab_feats.iter().zip(&labeled) {
            for (c, feats) in features_by_class(f, &v.mask, |_| true) {
                self.bank.push_features(c, &feats, cfg.per_image_limit)?;
            }
        }
        if cfg.use_rppi {
            if let Some(det) = &self.detector {
                let boxes: Vec<Vec<LabeledBox>> = unl
                    .par_iter()
                    .map(|(s, seed)| det.detect(&augment::weak_augment(&s.image, *seed), cfg.bbox_conf))
                    .collect::<Result<_>>()?;
                for ((tv, _), b) in weak.iter().zip(&boxes) {
                    let rel = reliable_pixels(&tv.pseudo, &tv.conf, b, cfg.tau).to_bools();
                    for (c, feats) in features_by_class(&tv.features, &tv.pseudo, |i| rel[i]) {
                        self.bank.push_features(c, &feats, cfg.per_image_limit)?;
                    }
                }
            }
        }
        let prototypes = self.bank.all_prototypes();
        let unlabeled: Vec<UnlabeledView> = weak
            .into_iter()
            .map(|(tv, strong)| {
                let weights = if cfg.use_ppw {
                    compute_weight_map(&tv.features, &tv.pseudo, &prototypes, cfg.k, cfg.similarity)?
                } else {
                    WeightMap::ones(tv.pseudo.height(), tv.pseudo.width())
                };
                Ok(UnlabeledView {
                    image: strong,
                    pseudo: tv.pseudo,
                    conf: tv.conf,
                    weights,
                })
            })
            .collect::<Result<_>>()?;
        let (parts, grad) = combined_loss_and_grad(&self.student, &labeled, &unlabeled, cfg.alpha, cfg.tau)?;
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (cfg.momentum, ADAM_BETA2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (((p, m), v), g) in self
            .student
            .params_mut()
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(self.second_moment.iter_mut())
            .zip(&grad)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        ema_update(
            &mut self.teacher,
            &self.student,
            ema_momentum_at(cfg.ema_momentum, self.steps),
        )?;
        Ok(parts)
    }

    fn evaluate_epoch(&mut self, data: &TrainData, loss: LossParts) -> Result<EpochMetrics> {
        let cfg = &self.config;
        let teacher = &self.teacher;
        let mut cm = ConfusionMatrix::new(self.num_classes);
        let val: Vec<ConfusionMatrix> = data
            .val
            .par_iter()
            .map(|s| {
                let (pred, _) = teacher.predict(&s.image)?;
                let mut m = ConfusionMatrix::new(self.num_classes);
                m.add(&pred, &s.mask);
                Ok(m)
            })
            .collect::<Result<_>>()?;
        val.iter().for_each(|m| cm.merge(m));
        let report = cm.miou();

        let prototypes = self.bank.all_prototypes();
        let bg = cfg.background_class;
        let per_image: Vec<SelectionStats> = data
            .unlabeled
            .par_iter()
            .zip(&self.unlabeled_boxes)
            .map(|(s, boxes)| {
                let tv = teacher_view(teacher, &s.image)?;
                let weights = compute_weight_map(&tv.features, &tv.pseudo, &prototypes, cfg.k, cfg.similarity)?;
                let conf: Vec<bool> = tv.conf.as_slice().iter().map(|&c| c >= cfg.tau).collect();
                let rel = reliable_pixels(&tv.pseudo, &tv.conf, boxes, cfg.tau).to_bools();
                let weighted: Vec<bool> = conf
                    .iter()
                    .zip(weights.as_slice())
                    .map(|(&c, &w)| c && w >= cfg.weight_selection)
                    .collect();
                let unboxed: Vec<bool> = (0..conf.len())
                    .map(|i| conf[i] && !rel[i] && tv.pseudo.as_slice()[i] as usize != bg)
                    .collect();
                Ok(SelectionStats {
                    confident: selection_counter(&tv.pseudo, &s.mask, &conf),
                    weighted: selection_counter(&tv.pseudo, &s.mask, &weighted),
                    reliable: selection_counter(&tv.pseudo, &s.mask, &rel),
                    unboxed: selection_counter(&tv.pseudo, &s.mask, &unboxed),
                })
            })
            .collect::<Result<_>>()?;
        let mut selection = SelectionStats::default();
        per_image.iter().for_each(|s| selection.merge(s));

        let feats: Vec<Tensor3> = data
            .labeled
            .par_iter()
            .map(|s| teacher.forward(&s.image).map(|(f, _)| f))
            .collect::<Result<_>>()?;
        let dim = cfg.hidden;
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (f, s) in feats.iter().zip(&data.labeled) {
            for (c, fs) in features_by_class(f, &s.mask, |_| true) {
                let entry = sums.entry(c).or_insert_with(|| (vec![0.0; dim], 0));
                for v in fs {
                    entry.0.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                    entry.1 += 1;
                }
            }
        }
        for (c, (s, n)) in sums {
            let mean: Vec<f64> = s.iter().map(|v| v / n as f64).collect();
            self.feature_history.entry(c).or_default().push(mean.into());
        }

        Ok(EpochMetrics {
            epoch: self.epoch,
            miou: report.mean,
            class_iou: report.per_class,
            selection,
            loss,
        })
    }
}

/// Runs `config.epochs` epochs from a fresh state.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainState> {
    let mut state = TrainState::new(config.clone(), data)?;
    for _ in 0..config.epochs {
        state.run_epoch(data)?;
    }
    Ok(state)
}
