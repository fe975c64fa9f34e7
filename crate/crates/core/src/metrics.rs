//! Evaluation: confusion-matrix mIoU, pseudo-label accuracy under a selection,
//! confidence/correctness histograms and feature stability analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::gradcore::{FeatureVector, Tensor2};
use crate::maskgeom::{LabelMap, IGNORE};
use crate::ranksim::hamming_topk;

/// `C × C` pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. Ignored ground-truth pixels and out-of-range ids are skipped.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) {
        assert!(pred.same_dims(gt), "prediction and ground truth differ in size");
        let c = self.num_classes;
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if g == IGNORE || g as usize >= c || p as usize >= c {
                continue;
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the union is empty.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|g| self.get(g, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> MiouReport {
        MiouReport::from_class_iou(self.class_iou())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a non-empty union (0 when there are none).
    pub mean: f64,
}

impl MiouReport {
    fn from_class_iou(per_class: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self { per_class, mean }
    }
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> MiouReport {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt);
    cm.miou()
}

/// Running `correct / total` tally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccuracyCounter {
    pub correct: u64,
    pub total: u64,
}

impl AccuracyCounter {
    pub fn record(&mut self, correct: bool) {
        self.total += 1;
        self.correct += correct as u64;
    }

    pub fn merge(&mut self, other: AccuracyCounter) {
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn incorrect(&self) -> u64 {
        self.total - self.correct
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Fraction of selected pixels whose pseudo-label equals the ground truth,
/// with the number of selected pixels. Ignored ground-truth pixels are never
/// counted.
pub fn pseudo_label_accuracy(pseudo: &LabelMap, gt: &LabelMap, selection: &[bool]) -> (Option<f64>, usize) {
    let c = selection_counter(pseudo, gt, selection);
    (c.accuracy(), c.total as usize)
}

pub(crate) fn selection_counter(pseudo: &LabelMap, gt: &LabelMap, selection: &[bool]) -> AccuracyCounter {
    assert!(
        pseudo.same_dims(gt) && selection.len() == gt.len(),
        "dimension mismatch"
    );
    let mut c = AccuracyCounter::default();
    for ((&p, &g), &s) in pseudo.as_slice().iter().zip(gt.as_slice()).zip(selection) {
        if s && g != IGNORE {
            c.record(p == g);
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HistogramBin {
    pub correct: u64,
    pub incorrect: u64,
}

/// Equal-width bins over `[0, 1]`; confidence 1.0 lands in the last bin.
pub fn confidence_correctness_histogram(
    conf: &Tensor2,
    pseudo: &LabelMap,
    gt: &LabelMap,
    bins: usize,
) -> Vec<HistogramBin> {
    let mut out = vec![HistogramBin::default(); bins];
    accumulate_histogram(&mut out, conf, pseudo, gt);
    out
}

pub(crate) fn accumulate_histogram(out: &mut [HistogramBin], conf: &Tensor2, pseudo: &LabelMap, gt: &LabelMap) {
    let bins = out.len();
    if bins == 0 {
        return;
    }
    for ((&p, &g), &q) in pseudo.as_slice().iter().zip(gt.as_slice()).zip(conf.as_slice()) {
        if g == IGNORE {
            continue;
        }
        let b = ((q.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        if p == g {
            out[b].correct += 1;
        } else {
            out[b].incorrect += 1;
        }
    }
}

/// Per-class stability of feature magnitudes versus top-k index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStability {
    pub class_id: usize,
    pub snapshots: usize,
    /// Mean over dimensions of the across-snapshot variance.
    pub value_variance: f64,
    /// `sqrt(value_variance) / mean_d |mean_d|`.
    pub normalized_value_variation: f64,
    /// Mean top-k hamming distance of each snapshot to the running prototype
    /// (mean of the snapshots seen so far, including the current one).
    pub mean_hamming: f64,
    /// `mean_hamming / 2k`, in `[0, 1]`.
    pub index_instability: f64,
}

/// Classes with fewer than two snapshots are skipped.
pub fn prototype_stability(history: &BTreeMap<usize, Vec<FeatureVector>>, k: usize) -> Vec<ClassStability> {
    let mut out = Vec::new();
    for (&class_id, snaps) in history {
        if snaps.len() < 2 || snaps[0].dim() < k || k == 0 {
            continue;
        }
        let dim = snaps[0].dim();
        let n = snaps.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in snaps {
            for (m, &v) in mean.iter_mut().zip(s.iter()) {
                *m += v / n;
            }
        }
        let mut var = 0.0;
        for s in snaps {
            for (m, &v) in mean.iter().zip(s.iter()) {
                var += (v - m) * (v - m);
            }
        }
        let value_variance = var / (n * dim as f64);
        let scale = mean.iter().map(|m| m.abs()).sum::<f64>() / dim as f64;
        let normalized_value_variation = if scale > 0.0 {
            value_variance.sqrt() / scale
        } else {
            0.0
        };

        let mut running = vec![0.0; dim];
        let mut ham = 0.0;
        for (t, s) in snaps.iter().enumerate() {
            for (r, &v) in running.iter_mut().zip(s.iter()) {
                *r += (v - *r) / (t + 1) as f64;
            }
            ham += hamming_topk(s, &running, k).expect("dims checked") as f64;
        }
        let mean_hamming = ham / n;
        out.push(ClassStability {
            class_id,
            snapshots: snaps.len(),
            value_variance,
            normalized_value_variation,
            mean_hamming,
            index_instability: mean_hamming / (2 * k) as f64,
        });
    }
    out
}

pub const STABILITY_CSV_HEADER: &str =
    "class_id,snapshots,value_variance,normalized_value_variation,mean_hamming,index_instability";

/// CSV form of [`prototype_stability`].
pub fn prototype_stability_report(history: &BTreeMap<usize, Vec<FeatureVector>>, k: usize) -> String {
    let mut s = String::from(STABILITY_CSV_HEADER);
    s.push('\n');
    for r in prototype_stability(history, k) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.class_id,
            r.snapshots,
            r.value_variance,
            r.normalized_value_variation,
            r.mean_hamming,
            r.index_instability
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(data: &[u8], w: usize) -> LabelMap {
        LabelMap::from_vec(data.len() / w, w, data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_complement() {
        let gt = lm(&[0, 1, 1, 0], 2);
        let r = miou(&gt, &gt, 2);
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        let inv = lm(&[1, 0, 0, 1], 2);
        assert_eq!(miou(&inv, &gt, 2).mean, 0.0);
    }

    #[test]
    fn absent_class_excluded() {
        let gt = lm(&[0, 0, 1, 1], 2);
        let r = miou(&gt, &gt, 3);
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn accuracy_cases() {
        let gt = lm(&[0, 1, 2, 2], 2);
        assert_eq!(pseudo_label_accuracy(&gt, &gt, &[false; 4]), (None, 0));
        assert_eq!(pseudo_label_accuracy(&gt, &gt, &[true; 4]), (Some(1.0), 4));
        let p = lm(&[0, 1, 1, 1], 2);
        assert_eq!(
            pseudo_label_accuracy(&p, &gt, &[true, true, true, false]),
            (Some(2.0 / 3.0), 3)
        );
    }

    #[test]
    fn histogram_cases() {
        let gt = lm(&[0, 1, 2, 2], 2);
        let conf = Tensor2::from_vec(2, 2, vec![0.1, 0.5, 0.99, 1.0]).unwrap();
        let h = confidence_correctness_histogram(&conf, &gt, &gt, 4);
        assert!(h.iter().all(|b| b.incorrect == 0));
        assert_eq!(h[3].correct, 2);
        let p = lm(&[0, 0, 2, 1], 2);
        let one = confidence_correctness_histogram(&conf, &p, &gt, 1);
        assert_eq!(
            one,
            vec![HistogramBin {
                correct: 2,
                incorrect: 2
            }]
        );
    }

    #[test]
    fn stability_constant_and_scaled() {
        let v = FeatureVector::new(vec![0.1, 3.0, 0.5, 2.0, 1.0, 0.2]);
        let constant: BTreeMap<usize, Vec<FeatureVector>> = [(1, vec![v.clone(); 4])].into();
        let r = &prototype_stability(&constant, 2)[0];
        assert_eq!((r.value_variance, r.mean_hamming), (0.0, 0.0));

        let scaled: Vec<FeatureVector> = [0.5, 1.0, 2.0, 3.5]
            .iter()
            .map(|s| FeatureVector::new(v.iter().map(|x| x * s).collect()))
            .collect();
        let hist: BTreeMap<usize, Vec<FeatureVector>> = [(2, scaled)].into();
        let r = &prototype_stability(&hist, 2)[0];
        assert!(r.value_variance > 0.0);
        assert_eq!(r.mean_hamming, 0.0);
        assert!(prototype_stability_report(&hist, 2).starts_with(STABILITY_CSV_HEADER));
    }
}
