mod common;

use proptest::prelude::*;
use pseudoweight_core::maskgeom::IGNORE;
use pseudoweight_core::metrics::{confidence_correctness_histogram, miou, pseudo_label_accuracy, ConfusionMatrix};
use pseudoweight_core::LabelMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random mask with about a tenth of the pixels set to `IGNORE`.
fn gt_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    let mut m = common::random_mask(rng, h, w, classes);
    for v in m.as_mut_slice() {
        if rng.gen_bool(0.1) {
            *v = IGNORE;
        }
    }
    m
}

#[test]
fn miou_matches_pixel_count_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..200 {
        let (h, w, nc) = (rng.gen_range(1..20), rng.gen_range(1..20), rng.gen_range(2..6));
        let gt = gt_mask(&mut rng, h, w, nc as u8);
        let pred = common::random_mask(&mut rng, h, w, nc as u8);
        let r = miou(&pred, &gt, nc);
        let mut ious = Vec::new();
        for c in 0..nc as u8 {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
                if g == IGNORE {
                    continue;
                }
                match (p == c, g == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let union = tp + fp + fn_;
            let iou = (union > 0).then(|| tp as f64 / union as f64);
            assert_eq!(r.per_class[c as usize], iou);
            ious.extend(iou);
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!((r.mean - mean).abs() < 1e-12);
    }
}

#[test]
fn confusion_matrix_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let gt = gt_mask(&mut rng, 9, 9, 3);
    let pred = common::random_mask(&mut rng, 9, 9, 3);
    let mut cm = ConfusionMatrix::new(3);
    cm.add(&pred, &gt);
    let counted = gt.as_slice().iter().filter(|&&g| g != IGNORE).count() as u64;
    assert_eq!(cm.total(), counted);
    for g in 0..3 {
        for p in 0..3 {
            let n = pred
                .as_slice()
                .iter()
                .zip(gt.as_slice())
                .filter(|(&a, &b)| a as usize == p && b as usize == g)
                .count() as u64;
            assert_eq!(cm.get(g, p), n);
        }
    }
}

#[test]
fn accuracy_and_histogram_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..16), rng.gen_range(1..16));
        let gt = gt_mask(&mut rng, h, w, 4);
        let pseudo = common::random_mask(&mut rng, h, w, 4);
        let conf = common::random_conf(&mut rng, h, w);
        let sel: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.5)).collect();
        let (mut ok, mut n) = (0usize, 0usize);
        for i in 0..h * w {
            if sel[i] && gt.as_slice()[i] != IGNORE {
                n += 1;
                ok += (pseudo.as_slice()[i] == gt.as_slice()[i]) as usize;
            }
        }
        let expected = (n > 0).then(|| ok as f64 / n as f64);
        assert_eq!(pseudo_label_accuracy(&pseudo, &gt, &sel), (expected, n));

        let bins = rng.gen_range(1..12);
        let hist = confidence_correctness_histogram(&conf, &pseudo, &gt, bins);
        for (b, bin) in hist.iter().enumerate() {
            let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
            let in_bin = |q: f64| (q >= lo && q < hi) || (b == bins - 1 && q == 1.0);
            let (mut c, mut ic) = (0, 0);
            for i in 0..h * w {
                let q = conf.as_slice()[i];
                if gt.as_slice()[i] == IGNORE || !in_bin(q) {
                    continue;
                }
                if pseudo.as_slice()[i] == gt.as_slice()[i] {
                    c += 1
                } else {
                    ic += 1
                }
            }
            assert_eq!((bin.correct, bin.incorrect), (c, ic), "bin {b} of {bins}");
        }
        let total: u64 = hist.iter().map(|b| b.correct + b.incorrect).sum();
        assert_eq!(total as usize, gt.as_slice().iter().filter(|&&g| g != IGNORE).count());
    }
}

proptest! {
    #[test]
    fn miou_invariant_under_class_permutation(seed in any::<u64>(), perm in Just([2u8, 0, 3, 1]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = common::random_mask(&mut rng, 12, 10, 4);
        let pred = common::random_mask(&mut rng, 12, 10, 4);
        let relabel = |m: &LabelMap| {
            let data = m.as_slice().iter().map(|&v| perm[v as usize]).collect();
            LabelMap::from_vec(m.height(), m.width(), data).unwrap()
        };
        let a = miou(&pred, &gt, 4).mean;
        let b = miou(&relabel(&pred), &relabel(&gt), 4).mean;
        prop_assert!((a - b).abs() < 1e-12);
    }
}
