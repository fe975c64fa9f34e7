//! Oracle suites shared by the per-module tests and the acceptance target.
//! Each suite panics with a description of the first mismatch.

use std::collections::VecDeque;

use pseudoweight_core::gradcore::grad_check;
use pseudoweight_core::maskgeom::{connected_components, IGNORE};
use pseudoweight_core::protobank::PrototypeBank;
use pseudoweight_core::ranksim::{hamming_topk, rank_overlap_weight, top_k_indices};
use pseudoweight_core::reliability::{reliable_pixels, Provenance};
use pseudoweight_core::segmodel::{SegModel, SegModelConfig};
use pseudoweight_core::trainer::loss::{combined_loss_and_grad, LabeledView, UnlabeledView, WeightMap};
use pseudoweight_core::{FeatureVector, LabelMap, LabeledBox, Tensor2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{random_boxes, random_conf, random_image, random_mask};

/// Breadth-first flood fill from every unvisited pixel; components keyed by
/// their smallest pixel index.
pub fn flood_fill_oracle(mask: &LabelMap, class: u8) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![usize::MAX; h * w];
    let mut comps = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if mask.get(r0, c0) != class || label[r0 * w + c0] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut members = Vec::new();
            let mut queue = VecDeque::from([(r0, c0)]);
            label[r0 * w + c0] = id;
            while let Some((r, c)) = queue.pop_front() {
                members.push(r * w + c);
                let nbrs = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
                for (nr, nc) in nbrs {
                    if nr < h && nc < w && label[nr * w + nc] == usize::MAX && mask.get(nr, nc) == class {
                        label[nr * w + nc] = id;
                        queue.push_back((nr, nc));
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
    }
    comps
}

pub fn components_match_flood_fill(masks: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..masks {
        let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let mask = random_mask(&mut rng, h, w, 4);
        for class in 0..4 {
            let got: Vec<Vec<usize>> = connected_components(&mask, class)
                .into_iter()
                .map(|c| c.pixels)
                .collect();
            assert_eq!(got, flood_fill_oracle(&mask, class), "{h}x{w} class {class}");
        }
    }
}

/// Pixel-by-box scan straight from the definition.
pub fn reliability_oracle(pseudo: &LabelMap, conf: &Tensor2, boxes: &[LabeledBox], tau: f64) -> Vec<bool> {
    let (h, w) = (pseudo.height(), pseudo.width());
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = pseudo.get(r, c) as usize;
            let confident = conf.get(r, c) >= tau;
            let boxed = boxes.iter().any(|b| b.class_id == p && b.rect.contains(r, c));
            out[r * w + c] = confident && boxed;
        }
    }
    out
}

pub fn reliability_matches_oracle(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..instances {
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let pseudo = random_mask(&mut rng, h, w, 4);
        let conf = random_conf(&mut rng, h, w);
        let n = rng.gen_range(0..8);
        let boxes = random_boxes(&mut rng, h, w, 4, n);
        let tau = [0.95, 0.5, 0.0, 1.0][i % 4];
        let got = reliable_pixels(&pseudo, &conf, &boxes, tau);
        assert_eq!(
            got.to_bools(),
            reliability_oracle(&pseudo, &conf, &boxes, tau),
            "instance {i}"
        );
        for (p, &b) in got.provenance().iter().zip(&got.to_bools()) {
            assert_eq!(*p == Provenance::Agreement, b);
        }
    }
}

pub fn random_weights(rng: &mut ChaCha8Rng, h: usize, w: usize) -> WeightMap {
    let v = (0..h * w)
        .map(|_| match rng.gen_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..=1.0),
        })
        .collect();
    WeightMap::from_vec(h, w, v).unwrap()
}

pub struct LossInstance {
    pub config: SegModelConfig,
    pub params: Vec<f64>,
    pub labeled: Vec<LabeledView>,
    pub unlabeled: Vec<UnlabeledView>,
    pub alpha: f64,
    pub tau: f64,
}

/// A 4×4 labeled image (one ignored pixel) and a 4×4 unlabeled image with
/// random pseudo-labels, confidences and weights.
pub fn loss_instance(seed: u64) -> LossInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = SegModelConfig {
        channels: 3,
        hidden: 8,
        num_classes: 4,
    };
    let normal = Normal::new(0.0, 0.5).unwrap();
    let params = (0..config.num_params()).map(|_| normal.sample(&mut rng)).collect();
    let mut mask = random_mask(&mut rng, 4, 4, 4);
    mask.set(rng.gen_range(0..4), rng.gen_range(0..4), IGNORE);
    let labeled = vec![LabeledView {
        image: random_image(&mut rng, 4, 4, 3),
        mask,
    }];
    let unlabeled = vec![UnlabeledView {
        image: random_image(&mut rng, 4, 4, 3),
        pseudo: random_mask(&mut rng, 4, 4, 4),
        conf: random_conf(&mut rng, 4, 4),
        weights: random_weights(&mut rng, 4, 4),
    }];
    LossInstance {
        config,
        params,
        labeled,
        unlabeled,
        alpha: rng.gen_range(0.0..1.0),
        tau: 0.5,
    }
}

pub fn combined_gradient_check(instances: u64, rel_tol: f64) {
    for seed in 0..instances {
        let inst = loss_instance(seed);
        let model = SegModel::from_params(inst.config, inst.params.clone()).unwrap();
        let (_, grad) = combined_loss_and_grad(&model, &inst.labeled, &inst.unlabeled, inst.alpha, inst.tau).unwrap();
        let f = |theta: &[f64]| {
            let m = SegModel::from_params(inst.config, theta.to_vec()).unwrap();
            combined_loss_and_grad(&m, &inst.labeled, &inst.unlabeled, inst.alpha, inst.tau)
                .unwrap()
                .0
                .total
        };
        let report = grad_check(f, &inst.params, &grad, rel_tol).unwrap();
        assert!(
            report.passed(),
            "seed {seed}: {} at {}",
            report.max_rel_error,
            report.worst_index
        );
    }
}

/// Random vector with occasional coarse values, so ties occur.
pub fn tie_prone_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| match rng.gen_range(0..8) {
            0 => rng.gen_range(-2..=2) as f64,
            _ => rng.gen_range(-3.0..3.0),
        })
        .collect()
}

pub fn hamming_overlap_identity(pairs: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..pairs {
        let dim = rng.gen_range(1..=64);
        let k = rng.gen_range(1..=dim);
        let (a, b) = (tie_prone_vector(&mut rng, dim), tie_prone_vector(&mut rng, dim));
        let w = rank_overlap_weight(&a, &b, k).unwrap();
        let s = top_k_indices(&a, k).unwrap().overlap(&top_k_indices(&b, k).unwrap());
        assert_eq!(w, s as f64 / k as f64);
        assert_eq!(hamming_topk(&a, &b, k).unwrap(), 2 * (k - s));
        assert_eq!(
            hamming_topk(&a, &b, k).unwrap() as f64,
            (2.0 * k as f64 * (1.0 - w)).round()
        );
    }
}

pub const MONOTONE_MAPS: [fn(f64) -> f64; 3] = [|x| x.exp(), |x| x * x * x + x, |x| 2.0 * x.atan() - 7.0];

pub fn top_k_monotone_invariance(vectors: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..vectors {
        let dim = rng.gen_range(1..=32);
        let k = rng.gen_range(1..=dim);
        let z = tie_prone_vector(&mut rng, dim);
        let base = top_k_indices(&z, k).unwrap();
        for (i, f) in MONOTONE_MAPS.iter().enumerate() {
            let mapped: Vec<f64> = z.iter().map(|&x| f(x)).collect();
            assert_eq!(top_k_indices(&mapped, k).unwrap(), base, "map {i}");
        }
    }
}

pub const BANK_DIM: usize = 3;

/// Feature whose first component identifies it.
pub fn bank_feature(id: usize) -> Vec<f64> {
    vec![id as f64, (id % 7) as f64 * 0.25, -(id as f64) / 3.0]
}

pub fn queue_ids(queue: Option<&VecDeque<FeatureVector>>) -> Vec<usize> {
    queue.map_or_else(Vec::new, |q| q.iter().map(|f| f[0] as usize).collect())
}

pub struct BankOp {
    pub class: usize,
    pub count: usize,
    pub limit: usize,
}

pub fn random_bank_ops(rng: &mut ChaCha8Rng) -> Vec<BankOp> {
    (0..rng.gen_range(1..40))
        .map(|_| BankOp {
            class: rng.gen_range(0..4),
            count: rng.gen_range(0..20),
            limit: rng.gen_range(1..10),
        })
        .collect()
}

/// Runs `ops` against a reference FIFO model, checking capacity, eviction
/// order, source-order sampling and the prototype mean after every push.
pub fn run_bank_checked(bank: &mut PrototypeBank, ops: &[BankOp], next_id: &mut usize) {
    let cap = bank.capacity();
    let mut model: Vec<VecDeque<usize>> = (0..4).map(|c| queue_ids(bank.queue(c)).into()).collect();
    for op in ops {
        let first = *next_id;
        let feats: Vec<Vec<f64>> = (first..first + op.count).map(bank_feature).collect();
        *next_id += op.count;
        bank.push_features(op.class, &feats, op.limit).unwrap();

        let got = queue_ids(bank.queue(op.class));
        let appended = op.limit.min(op.count);
        let fresh: Vec<usize> = got.iter().copied().filter(|&i| i >= first).collect();
        assert_eq!(fresh.len(), appended.min(cap));
        assert!(fresh.windows(2).all(|p| p[0] < p[1]), "source order kept");
        assert!(fresh.iter().all(|&i| i < first + op.count));
        assert_eq!(got[got.len() - fresh.len()..], fresh[..], "fresh entries at the tail");

        let q = &mut model[op.class];
        // sampled ids that were evicted within this same push are unknowable;
        // only the survivors are appended to the model
        q.extend(fresh.iter().copied());
        while q.len() > cap {
            q.pop_front();
        }
        for c in 0..4 {
            assert_eq!(queue_ids(bank.queue(c)), Vec::from(model[c].clone()), "class {c}");
            assert!(bank.len(c) <= cap);
        }

        match bank.prototype(op.class) {
            None => assert!(model[op.class].is_empty()),
            Some(p) => {
                let n = model[op.class].len();
                assert_eq!(p.support, n);
                for d in 0..BANK_DIM {
                    let mean = model[op.class].iter().map(|&i| bank_feature(i)[d]).sum::<f64>() / n as f64;
                    assert!((p.vector[d] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
                }
            }
        }
    }
}

pub fn fifo_prototype_suite(sequences: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..sequences {
        let cap = rng.gen_range(1..30);
        let seed = rng.gen();
        let ops = random_bank_ops(&mut rng);
        let mut bank = PrototypeBank::new(BANK_DIM, cap, seed).unwrap();
        run_bank_checked(&mut bank, &ops, &mut 0);

        // same seed and operations give the same bank
        let mut again = PrototypeBank::new(BANK_DIM, cap, seed).unwrap();
        let mut start = 0;
        for op in &ops {
            let feats: Vec<Vec<f64>> = (start..start + op.count).map(bank_feature).collect();
            start += op.count;
            again.push_features(op.class, &feats, op.limit).unwrap();
        }
        assert_eq!(again, bank);
    }
}
