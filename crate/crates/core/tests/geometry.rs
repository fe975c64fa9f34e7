mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use pseudoweight_core::maskgeom::{
    box_accuracy, boxes_from_mask, connected_components, iou, read_boxes_csv, write_boxes_csv,
};
use pseudoweight_core::{LabelMap, LabeledBox, Rect};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::suites::{self, flood_fill_oracle};

#[test]
fn components_match_flood_fill_on_500_masks() {
    suites::components_match_flood_fill(500);
}

#[test]
fn box_count_equals_component_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let mask = common::random_mask(&mut rng, 20, 24, 5);
        let boxes = boxes_from_mask(&mask, &[0]);
        let expected: usize = (1..5).map(|c| flood_fill_oracle(&mask, c).len()).sum();
        assert_eq!(boxes.len(), expected);
        for b in &boxes {
            assert_ne!(b.class_id, 0);
            assert_eq!(b.confidence, 1.0);
        }
    }
}

#[test]
fn boxes_are_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let mask = common::random_mask(&mut rng, 16, 16, 3);
        for b in boxes_from_mask(&mask, &[]) {
            let r = b.rect;
            let class = b.class_id as u8;
            let row_has = |row: usize| (r.col_min..=r.col_max).any(|c| mask.get(row, c) == class);
            let col_has = |col: usize| (r.row_min..=r.row_max).any(|row| mask.get(row, col) == class);
            assert!(row_has(r.row_min) && row_has(r.row_max));
            assert!(col_has(r.col_min) && col_has(r.col_max));
        }
    }
}

#[test]
fn two_blob_mask_gives_two_boxes() {
    let mut mask = LabelMap::filled(6, 6, 0);
    for (r, c) in [(0, 0), (0, 1), (1, 0), (4, 4), (5, 5), (4, 5)] {
        mask.set(r, c, 2);
    }
    let boxes = boxes_from_mask(&mask, &[0]);
    assert_eq!(boxes.len(), 2);
    assert_eq!(boxes[0].rect, Rect::new(0, 0, 1, 1));
    assert_eq!(boxes[1].rect, Rect::new(4, 4, 5, 5));
    assert!(boxes_from_mask(&LabelMap::filled(6, 6, 0), &[0]).is_empty());
}

/// Exhaustive best matching for tiny instances: the greedy result must never
/// claim more matches than the optimum, and must find at least one when any
/// pair qualifies.
fn max_matching(pred: &[LabeledBox], gt: &[LabeledBox], thresh: f64) -> usize {
    fn go(i: usize, pred: &[LabeledBox], gt: &[LabeledBox], used: &mut Vec<bool>, thresh: f64) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, gt, used, thresh);
        for j in 0..gt.len() {
            if !used[j] && pred[i].class_id == gt[j].class_id && iou(&pred[i].rect, &gt[j].rect) >= thresh {
                used[j] = true;
                best = best.max(1 + go(i + 1, pred, gt, used, thresh));
                used[j] = false;
            }
        }
        best
    }
    go(0, pred, gt, &mut vec![false; gt.len()], thresh)
}

#[test]
fn box_accuracy_against_exhaustive_matching() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..300 {
        let n = rng.gen_range(0..5);
        let pred = common::random_boxes(&mut rng, 10, 10, 2, n);
        let n = rng.gen_range(0..5);
        let gt = common::random_boxes(&mut rng, 10, 10, 2, n);
        let acc = box_accuracy(&pred, &gt, 0.3);
        let correct: usize = acc.values().map(|a| a.correct).sum();
        let total: usize = acc.values().map(|a| a.total).sum();
        assert_eq!(total, pred.len());
        let best = max_matching(&pred, &gt, 0.3);
        assert!(correct <= best);
        assert_eq!(correct == 0, best == 0);
    }
}

#[test]
fn identical_boxes_all_correct() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let gt = common::random_boxes(&mut rng, 30, 30, 3, 8);
    let acc = box_accuracy(&gt, &gt, 0.5);
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for b in &gt {
        *per_class.entry(b.class_id).or_default() += 1;
    }
    for (c, n) in per_class {
        assert_eq!((acc[&c].correct, acc[&c].total), (n, n));
    }
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in (0usize..20, 0usize..20, 0usize..10, 0usize..10),
                                 b in (0usize..20, 0usize..20, 0usize..10, 0usize..10)) {
        let ra = Rect::new(a.0, a.1, a.0 + a.2, a.1 + a.3);
        let rb = Rect::new(b.0, b.1, b.0 + b.2, b.1 + b.3);
        let v = iou(&ra, &rb);
        prop_assert_eq!(v, iou(&rb, &ra));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&ra, &ra), 1.0);
    }

    #[test]
    fn components_partition_the_class(seed in any::<u64>(), h in 1usize..24, w in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = common::random_mask(&mut rng, h, w, 3);
        for class in 0..3u8 {
            let mut all: Vec<usize> = connected_components(&mask, class).into_iter().flat_map(|c| c.pixels).collect();
            all.sort_unstable();
            let expected: Vec<usize> = (0..h * w).filter(|&i| mask.as_slice()[i] == class).collect();
            prop_assert_eq!(all, expected);
        }
    }

    #[test]
    fn box_csv_round_trip(seed in any::<u64>(), n in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes = common::random_boxes(&mut rng, 40, 40, 6, n);
        let mut buf = Vec::new();
        write_boxes_csv(&mut buf, &boxes).unwrap();
        prop_assert_eq!(read_boxes_csv(buf.as_slice()).unwrap(), boxes);
    }
}
