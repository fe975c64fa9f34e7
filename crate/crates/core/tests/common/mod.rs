#![allow(dead_code)]

pub mod suites;

use pseudoweight_core::{LabelMap, LabeledBox, Rect, Tensor2, Tensor3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Mask with a few painted rectangles over salt noise, so components come in
/// every size from single pixels to large blobs.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    let mut m = LabelMap::filled(h, w, 0);
    let salt = rng.gen_range(0.0..0.5);
    for r in 0..h {
        for c in 0..w {
            if rng.gen_bool(salt) {
                m.set(r, c, rng.gen_range(0..classes));
            }
        }
    }
    for _ in 0..rng.gen_range(0..6) {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (r1, c1) = (rng.gen_range(r0..h), rng.gen_range(c0..w));
        let class = rng.gen_range(0..classes);
        for r in r0..=r1 {
            for c in c0..=c1 {
                m.set(r, c, class);
            }
        }
    }
    m
}

pub fn random_rect(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Rect {
    let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
    Rect::new(r0, c0, rng.gen_range(r0..h), rng.gen_range(c0..w))
}

pub fn random_boxes(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize, n: usize) -> Vec<LabeledBox> {
    (0..n)
        .map(|_| LabeledBox {
            class_id: rng.gen_range(0..classes),
            rect: random_rect(rng, h, w),
            confidence: rng.gen_range(0.0..=1.0),
        })
        .collect()
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Tensor3 {
    Tensor3::from_vec(h, w, ch, (0..h * w * ch).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn random_conf(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor2 {
    // a third of the pixels sit exactly on common thresholds
    let data = (0..h * w)
        .map(|_| match rng.gen_range(0..6) {
            0 => 0.95,
            1 => 0.5,
            _ => rng.gen_range(0.0..=1.0),
        })
        .collect();
    Tensor2::from_vec(h, w, data).unwrap()
}
