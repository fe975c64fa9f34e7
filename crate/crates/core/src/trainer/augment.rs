//! Weak and strong image views.
//!
//! Weak: horizontal flip with p = 0.5 and additive Gaussian noise σ = 0.01.
//! Strong: the weak view for the same seed, then every channel scaled by its
//! own factor in `1 ± 0.2` and a zero-filled rectangular cutout of at most 25%
//! of the area.
//! Both views of one seed share the flip, so pseudo-labels from the weak view
//! line up with the strong view pixel for pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::gradcore::Tensor3;
use crate::maskgeom::LabelMap;

pub const WEAK_NOISE_STD: f64 = 0.01;
pub const CHANNEL_JITTER: f64 = 0.2;
pub const MAX_CUTOUT_FRACTION: f64 = 0.25;

/// Whether the weak view for `seed` is mirrored.
pub fn weak_flip(seed: u64) -> bool {
    ChaCha8Rng::seed_from_u64(seed).gen_bool(0.5)
}

fn flip_image(image: &Tensor3) -> Tensor3 {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            out.pixel_mut(r, c).copy_from_slice(image.pixel(r, w - 1 - c));
        }
    }
    out
}

pub fn weak_augment(image: &Tensor3, seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.gen_bool(0.5);
    let mut out = if flip { flip_image(image) } else { image.clone() };
    let noise = Normal::new(0.0, WEAK_NOISE_STD).expect("valid std");
    for v in out.as_mut_slice() {
        *v += noise.sample(&mut rng);
    }
    out
}

/// The mask geometry matching [`weak_augment`] (and [`strong_augment`]) for `seed`.
pub fn augment_mask(mask: &LabelMap, seed: u64) -> LabelMap {
    if weak_flip(seed) {
        mask.flipped_horizontal()
    } else {
        mask.clone()
    }
}

pub fn strong_augment(image: &Tensor3, seed: u64) -> Tensor3 {
    let mut out = weak_augment(image, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (h, w, ch) = (out.height(), out.width(), out.channels());
    let scales: Vec<f64> = (0..ch)
        .map(|_| 1.0 + rng.gen_range(-CHANNEL_JITTER..=CHANNEL_JITTER))
        .collect();
    for px in out.as_mut_slice().chunks_exact_mut(ch) {
        for (v, s) in px.iter_mut().zip(&scales) {
            *v *= s;
        }
    }
    // cutout: area fraction up to 25%, aspect drawn independently
    let frac = rng.gen_range(0.0..=MAX_CUTOUT_FRACTION);
    let ch_rows = ((h as f64 * frac.sqrt()).round() as usize).min(h);
    let ch_cols = ((w as f64 * frac.sqrt()).round() as usize).min(w);
    if ch_rows > 0 && ch_cols > 0 {
        let top = rng.gen_range(0..=h - ch_rows);
        let left = rng.gen_range(0..=w - ch_cols);
        for r in top..top + ch_rows {
            for c in left..left + ch_cols {
                out.pixel_mut(r, c).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor3 {
        let data = (0..h * w * 3).map(|i| (i % 17) as f64 / 17.0).collect();
        Tensor3::from_vec(h, w, 3, data).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let img = ramp(8, 8);
        assert_eq!(weak_augment(&img, 4), weak_augment(&img, 4));
        assert_eq!(strong_augment(&img, 4), strong_augment(&img, 4));
    }

    #[test]
    fn weak_view_follows_mask_geometry() {
        let img = ramp(6, 7);
        let mut flipped = 0;
        for seed in 0..20 {
            let out = weak_augment(&img, seed);
            let src_col = |c: usize| if weak_flip(seed) { 6 - c } else { c };
            flipped += weak_flip(seed) as usize;
            for r in 0..6 {
                for c in 0..7 {
                    for k in 0..3 {
                        assert!((out.get(r, c, k) - img.get(r, src_col(c), k)).abs() < 0.1);
                    }
                }
            }
            let mut mask = LabelMap::filled(6, 7, 0);
            mask.set(2, 1, 3);
            let m = augment_mask(&mask, seed);
            assert_eq!(m.get(2, src_col(1)), 3);
        }
        assert!(flipped > 0 && flipped < 20);
    }

    #[test]
    fn strong_view_changes_pixels() {
        let img = ramp(16, 16);
        for seed in 0..10 {
            let weak = weak_augment(&img, seed);
            let strong = strong_augment(&img, seed);
            let changed = weak
                .as_slice()
                .iter()
                .zip(strong.as_slice())
                .filter(|(a, b)| (*a - *b).abs() > 1e-9)
                .count();
            assert!(changed as f64 >= 0.01 * weak.as_slice().len() as f64);
        }
    }
}
