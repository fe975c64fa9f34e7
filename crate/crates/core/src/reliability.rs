//! Reliable pseudo-label pixels: the segmenter is confident and a detector box
//! of the same class covers the pixel.

use crate::gradcore::Tensor2;
use crate::maskgeom::{LabelMap, LabeledBox, IGNORE};

/// Default segmentation confidence threshold.
pub const DEFAULT_TAU: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Provenance {
    #[default]
    None,
    /// Segmenter and detector agree and the segmenter is confident.
    Agreement,
    /// Ground-truth pixel of a labeled image.
    LabeledSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReliabilityMask {
    height: usize,
    width: usize,
    provenance: Vec<Provenance>,
}

impl ReliabilityMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            provenance: vec![Provenance::None; height * width],
        }
    }

    /// Every non-ignored pixel of a ground-truth mask.
    pub fn labeled(mask: &LabelMap) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            provenance: mask
                .as_slice()
                .iter()
                .map(|&v| {
                    if v == IGNORE {
                        Provenance::None
                    } else {
                        Provenance::LabeledSource
                    }
                })
                .collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_reliable(&self, row: usize, col: usize) -> bool {
        self.provenance[row * self.width + col] != Provenance::None
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Reliable flags, row-major.
    pub fn to_bools(&self) -> Vec<bool> {
        self.provenance.iter().map(|&p| p != Provenance::None).collect()
    }

    pub fn count(&self) -> usize {
        self.provenance.iter().filter(|&&p| p != Provenance::None).count()
    }
}

/// A pixel is reliable iff `conf ≥ tau` and some box with
/// `class_id == pseudo-label` contains it (inclusive bounds). Classes without
/// detector boxes never become reliable here.
pub fn reliable_pixels(pseudo: &LabelMap, conf: &Tensor2, boxes: &[LabeledBox], tau: f64) -> ReliabilityMask {
    assert!(
        pseudo.height() == conf.height() && pseudo.width() == conf.width(),
        "pseudo-label and confidence maps differ in size"
    );
    let (h, w) = (pseudo.height(), pseudo.width());
    let mut out = ReliabilityMask::empty(h, w);
    for b in boxes {
        let r1 = b.rect.row_max.min(h.saturating_sub(1));
        let c1 = b.rect.col_max.min(w.saturating_sub(1));
        for r in b.rect.row_min..=r1 {
            for c in b.rect.col_min..=c1 {
                let idx = r * w + c;
                if pseudo.as_slice()[idx] as usize == b.class_id && conf.as_slice()[idx] >= tau {
                    out.provenance[idx] = Provenance::Agreement;
                }
            }
        }
    }
    out
}
