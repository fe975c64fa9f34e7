//! Label maps, connected components, mask-to-box conversion and box IoU.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value for pixels without a class.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids, row-major. Used for ground-truth masks and
/// pseudo-label maps alike.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

pub type SegmentationMask = LabelMap;
pub type PseudoLabelMap = LabelMap;

impl LabelMap {
    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimMismatch {
                expected: height * width,
                actual: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Checks every value is `< num_classes` or [`IGNORE`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
            Some(&v) => Err(Error::ClassOutOfRange {
                class: v as usize,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Mirror left-right.
    pub fn flipped_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            out.data[r * self.width..(r + 1) * self.width].reverse();
        }
        out
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl Rect {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Self {
        debug_assert!(row_min <= row_max && col_min <= col_max);
        Self {
            row_min,
            col_min,
            row_max,
            col_max,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let r0 = self.row_min.max(other.row_min);
        let c0 = self.col_min.max(other.col_min);
        let r1 = self.row_max.min(other.row_max);
        let c1 = self.col_max.min(other.col_max);
        (r0 <= r1 && c0 <= c1).then(|| Rect::new(r0, c0, r1, c1))
    }

    /// Mirror left-right inside an image of the given width.
    pub fn flipped_horizontal(&self, image_width: usize) -> Rect {
        Rect::new(
            self.row_min,
            image_width - 1 - self.col_max,
            self.row_max,
            image_width - 1 - self.col_min,
        )
    }
}

/// Intersection over union of inclusive pixel areas.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    match a.intersection(b) {
        None => 0.0,
        Some(i) => {
            let inter = i.area();
            inter as f64 / (a.area() + b.area() - inter) as f64
        }
    }
}

/// A class-tagged rectangle with a confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class_id: usize,
    pub rect: Rect,
    pub confidence: f64,
}

/// One 4-connected component: flat pixel indices in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<usize>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn bounding_rect(&self, width: usize) -> Rect {
        let mut rect = Rect {
            row_min: usize::MAX,
            col_min: usize::MAX,
            row_max: 0,
            col_max: 0,
        };
        for &p in &self.pixels {
            let (r, c) = (p / width, p % width);
            rect.row_min = rect.row_min.min(r);
            rect.col_min = rect.col_min.min(c);
            rect.row_max = rect.row_max.max(r);
            rect.col_max = rect.col_max.max(c);
        }
        rect
    }
}

/// Maximal 4-connected components of `class_id`, ordered by their first
/// pixel in row-major scan order.
pub fn connected_components(mask: &LabelMap, class_id: u8) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let data = &mask.data;
    let mut seen = vec![false; data.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..data.len() {
        if seen[start] || data[start] != class_id {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && data[q] == class_id {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        pixels.sort_unstable();
        out.push(Component { pixels });
    }
    out
}

/// One tight box per connected component of every class not in
/// `excluded_classes`; confidence 1.0. Classes are visited in ascending order.
pub fn boxes_from_mask(mask: &LabelMap, excluded_classes: &[usize]) -> Vec<LabeledBox> {
    let mut present = [false; 256];
    for &v in &mask.data {
        present[v as usize] = true;
    }
    let mut boxes = Vec::new();
    for class in 0..IGNORE {
        if !present[class as usize] || excluded_classes.contains(&(class as usize)) {
            continue;
        }
        for comp in connected_components(mask, class) {
            boxes.push(LabeledBox {
                class_id: class as usize,
                rect: comp.bounding_rect(mask.width),
                confidence: 1.0,
            });
        }
    }
    boxes
}

/// Correct / total predicted boxes for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassBoxAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl ClassBoxAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Per-class box accuracy. A predicted box is correct when greedy matching
/// (descending IoU; ties by prediction then GT index) pairs it with an unused
/// same-class GT box at IoU ≥ `iou_thresh`.
pub fn box_accuracy(pred: &[LabeledBox], gt: &[LabeledBox], iou_thresh: f64) -> BTreeMap<usize, ClassBoxAccuracy> {
    let mut out: BTreeMap<usize, ClassBoxAccuracy> = BTreeMap::new();
    for p in pred {
        out.entry(p.class_id).or_default().total += 1;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if p.class_id != g.class_id {
                continue;
            }
            let v = iou(&p.rect, &g.rect);
            if v >= iou_thresh {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    for (_, i, j) in pairs {
        if pred_used[i] || gt_used[j] {
            continue;
        }
        pred_used[i] = true;
        gt_used[j] = true;
        out.get_mut(&pred[i].class_id).expect("class counted").correct += 1;
    }
    out
}

pub const BOX_CSV_HEADER: &str = "class_id,row_min,col_min,row_max,col_max,confidence";

pub fn write_boxes_csv<W: Write>(mut w: W, boxes: &[LabeledBox]) -> std::io::Result<()> {
    writeln!(w, "{BOX_CSV_HEADER}")?;
    for b in boxes {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            b.class_id, b.rect.row_min, b.rect.col_min, b.rect.row_max, b.rect.col_max, b.confidence
        )?;
    }
    Ok(())
}

pub fn read_boxes_csv<R: BufRead>(r: R) -> Result<Vec<LabeledBox>> {
    let bad = |line: usize, why: &str| Error::CorruptDataset(format!("box csv line {line}: {why}"));
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == BOX_CSV_HEADER => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut boxes = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(n + 2, &e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(n + 2, "expected 6 fields"));
        }
        let u = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(n + 2, "bad integer"));
        let rect = Rect {
            row_min: u(f[1])?,
            col_min: u(f[2])?,
            row_max: u(f[3])?,
            col_max: u(f[4])?,
        };
        if rect.row_min > rect.row_max || rect.col_min > rect.col_max {
            return Err(bad(n + 2, "inverted rectangle"));
        }
        boxes.push(LabeledBox {
            class_id: u(f[0])?,
            rect,
            confidence: f[5].trim().parse().map_err(|_| bad(n + 2, "bad confidence"))?,
        });
    }
    Ok(boxes)
}
