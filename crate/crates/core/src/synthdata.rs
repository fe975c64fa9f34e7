//! Procedural segmentation corpus: textured rectangles, disks and triangles
//! on a background, with exact masks and a labeled/unlabeled partition.
//!
//! Class 0 is background. Every class has a base colour; a pixel's value is
//! `gain · (base[class] + d) + u` with `u ~ U(-noise, noise)` per channel,
//! `d ~ U(-instance_jitter, instance_jitter)` per channel drawn once per shape
//! (zero on background) and `gain` drawn once per image. The last two
//! foreground classes form a confusable pair whose colours are interpolated
//! toward each other by `confusion`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::gradcore::Tensor3;
use crate::maskgeom::LabelMap;

const MAX_PLACEMENT_TRIES: usize = 100;
const MAX_PARTITION_TRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

const SHAPE_KINDS: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Triangle];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Training corpus size (split into labeled/unlabeled).
    pub num_images: usize,
    /// Held-out evaluation images.
    pub num_val: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Including background (class 0).
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape extent in pixels (side, diameter or triangle base).
    pub min_size: usize,
    pub max_size: usize,
    /// Half-width of the per-pixel uniform noise.
    pub noise: f64,
    /// Per-image brightness gain is drawn from `[1 - gain_jitter, 1 + gain_jitter]`.
    pub gain_jitter: f64,
    /// 0 keeps the confusable pair at their palette colours, 1 makes them identical.
    pub confusion: f64,
    /// Half-width of the per-shape colour offset.
    pub instance_jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_images: 160,
            num_val: 40,
            height: 32,
            width: 32,
            channels: 3,
            num_classes: 5,
            min_shapes: 1,
            max_shapes: 3,
            min_size: 7,
            max_size: 14,
            noise: 0.15,
            gain_jitter: 0.2,
            confusion: 0.6,
            instance_jitter: 0.2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.num_classes > 254 {
            return bad("num_classes must fit in one byte below the ignore value".into());
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.min_shapes > self.max_shapes {
            return bad("min_shapes exceeds max_shapes".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad("shape sizes must satisfy 1 <= min_size <= max_size".into());
        }
        if !(self.noise >= 0.0) || !(0.0..1.0).contains(&self.gain_jitter) {
            return bad("noise must be >= 0 and gain_jitter in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.confusion) {
            return bad("confusion must lie in [0, 1]".into());
        }
        if !(self.instance_jitter >= 0.0) {
            return bad("instance_jitter must be >= 0".into());
        }
        Ok(())
    }

    /// Base colour of every class, `[class][channel]`.
    pub fn palette(&self) -> Vec<Vec<f64>> {
        let fg = self.num_classes - 1;
        let mut colors: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|c| {
                if c == 0 {
                    return vec![0.5; self.channels];
                }
                let hue = 2.0 * PI * (c - 1) as f64 / fg as f64;
                (0..self.channels)
                    .map(|ch| 0.5 + 0.3 * (hue - 2.0 * PI * ch as f64 / 3.0).cos())
                    .collect()
            })
            .collect();
        if fg >= 2 {
            let (a, b) = (self.num_classes - 2, self.num_classes - 1);
            let anchor = colors[a].clone();
            for (v, base) in colors[b].iter_mut().zip(anchor) {
                *v = base + (1.0 - self.confusion) * (*v - base);
            }
        }
        colors
    }

    /// The two confusable classes, when there are at least two foreground classes.
    pub fn confusable_pair(&self) -> Option<(usize, usize)> {
        (self.num_classes >= 3).then(|| (self.num_classes - 2, self.num_classes - 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor3,
    pub mask: LabelMap,
    pub gain: f64,
}

/// One painted shape.
#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    class: u8,
    top: usize,
    left: usize,
    size: usize,
}

impl Shape {
    fn covers(&self, r: usize, c: usize) -> bool {
        if r < self.top || c < self.left || r >= self.top + self.size || c >= self.left + self.size {
            return false;
        }
        let (y, x) = ((r - self.top) as f64 + 0.5, (c - self.left) as f64 + 0.5);
        let s = self.size as f64;
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Disk => {
                let (dy, dx) = (y - s / 2.0, x - s / 2.0);
                dy * dy + dx * dx <= (s / 2.0) * (s / 2.0)
            }
            // apex at top centre, base along the bottom row
            ShapeKind::Triangle => (x - s / 2.0).abs() <= y / 2.0,
        }
    }
}

fn generate_sample(spec: &DatasetSpec, palette: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let n_shapes = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut mask = LabelMap::filled(h, w, 0);
    // per pixel, the colour offset of the topmost shape
    let mut offsets: Vec<Option<usize>> = vec![None; h * w];
    let mut shape_offsets: Vec<Vec<f64>> = Vec::new();
    for _ in 0..n_shapes {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let size = rng.gen_range(spec.min_size..=spec.max_size);
            if size > h || size > w {
                continue;
            }
            placed = Some(Shape {
                kind: SHAPE_KINDS[rng.gen_range(0..SHAPE_KINDS.len())],
                class: rng.gen_range(1..spec.num_classes) as u8,
                top: rng.gen_range(0..=h - size),
                left: rng.gen_range(0..=w - size),
                size,
            });
            break;
        }
        let shape = placed.ok_or(Error::Placement(MAX_PLACEMENT_TRIES))?;
        let j = spec.instance_jitter;
        shape_offsets.push(if j > 0.0 {
            (0..ch).map(|_| rng.gen_range(-j..=j)).collect()
        } else {
            vec![0.0; ch]
        });
        for r in shape.top..shape.top + shape.size {
            for c in shape.left..shape.left + shape.size {
                if shape.covers(r, c) {
                    mask.set(r, c, shape.class);
                    offsets[r * w + c] = Some(shape_offsets.len() - 1);
                }
            }
        }
    }
    let gain = 1.0 + rng.gen_range(-spec.gain_jitter..=spec.gain_jitter);
    let mut image = Tensor3::zeros(h, w, ch);
    for r in 0..h {
        for c in 0..w {
            let base = &palette[mask.get(r, c) as usize];
            let offset = offsets[r * w + c].map(|i| shape_offsets[i].as_slice());
            for (k, v) in image.pixel_mut(r, c).iter_mut().enumerate() {
                let u = if spec.noise > 0.0 {
                    rng.gen_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                let d = offset.map_or(0.0, |o| o[k]);
                *v = gain * (base[k] + d) + u;
            }
        }
    }
    Ok(Sample { image, mask, gain })
}

/// A generated corpus: training images (to be partitioned) and validation images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Deterministic corpus for `spec`. Training and validation images come from
/// independent RNG streams.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let palette = spec.palette();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = (0..spec.num_images)
        .map(|_| generate_sample(spec, &palette, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut val_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    val_rng.set_stream(1);
    let val = (0..spec.num_val)
        .map(|_| generate_sample(spec, &palette, &mut val_rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

/// Indices into the training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// `⌈fraction · n⌉`, tolerant of fractions like `1/16` that are not exact in binary.
pub fn labeled_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Uniform random split; the labeled side has `⌈fraction · N⌉` images and
/// contains every class that occurs in the corpus.
pub fn partition(samples: &[Sample], fraction: f64, seed: u64) -> Result<Partition> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "partition fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = samples.len();
    let m = labeled_count(fraction, n);
    if m == 0 {
        return Err(Error::InvalidConfig("labeled split would be empty".into()));
    }
    let mut corpus_classes = [false; 256];
    for s in samples {
        for &v in s.mask.as_slice() {
            corpus_classes[v as usize] = true;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut missing = 0;
    for _ in 0..MAX_PARTITION_TRIES {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut labeled = order[..m].to_vec();
        let mut seen = [false; 256];
        for &i in &labeled {
            for &v in samples[i].mask.as_slice() {
                seen[v as usize] = true;
            }
        }
        match (0..256).find(|&c| corpus_classes[c] && !seen[c]) {
            Some(c) => missing = c,
            None => {
                labeled.sort_unstable();
                let mut unlabeled = order[m..].to_vec();
                unlabeled.sort_unstable();
                return Ok(Partition { labeled, unlabeled });
            }
        }
    }
    Err(Error::LabeledSplitMissingClass(missing))
}

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageEntry {
    image: String,
    mask: String,
    gain: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    layout: String,
    spec: DatasetSpec,
    partition_fraction: f64,
    partition_seed: u64,
    partition: Partition,
    train: Vec<ImageEntry>,
    val: Vec<ImageEntry>,
}

/// A dataset on disk: corpus plus its recorded partition.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub dataset: Dataset,
    pub partition: Partition,
    pub partition_fraction: f64,
    pub partition_seed: u64,
}

impl StoredDataset {
    pub fn labeled(&self) -> Vec<&Sample> {
        self.partition.labeled.iter().map(|&i| &self.dataset.train[i]).collect()
    }

    pub fn unlabeled(&self) -> Vec<&Sample> {
        self.partition
            .unlabeled
            .iter()
            .map(|&i| &self.dataset.train[i])
            .collect()
    }

    /// `labeled`, `unlabeled` or `val`.
    pub fn split(&self, name: &str) -> Result<Vec<&Sample>> {
        match name {
            "labeled" => Ok(self.labeled()),
            "unlabeled" => Ok(self.unlabeled()),
            "val" => Ok(self.dataset.val.iter().collect()),
            "train" => Ok(self.dataset.train.iter().collect()),
            other => Err(Error::InvalidConfig(format!(
                "unknown split '{other}' (expected labeled, unlabeled, val or train)"
            ))),
        }
    }
}

const LAYOUT_DOC: &str = "image files: height*width*channels IEEE-754 binary64 little-endian values, \
row-major (row, col, channel); mask files: height*width unsigned bytes, row-major, 255 = ignore";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

fn image_bytes(t: &Tensor3) -> Vec<u8> {
    t.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Write `manifest.json` plus one `.f64` image and one `.u8` mask per sample.
/// `dir` is created if missing; its parent must exist.
pub fn save_dataset(dir: &Path, stored: &StoredDataset) -> Result<()> {
    if !dir.exists() {
        fs::create_dir(dir).map_err(io_err(dir))?;
    }
    let entries = |prefix: &str, samples: &[Sample]| -> Result<Vec<ImageEntry>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let image = format!("{prefix}_{i:05}.f64");
                let mask = format!("{prefix}_{i:05}.u8");
                write_file(&dir.join(&image), &image_bytes(&s.image))?;
                write_file(&dir.join(&mask), s.mask.as_slice())?;
                Ok(ImageEntry {
                    image,
                    mask,
                    gain: s.gain,
                })
            })
            .collect()
    };
    let train = entries("train", &stored.dataset.train)?;
    let val = entries("val", &stored.dataset.val)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        layout: LAYOUT_DOC.into(),
        spec: stored.dataset.spec.clone(),
        partition_fraction: stored.partition_fraction,
        partition_seed: stored.partition_seed,
        partition: stored.partition.clone(),
        train,
        val,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_file(&dir.join(MANIFEST_FILE), &json)
}

pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CorruptDataset(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let spec = manifest.spec;
    spec.validate()?;
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let load = |e: &ImageEntry| -> Result<Sample> {
        let ipath = dir.join(&e.image);
        let bytes = fs::read(&ipath).map_err(io_err(&ipath))?;
        if bytes.len() != h * w * ch * 8 {
            return Err(Error::CorruptDataset(format!("{} has {} bytes", e.image, bytes.len())));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let mpath = dir.join(&e.mask);
        let mbytes = fs::read(&mpath).map_err(io_err(&mpath))?;
        let mask = LabelMap::from_vec(h, w, mbytes)
            .map_err(|_| Error::CorruptDataset(format!("{} has the wrong size", e.mask)))?;
        mask.validate(spec.num_classes)?;
        Ok(Sample {
            image: Tensor3::from_vec(h, w, ch, values)?,
            mask,
            gain: e.gain,
        })
    };
    let train = manifest.train.iter().map(load).collect::<Result<Vec<_>>>()?;
    let val = manifest.val.iter().map(load).collect::<Result<Vec<_>>>()?;
    let n = train.len();
    let p = &manifest.partition;
    let mut seen = vec![false; n];
    for &i in p.labeled.iter().chain(&p.unlabeled) {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::CorruptDataset(format!(
                "partition index {i} invalid or repeated"
            )));
        }
    }
    Ok(StoredDataset {
        dataset: Dataset { spec, train, val },
        partition: manifest.partition,
        partition_fraction: manifest.partition_fraction,
        partition_seed: manifest.partition_seed,
    })
}
