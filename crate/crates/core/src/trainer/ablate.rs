//! One-axis hyperparameter sweeps over several seeds.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ranksim::Similarity;

use super::{train, EpochMetrics, TrainConfig, TrainData};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    K,
    Alpha,
    BboxConf,
    BankCapacity,
    Similarity,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::K,
        Axis::Alpha,
        Axis::BboxConf,
        Axis::BankCapacity,
        Axis::Similarity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::Alpha => "alpha",
            Axis::BboxConf => "bbox_conf",
            Axis::BankCapacity => "bank_capacity",
            Axis::Similarity => "similarity",
        }
    }

    /// `config` with this axis set to `value`.
    pub fn apply(self, config: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let bad = |e: &dyn fmt::Display| Error::InvalidConfig(format!("{}: bad value '{value}': {e}", self.as_str()));
        let mut c = config.clone();
        let v = value.trim();
        match self {
            Axis::K => c.k = v.parse().map_err(|e| bad(&e))?,
            Axis::Alpha => c.alpha = v.parse().map_err(|e| bad(&e))?,
            Axis::BboxConf => c.bbox_conf = v.parse().map_err(|e| bad(&e))?,
            Axis::BankCapacity => c.bank_capacity = v.parse().map_err(|e| bad(&e))?,
            Axis::Similarity => c.similarity = v.parse::<Similarity>().map_err(|e| bad(&e))?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownAxis(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub seed: u64,
    /// Metrics of the last epoch.
    pub last: EpochMetrics,
}

/// Per-value mean of the final metrics; accuracy columns average the seeds
/// where they are defined.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationMean {
    pub value: String,
    pub miou: f64,
    pub pl_acc_conf: Option<f64>,
    pub pl_acc_weighted: Option<f64>,
    pub reliable_acc: Option<f64>,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub axis: Axis,
    /// Value-major, then seed, in input order.
    pub rows: Vec<AblationRow>,
    pub means: Vec<AblationMean>,
}

pub const ABLATION_CSV_HEADER: &str =
    "axis,value,seed,miou,pl_acc_conf,pl_acc_weighted,reliable_acc,loss_sup,loss_unsup,loss_total";

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            let m = &r.last;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                self.axis,
                r.value,
                r.seed,
                m.miou,
                opt(m.pl_acc_conf()),
                opt(m.pl_acc_weighted()),
                opt(m.reliable_acc()),
                m.loss.sup,
                m.loss.unsup,
                m.loss.total
            );
        }
        for m in &self.means {
            let _ = writeln!(
                s,
                "{},{},mean,{},{},{},{},{},{},{}",
                self.axis,
                m.value,
                m.miou,
                opt(m.pl_acc_conf),
                opt(m.pl_acc_weighted),
                opt(m.reliable_acc),
                m.loss_sup,
                m.loss_unsup,
                m.loss_total
            );
        }
        s
    }
}

/// Trains one run per `(value, seed)` cell. Cells run on a pool of at most
/// `threads` workers (all cores when `None`); results are ordered by value,
/// then seed.
pub fn ablate(
    config: &TrainConfig,
    data: &TrainData,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
    threads: Option<usize>,
) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    for v in values {
        let base = axis.apply(config, v)?;
        for &seed in seeds {
            cells.push((v.trim().to_string(), seed, TrainConfig { seed, ..base.clone() }));
        }
    }
    let run = || -> Result<Vec<AblationRow>> {
        cells
            .par_iter()
            .map(|(value, seed, cfg)| {
                let state = train(cfg, data)?;
                let last = state
                    .history
                    .last()
                    .cloned()
                    .ok_or_else(|| Error::InvalidConfig("ablation needs at least one epoch".into()))?;
                Ok(AblationRow {
                    value: value.clone(),
                    seed: *seed,
                    last,
                })
            })
            .collect()
    };
    let rows = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let means = rows
        .chunks(seeds.len())
        .map(|group| {
            let n = group.len() as f64;
            let avg = |f: fn(&EpochMetrics) -> f64| group.iter().map(|r| f(&r.last)).sum::<f64>() / n;
            AblationMean {
                value: group[0].value.clone(),
                miou: avg(|m| m.miou),
                pl_acc_conf: mean_opt(group.iter().map(|r| r.last.pl_acc_conf())),
                pl_acc_weighted: mean_opt(group.iter().map(|r| r.last.pl_acc_weighted())),
                reliable_acc: mean_opt(group.iter().map(|r| r.last.reliable_acc())),
                loss_sup: avg(|m| m.loss.sup),
                loss_unsup: avg(|m| m.loss.unsup),
                loss_total: avg(|m| m.loss.total),
            }
        })
        .collect();
    Ok(AblationTable { axis, rows, means })
}
