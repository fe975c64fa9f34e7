mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;

use pseudoweight_core::maskgeom::{boxes_from_mask, write_boxes_csv};
use pseudoweight_core::metrics::{prototype_stability_report, ConfusionMatrix};
use pseudoweight_core::ranksim::Similarity;
use pseudoweight_core::synthdata::{generate, load_dataset, partition, save_dataset, StoredDataset, MANIFEST_FILE};
use pseudoweight_core::trainer::ablate::{ablate, Axis};
use pseudoweight_core::trainer::checkpoint::{encode, load_checkpoint};
use pseudoweight_core::trainer::{metrics_csv, selection_csv, TrainData, TrainState};

use config::RunConfig;

const THREADS_ENV: &str = "PSEUDOWEIGHT_THREADS";

#[derive(Parser)]
#[command(
    name = "pseudoweight",
    version,
    about = "Prototype-weighted pseudo-label training on synthetic segmentation data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its labeled/unlabeled partition.
    GenData {
        /// Config file; only the dataset keys, labeled_fraction and partition_seed are used.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write mask-derived boxes for one split as CSV (leading `image` column).
    GenBoxes {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "labeled")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train teacher and student; writes a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only labeled pixels enter the prototype bank.
        #[arg(long)]
        disable_rppi: bool,
        /// Every pseudo-label weight is 1.
        #[arg(long)]
        disable_ppw: bool,
        #[arg(long, value_parser = ["rank", "cosine"])]
        similarity: Option<String>,
    },
    /// Per-class IoU and mIoU of a checkpoint's teacher.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one hyperparameter over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One of k, alpha, bbox_conf, bank_capacity, similarity.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Write via a temporary sibling and rename, so a failed command never
/// leaves a partial artifact under the requested name.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = parent_dir(path)?;
    let name = path
        .file_name()
        .ok_or_else(|| anyhow!("{}: not a file path", path.display()))?;
    let tmp = parent.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

fn parent_dir(path: &Path) -> Result<PathBuf> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if !parent.is_dir() {
        bail!("output directory {} does not exist", parent.display());
    }
    Ok(parent)
}

fn timestamp() -> String {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:03}", t.as_secs(), t.subsec_millis())
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| anyhow!("bad {what} '{}': {e}", s.trim()))
        })
        .collect()
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => bail!("{THREADS_ENV} must be a positive integer, got '{v}'"),
        },
        Err(_) => Ok(None),
    }
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let run = RunConfig::load(spec)?;
    let parent = parent_dir(out)?;
    let dataset = generate(&run.data)?;
    let split = partition(&dataset.train, run.labeled_fraction, run.partition_seed)?;
    let stored = StoredDataset {
        dataset,
        partition: split,
        partition_fraction: run.labeled_fraction,
        partition_seed: run.partition_seed,
    };

    // build next to the target, then swap in
    let name = out
        .file_name()
        .ok_or_else(|| anyhow!("{}: not a directory path", out.display()))?;
    let tmp = parent.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).with_context(|| format!("removing {}", tmp.display()))?;
    }
    if let Err(e) = save_dataset(&tmp, &stored) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e.into());
    }
    if out.exists() {
        let replaceable =
            out.join(MANIFEST_FILE).is_file() || fs::read_dir(out).map(|mut d| d.next().is_none()).unwrap_or(false);
        if !replaceable {
            let _ = fs::remove_dir_all(&tmp);
            bail!("{} exists and is not a dataset directory", out.display());
        }
        fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))?;
    }
    fs::rename(&tmp, out).with_context(|| format!("moving dataset into {}", out.display()))?;

    let spec = &stored.dataset.spec;
    let mut counts = vec![0u64; spec.num_classes];
    for s in &stored.dataset.train {
        for &v in s.mask.as_slice() {
            if let Some(c) = counts.get_mut(v as usize) {
                *c += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    println!(
        "{} training images ({} labeled, {} unlabeled), {} validation, {}x{}x{}, {} classes",
        stored.dataset.train.len(),
        stored.partition.labeled.len(),
        stored.partition.unlabeled.len(),
        stored.dataset.val.len(),
        spec.height,
        spec.width,
        spec.channels,
        spec.num_classes
    );
    for (c, n) in counts.iter().enumerate() {
        println!(
            "  class {c}: {:.2}% of training pixels",
            100.0 * *n as f64 / total.max(1) as f64
        );
    }
    Ok(())
}

fn gen_boxes(data: &Path, split: &str, out: &Path) -> Result<()> {
    let stored = load_dataset(data)?;
    let samples = stored.split(split)?;
    let mut csv = Vec::new();
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut one = Vec::new();
        write_boxes_csv(&mut one, &boxes_from_mask(&s.mask, &[0]))?;
        let text = String::from_utf8(one).expect("csv is utf-8");
        let mut lines = text.lines();
        let header = lines.next().expect("header line");
        if i == 0 {
            csv = format!("image,{header}\n").into_bytes();
        }
        rows.extend(lines.map(|l| format!("{i},{l}\n")));
    }
    if csv.is_empty() {
        let mut one = Vec::new();
        write_boxes_csv(&mut one, &[])?;
        csv = format!("image,{}", String::from_utf8(one).expect("csv is utf-8")).into_bytes();
    }
    for r in &rows {
        csv.extend_from_slice(r.as_bytes());
    }
    write_atomic(out, &csv)?;
    println!("{} boxes over {} {split} images", rows.len(), samples.len());
    Ok(())
}

struct TrainArgs<'a> {
    config: &'a Path,
    data: &'a Path,
    out: &'a Path,
    disable_rppi: bool,
    disable_ppw: bool,
    similarity: Option<&'a str>,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut run = RunConfig::load(a.config)?;
    if a.disable_rppi {
        run.train.use_rppi = false;
    }
    if a.disable_ppw {
        run.train.use_ppw = false;
    }
    if let Some(s) = a.similarity {
        run.train.similarity = s.parse::<Similarity>()?;
    }
    run.validate()?;
    let stored = load_dataset(a.data)?;
    let data = TrainData::from_stored(&stored);

    parent_dir(a.out)?;
    fs::create_dir_all(a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut log = format!("started {}\ndata {}\n", timestamp(), a.data.display());
    if stored.dataset.spec != run.data {
        log.push_str("note: dataset keys in the config differ from the dataset manifest; the manifest was used\n");
    }
    write_atomic(&a.out.join("config.txt"), run.to_text().as_bytes())?;

    let mut state = TrainState::new(run.train.clone(), &data)?;
    for _ in 0..run.train.epochs {
        let m = state.run_epoch(&data)?;
        let line = format!(
            "epoch {:>3}  miou {:.4}  pl_acc_conf {}  loss {:.4}",
            m.epoch,
            m.miou,
            m.pl_acc_conf().map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            m.loss.total
        );
        eprintln!("{line}");
        let _ = writeln!(log, "{line}");
    }

    write_atomic(&a.out.join("metrics.csv"), metrics_csv(&state.history).as_bytes())?;
    write_atomic(&a.out.join("selection.csv"), selection_csv(&state.history).as_bytes())?;
    write_atomic(
        &a.out.join("stability.csv"),
        prototype_stability_report(&state.feature_history, run.train.k).as_bytes(),
    )?;
    write_atomic(&a.out.join("checkpoint.bin"), &encode(&state)?)?;
    let _ = writeln!(log, "finished {}", timestamp());
    write_atomic(&a.out.join("run.log"), log.as_bytes())?;
    if let Some(m) = state.history.last() {
        println!("final miou {:.4}", m.miou);
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: &str, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let stored = load_dataset(data)?;
    let spec = &stored.dataset.spec;
    if ckpt.header.num_classes != spec.num_classes {
        bail!(
            "checkpoint has {} classes but the dataset has {}",
            ckpt.header.num_classes,
            spec.num_classes
        );
    }
    if ckpt.teacher.config().channels != spec.channels {
        bail!(
            "checkpoint expects {} channels but the dataset has {}",
            ckpt.teacher.config().channels,
            spec.channels
        );
    }
    let samples = stored.split(split)?;
    let parts = samples
        .par_iter()
        .map(|s| {
            let (pred, _) = ckpt.teacher.predict(&s.image)?;
            let mut cm = ConfusionMatrix::new(spec.num_classes);
            cm.add(&pred, &s.mask);
            Ok(cm)
        })
        .collect::<pseudoweight_core::Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(spec.num_classes);
    for p in &parts {
        cm.merge(p);
    }
    let report = cm.miou();
    let mut csv = String::from("class_id,iou\n");
    for (c, iou) in report.per_class.iter().enumerate() {
        let _ = writeln!(csv, "{c},{}", iou.map(|v| v.to_string()).unwrap_or_default());
    }
    let _ = writeln!(csv, "mean,{}", report.mean);
    write_atomic(out, csv.as_bytes())?;
    println!("miou {:.4} on {} {split} images", report.mean, samples.len());
    Ok(())
}

fn run_ablate(config: &Path, data: &Path, axis: &str, values: &str, seeds: &str, out: &Path) -> Result<()> {
    let axis: Axis = axis.parse()?;
    let run = RunConfig::load(config)?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    let seeds: Vec<u64> = parse_list("seed", seeds)?;
    for v in &values {
        axis.apply(&run.train, v)?;
    }
    parent_dir(out)?;
    let threads = threads_from_env()?;
    let stored = load_dataset(data)?;
    let table = ablate(
        &run.train,
        &TrainData::from_stored(&stored),
        axis,
        &values,
        &seeds,
        threads,
    )?;
    write_atomic(out, table.to_csv().as_bytes())?;
    for m in &table.means {
        println!("{axis}={}: miou {:.4}", m.value, m.miou);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::GenBoxes { data, split, out } => gen_boxes(&data, &split, &out),
        Command::Train {
            config,
            data,
            out,
            disable_rppi,
            disable_ppw,
            similarity,
        } => run_train(TrainArgs {
            config: &config,
            data: &data,
            out: &out,
            disable_rppi,
            disable_ppw,
            similarity: similarity.as_deref(),
        }),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => eval(&checkpoint, &data, &split, &out),
        Command::Ablate {
            config,
            data,
            axis,
            values,
            seeds,
            out,
        } => run_ablate(&config, &data, &axis, &values, &seeds, &out),
    }
}

fn main() -> ExitCode {
    let help = config::defaults_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    for name in ["gen-data", "train", "ablate"] {
        cmd = cmd.mut_subcommand(name, |s| s.after_long_help(help.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
