//! `emofuse` subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use emofuse_core::checks::{composite_suite, op_suite};
use emofuse_core::eeg::{clean, ArtifactCriteria, CleanOptions, IcaOptions, Removal};
use emofuse_core::synth::{gen_dataset, Dataset};
use emofuse_core::train::{evaluate, stratified_split, train, RunConfig};
use serde::Serialize;

use crate::checkpoint::load_checkpoint;
use crate::config::{write_config, RunArgs};
use crate::dataset::write_dataset;
use crate::error::{Error, Result};
use crate::formats::{read_recording, write_json, write_recording};
use crate::rundir::{self, create_dir, EpochTable};
use crate::runs::{ablate, sweep_n, AblationTable, SweepTable, SWEEP_SIZES};

/// Largest relative gradient error the `gradcheck` command accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "emofuse", version, about = "Multimodal EEG + facial-frame emotion classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and export recordings, frames and labels.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bandpass a recording and optionally strip artifact components.
    Preprocess(PreprocessArgs),
    /// Train one configuration and write a run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on regenerated data.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Generate the data from this seed instead of the training one.
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fusion variants and stage combinations on shared data and seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// One run per compressed visual token count.
    SweepN {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated token counts.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 10)]
        instances: u64,
        #[arg(long, default_value_t = 8)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// The held-out trials of the training split.
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RemoveSpec {
    Auto,
    Indices(Vec<usize>),
}

fn parse_remove(s: &str) -> std::result::Result<RemoveSpec, String> {
    if s == "auto" {
        return Ok(RemoveSpec::Auto);
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(RemoveSpec::Indices)
}

#[derive(Debug, clap::Args)]
pub struct PreprocessArgs {
    /// Recording manifest.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Lower passband edge, Hz.
    #[arg(long, default_value_t = 1.0)]
    pub lo: f64,
    /// Upper passband edge, Hz.
    #[arg(long, default_value_t = 50.0)]
    pub hi: f64,
    /// Decompose with FastICA after filtering.
    #[arg(long)]
    pub ica: bool,
    /// Components to estimate (default: one per channel).
    #[arg(long)]
    pub components: Option<usize>,
    /// `auto` or comma-separated component indices.
    #[arg(long, value_parser = parse_remove)]
    pub remove: Option<RemoveSpec>,
    /// Excess-kurtosis threshold for `--remove auto`.
    #[arg(long)]
    pub kurtosis: Option<f64>,
    /// Reference recording (e.g. EOG) for `--remove auto`.
    #[arg(long, value_name = "FILE")]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { run, out } => gen_data(&run.resolve()?, &out),
        Command::Preprocess(args) => preprocess(&args),
        Command::Train { run, out } => train_run(&run.resolve()?, &out),
        Command::Eval {
            checkpoint,
            split,
            data_seed,
            out,
        } => eval(&checkpoint, split, data_seed, out.as_deref()),
        Command::Ablate { run, out } => ablate_run(&run.resolve()?, &out),
        Command::SweepN { run, sizes, out } => {
            let sizes = sizes.unwrap_or_else(|| SWEEP_SIZES.to_vec());
            sweep_run(&run.resolve()?, &sizes, &out)
        }
        Command::Gradcheck { instances, seed } => gradcheck(instances, seed),
    }
}

fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    Ok(gen_dataset(&cfg.data, cfg.model.scheme, cfg.seeds.data)?)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset_for(cfg)?;
    create_dir(out)?;
    write_config(&out.join(rundir::CONFIG), cfg)?;
    write_dataset(out, &ds)?;
    let counts = ds.class_counts();
    println!("{} trials, {} subjects, class counts {counts:?}", ds.trials.len(), ds.recordings.len());
    Ok(())
}

#[derive(Serialize)]
struct PreprocessReport {
    lo: f64,
    hi: f64,
    components: Option<usize>,
    converged: Option<bool>,
    iterations: Option<usize>,
    kurtosis: Vec<f64>,
    removed: Vec<usize>,
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    if a.remove.is_some() && !a.ica {
        return Err(Error::Usage("--remove needs --ica".into()));
    }
    if (a.kurtosis.is_some() || a.reference.is_some()) && a.remove != Some(RemoveSpec::Auto) {
        return Err(Error::Usage("--kurtosis and --reference only apply to --remove auto".into()));
    }
    let rec = read_recording(&a.input)?;
    let refs = match &a.reference {
        Some(p) => Some(read_recording(p)?.data),
        None => None,
    };
    let mut criteria = ArtifactCriteria::default();
    if let Some(k) = a.kurtosis {
        criteria.kurtosis = k;
    }
    let opts = CleanOptions {
        band: Some((a.lo, a.hi)),
        ica: a
            .ica
            .then(|| IcaOptions::new(a.components.unwrap_or(rec.channels()), a.seed)),
        removal: a.remove.as_ref().map(|r| match r {
            RemoveSpec::Auto => Removal::Auto(criteria),
            RemoveSpec::Indices(i) => Removal::Indices(i.clone()),
        }),
    };
    let out = clean(&rec, &opts, refs.as_ref())?;
    create_dir(&a.out)?;
    write_recording(&a.out.join("clean.json"), &out.recording)?;
    let dec = out.decomposition.as_ref();
    write_json(
        &a.out.join("report.json"),
        &PreprocessReport {
            lo: a.lo,
            hi: a.hi,
            components: dec.map(|d| d.n_components()),
            converged: dec.map(|d| d.converged),
            iterations: dec.map(|d| d.iterations),
            kurtosis: dec.map_or_else(Vec::new, |d| {
                (0..d.n_components())
                    .map(|k| emofuse_core::eeg::excess_kurtosis(d.sources.row(k)))
                    .collect()
            }),
            removed: out.removed.clone(),
        },
    )?;
    println!("removed components {:?}", out.removed);
    Ok(())
}

fn train_run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset_for(cfg)?;
    create_dir(out)?;
    write_config(&out.join(rundir::CONFIG), cfg)?;
    let mut log = EpochTable::create(&out.join(rundir::EPOCHS))?;
    let mut log_err = None;
    let t0 = Instant::now();
    let outcome = train(cfg, &ds, &mut |e| {
        eprintln!("epoch {:>3}  lr {:.2e}  loss {:.4}  train acc {:.3}", e.epoch, e.lr, e.loss, e.train_accuracy);
        if let Err(err) = log.push(e) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(err);
    }
    let secs = t0.elapsed().as_secs_f64();
    rundir::write_run(out, &outcome.config, &outcome.store, &outcome.report, secs)?;
    let r = &outcome.report;
    println!(
        "accuracy {:.4}  macro-F1 {:.4}  selection precision {}  ({secs:.1} s)",
        r.accuracy,
        r.macro_f1,
        r.selection_precision.map_or("n/a".into(), |p| format!("{p:.4}"))
    );
    Ok(())
}

fn eval(dir: &Path, split: Split, data_seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(dir)?;
    let mut cfg = ck.config;
    if let Some(s) = data_seed {
        cfg.seeds.data = s;
    }
    let ds = dataset_for(&cfg)?;
    let idx: Vec<usize> = match split {
        Split::All => (0..ds.trials.len()).collect(),
        Split::Test => {
            let n = cfg.model.n_classes();
            stratified_split(&ds.labels(), n, cfg.train.test_fraction, cfg.seeds.shuffle).1
        }
    };
    let ev = evaluate(&ck.model, &ck.store, &ds, &idx, cfg.train.batch_size)?;
    let (acc, f1) = (ev.confusion.accuracy(), ev.confusion.macro_f1());
    println!(
        "{} trials  accuracy {acc:.4}  macro-F1 {f1:.4}  selection precision {}",
        idx.len(),
        ev.selection_precision.map_or("n/a".into(), |p| format!("{p:.4}"))
    );
    if let Some(out) = out {
        create_dir(out)?;
        rundir::write_metrics(&out.join(rundir::METRICS), acc, f1, ev.selection_precision, &[])?;
        rundir::write_confusion(&out.join(rundir::CONFUSION), &ev.confusion, cfg.model.scheme)?;
    }
    Ok(())
}

/// Table rows that fail to write are reported once the runs finish.
fn ablate_run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset_for(cfg)?;
    create_dir(out)?;
    write_config(&out.join(rundir::CONFIG), cfg)?;
    let mut table = AblationTable::create(&out.join("ablation.tsv"))?;
    let mut write_err = None;
    let rows = ablate(cfg, &ds, &mut |row| {
        match &row.result {
            Ok(s) => eprintln!("{:<12} {:<10} accuracy {:.4}", row.fusion.name(), row.ablation.label(), s.accuracy),
            Err(e) => eprintln!("{:<12} {:<10} failed: {e}", row.fusion.name(), row.ablation.label()),
        }
        if let Err(e) = table.push(row) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        return Err(Error::Failed(format!("{failed} of {} runs failed", rows.len())));
    }
    Ok(())
}

fn sweep_run(cfg: &RunConfig, sizes: &[usize], out: &Path) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Usage("--sizes is empty".into()));
    }
    let ds = dataset_for(cfg)?;
    create_dir(out)?;
    write_config(&out.join(rundir::CONFIG), cfg)?;
    let mut table = SweepTable::create(&out.join("sweep.tsv"))?;
    let mut write_err = None;
    let rows = sweep_n(cfg, &ds, sizes, &mut |row| {
        match &row.result {
            Ok(s) => eprintln!("N {:>4}  accuracy {:.4}  macro-F1 {:.4}  {:.1} s", row.n, s.accuracy, s.macro_f1, s.runtime_s),
            Err(e) => eprintln!("N {:>4}  failed: {e}", row.n),
        }
        if let Err(e) = table.push(row) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        return Err(Error::Failed(format!("{failed} of {} sizes failed", rows.len())));
    }
    Ok(())
}

fn gradcheck(instances: u64, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    let mut cases = op_suite(instances)?;
    cases.extend(composite_suite(seed)?);
    let mut worst: f64 = 0.0;
    for c in &cases {
        println!("{:<18} {:.3e}  ({} entries)", c.name, c.max_rel_err, c.entries);
        worst = worst.max(c.max_rel_err);
    }
    println!("{} cases, worst {worst:.3e}, {:.1} s", cases.len(), t0.elapsed().as_secs_f64());
    if worst >= GRADCHECK_TOLERANCE {
        return Err(Error::Failed(format!("relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(())
}
