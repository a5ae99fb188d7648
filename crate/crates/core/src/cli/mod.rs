//! Experiment runner: `run <config>` executes every sweep point and writes
//! metrics, cost reports and checkpoints; `report <dir>` tabulates
//! summaries.
//!
//! Layout of a run:
//!
//! ```text
//! <output_dir>/<config hash>/config.txt
//! <output_dir>/<config hash>/summary.csv
//! <output_dir>/<config hash>/<run name>/{hyperparams.txt, metrics.csv,
//!     cost_report.txt, model.bin, state_fc1.bin, …}
//! ```

mod config;
mod summary;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::data::{gaussian_blobs, load_cifar10_dir, load_idx, mix_seed, Dataset};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::train::{
    cost_model_for_blocks, epochs_to_converge, metrics_csv, train, Hyperparams, Method, TrainOutcome,
};

pub use config::{run_name, DataSource, RunConfig, RunSpec};
pub use summary::{clean_status, parse_summary, report_table, summary_csv, SummaryRow, SUMMARY_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Caps the number of concurrent runs.
pub const THREADS_ENV: &str = "LOWRANK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "lowrank", version, about = "Streaming low-rank gradient training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute every run of a config file and write artifacts.
    Run {
        /// Path to a key = value config with an optional [sweep] section.
        config: PathBuf,
    },
    /// Print a comparison table of the summaries under a directory.
    Report { dir: PathBuf },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run { config } => RunConfig::load(&config).and_then(|c| {
            let outcome = run(&c)?;
            print!("{}", report_table(&outcome.rows));
            println!("{}", outcome.dir.display());
            if outcome.rows.iter().all(SummaryRow::ok) {
                Ok(())
            } else {
                Err(Error::Data("one or more runs failed; see summary.csv".into()))
            }
        }),
        Command::Report { dir } => report(&dir).map(|table| print!("{table}")),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// Train and test sets described by a config, after limits and optional
/// standardization.
pub fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (mut train_set, mut test_set) = match &config.data {
        DataSource::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
        DataSource::Cifar10 { dir } => load_cifar10_dir(dir)?,
        &DataSource::Blobs {
            train,
            test,
            dims,
            classes,
            seed,
        } => (
            gaussian_blobs(train, dims, classes, seed, mix_seed(seed, 1))?,
            gaussian_blobs(test, dims, classes, seed, mix_seed(seed, 2))?,
        ),
    };
    if let Some(n) = config.train_limit {
        train_set = train_set.take(n);
    }
    if let Some(n) = config.test_limit {
        test_set = test_set.take(n);
    }
    if config.standardize {
        let stats = train_set.channel_stats();
        train_set.standardize(&stats);
        test_set.standardize(&stats);
    }
    Ok((train_set, test_set))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// `<output_dir>/<config hash>`
    pub dir: PathBuf,
    pub rows: Vec<SummaryRow>,
}

fn pool_width(requested: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut width = if requested == 0 { available } else { requested };
    if let Some(cap) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if cap > 0 {
            width = width.min(cap);
        }
    }
    width.max(1)
}

/// Runs every sweep point. Individual run failures are recorded in the
/// summary rather than returned; errors here are configuration, data or
/// output-directory problems.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let runs = config.runs()?;
    // architecture errors are configuration errors, caught before any I/O
    let probe = Network::preset(&config.architecture, config.base.dropout, 0)?;
    for spec in &runs {
        spec.hyperparams.validate(&probe)?;
    }
    let (train_set, test_set) = load_data(config)?;

    let dir = config.output_dir.join(config.hash());
    let canonical = config.canonical();
    let config_path = dir.join("config.txt");
    if let Ok(existing) = fs::read_to_string(&config_path) {
        if existing != canonical {
            return Err(Error::Data(format!(
                "{} holds a different config; refusing to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(&dir)?;
    fs::write(&config_path, &canonical)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(pool_width(config.workers))
        .build()
        .map_err(|e| Error::Data(format!("thread pool: {e}")))?;
    let rows: Vec<SummaryRow> = pool.install(|| {
        runs.par_iter()
            .map(|spec| execute(config, spec, &train_set, &test_set, &dir))
            .collect()
    });
    fs::write(dir.join("summary.csv"), summary_csv(&rows))?;
    Ok(RunOutcome { dir, rows })
}

fn execute(config: &RunConfig, spec: &RunSpec, train_set: &Dataset, test_set: &Dataset, root: &Path) -> SummaryRow {
    let hp = &spec.hyperparams;
    let probe = Network::preset(&config.architecture, hp.dropout, hp.seed);
    let shapes = probe.as_ref().map(Network::dense_shapes).unwrap_or_default();
    let b = hp.batch_size as u64;
    let mbgd_aux: u64 = shapes.iter().map(|&(m, n)| b * (m + n) as u64).sum();
    let aux = probe.as_ref().map_or(0, |net| hp.peak_aux_floats(net));
    let streaming = hp.method != Method::Mbgd;
    let mut row = SummaryRow {
        run: spec.name.clone(),
        variant: hp.method,
        rank: streaming.then_some(hp.rank),
        batch_size: hp.batch_size,
        block_size: (hp.method == Method::Sbpca).then(|| hp.block_size()),
        alpha_fc: hp.alpha_fc,
        seed: hp.seed,
        status: "ok".into(),
        epochs: hp.epochs,
        final_accuracy: None,
        best_accuracy: None,
        etc: None,
        aux_floats: aux,
        mbgd_aux_floats: mbgd_aux,
        memory_ratio: if mbgd_aux == 0 { 0.0 } else { aux as f64 / mbgd_aux as f64 },
        update_flops_per_batch: None,
        mbgd_flops_per_batch: shapes.iter().map(|&(m, n)| 2 * b * (m * n) as u64).sum(),
    };
    let result = probe.and_then(|net| {
        let dir = root.join(&spec.name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("hyperparams.txt"), hyperparams_text(hp))?;
        let outcome = train(&net, train_set, test_set, hp)?;
        write_artifacts(&dir, spec, &outcome, train_set.len())?;
        Ok(outcome)
    });
    match result {
        Ok(outcome) => {
            let accuracy: Vec<f64> = outcome.metrics.iter().map(|r| r.test_accuracy).collect();
            row.final_accuracy = accuracy.last().copied();
            row.best_accuracy = accuracy.iter().copied().reduce(f64::max);
            row.etc = (!accuracy.is_empty()).then(|| epochs_to_converge(&accuracy));
            let batches = (train_set.len() / hp.samples_per_batch().max(1) * hp.epochs) as u64;
            row.update_flops_per_batch = (batches > 0).then(|| outcome.ledger.modelled_update_flops() / batches);
        }
        Err(e) => row.status = format!("failed: {e}"),
    }
    row
}

fn hyperparams_text(hp: &Hyperparams) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "variant = {}", hp.method);
    let _ = writeln!(out, "batch_size = {}", hp.batch_size);
    let _ = writeln!(out, "samples_per_batch = {}", hp.samples_per_batch());
    if hp.method == Method::Sbpca {
        let _ = writeln!(out, "block_size = {}", hp.block_size());
    }
    if hp.method != Method::Mbgd {
        let _ = writeln!(out, "rank = {}", hp.rank);
        let _ = writeln!(out, "sigma_floor = {:?}", hp.sigma_floor);
    }
    let _ = writeln!(out, "alpha_fc = {:?}", hp.alpha_fc);
    let _ = writeln!(out, "alpha_conv = {:?}", hp.alpha_conv);
    let _ = writeln!(out, "epochs = {}", hp.epochs);
    let _ = writeln!(out, "dropout = {}", hp.dropout);
    let _ = writeln!(out, "seed = {}", hp.seed);
    let _ = writeln!(out, "tracking_every = {}", hp.tracking_every);
    out
}

fn write_artifacts(dir: &Path, spec: &RunSpec, outcome: &TrainOutcome, train_len: usize) -> Result<()> {
    let shapes = outcome.net.dense_shapes();
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.metrics, shapes.len()))?;
    fs::write(dir.join("cost_report.txt"), cost_report(spec, outcome, train_len)?)?;
    outcome.net.save(dir.join("model.bin"))?;
    for (j, state) in outcome.states.iter().enumerate() {
        state.save(dir.join(format!("state_fc{}.bin", j + 1)))?;
    }
    Ok(())
}

/// Closed-form per-layer costs next to the counted ledger.
pub fn cost_report(spec: &RunSpec, outcome: &TrainOutcome, train_len: usize) -> Result<String> {
    let hp = &spec.hyperparams;
    let per_batch = hp.samples_per_batch();
    let batches = (train_len / per_batch.max(1) * hp.epochs) as u64;
    let mut out = String::new();
    let _ = writeln!(out, "run {}", spec.name);
    let _ = writeln!(out, "variant {}", hp.method);
    let _ = writeln!(out, "samples_per_batch {per_batch}");
    let _ = writeln!(out, "batches {batches}");
    let blocks = hp.block_sizes()?.len();
    for (j, &(m, n)) in outcome.net.dense_shapes().iter().enumerate() {
        let _ = writeln!(out, "\nlayer fc{} {m}x{n}", j + 1);
        let _ = writeln!(out, "  mbgd_flops_per_batch {}", 2 * (per_batch * m * n) as u64);
        let _ = writeln!(out, "  mbgd_aux_floats {}", (per_batch * (m + n)) as u64);
        let _ = writeln!(out, "  mbgd_gradient_floats {}", (m * n) as u64);
        if hp.method == Method::Mbgd || hp.rank == 0 {
            continue;
        }
        let c = cost_model_for_blocks(m, n, per_batch, blocks, hp.rank)?;
        let _ = writeln!(out, "  blocks_per_batch {}", c.blocks);
        let _ = writeln!(out, "  sbpca_stream_flops {}", c.sbpca_stream_flops);
        let _ = writeln!(out, "  sbpca_qr_flops {}", c.sbpca_qr_flops);
        let _ = writeln!(out, "  sbpca_recompose_flops {}", c.sbpca_recompose_flops);
        let _ = writeln!(out, "  sbpca_flops {}", c.sbpca_flops);
        let _ = writeln!(out, "  state_floats {}", c.state_floats);
        let _ = writeln!(out, "  update_floats {}", c.update_floats);
        let _ = writeln!(out, "  qr_workspace_floats {}", c.qr_workspace_floats);
        let _ = writeln!(out, "  flop_ratio {:?}", c.ratios.flops);
        let _ = writeln!(out, "  flop_ratio_limit {:?}", c.ratios.flops_limit);
        let _ = writeln!(out, "  memory_ratio_streamed {:?}", c.ratios.memory_streamed);
        let _ = writeln!(out, "  memory_ratio_expanded {:?}", c.ratios.memory_expanded);
        if let Some(state) = outcome.states.get(j) {
            let sigma: Vec<String> = state.ranked_sigma().iter().map(|(s, _)| format!("{s:?}")).collect();
            let _ = writeln!(out, "  sigma {}", sigma.join(" "));
        }
    }
    let ledger = &outcome.ledger;
    let _ = writeln!(out, "\ncounted flops");
    for (name, value) in ledger.categories() {
        let _ = writeln!(out, "  {name} {value}");
    }
    let _ = writeln!(out, "  total {}", ledger.total());
    let _ = writeln!(out, "  modelled_update {}", ledger.modelled_update_flops());
    let _ = writeln!(out, "peak_aux_floats {}", ledger.peak_aux_floats);
    if hp.method != Method::Mbgd && hp.rank > 0 {
        let t = &outcome.trace;
        let _ = writeln!(out, "\nupdate trace");
        let _ = writeln!(out, "  blocks {}", t.blocks);
        let _ = writeln!(out, "  sigma_sign_flips {}", t.sigma_sign_flips);
        let _ = writeln!(out, "  degenerate_qr {}", t.degenerate_qr);
        if hp.check_orthonormality {
            let _ = writeln!(out, "  max_orthonormality_error {:?}", t.max_orthonormality_error);
            let _ = writeln!(out, "  orthonormality_violations {}", t.orthonormality_violations);
        }
    }
    Ok(out)
}

fn summaries_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let direct = dir.join("summary.csv");
    if direct.is_file() {
        return Ok(vec![direct]);
    }
    let mut found = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let candidate = entry?.path().join("summary.csv");
            if candidate.is_file() {
                found.push(candidate);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Comparison table for `dir/summary.csv`, or for every
/// `dir/*/summary.csv`.
pub fn report(dir: &Path) -> Result<String> {
    let files = summaries_under(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no runs found in {}", dir.display())));
    }
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for file in &files {
        match fs::read_to_string(file).map_err(|e| e.to_string()).and_then(|t| parse_summary(&t)) {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => bad.push(format!("{}: {e}", file.display())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Data(format!("corrupt summaries:\n  {}", bad.join("\n  "))));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("no runs found in {}", dir.display())));
    }
    Ok(report_table(&rows))
}
