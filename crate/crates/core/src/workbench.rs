//! Command-line workbench: data generation, training, evaluation, ablation
//! grids, sweeps, analysis reports and the gradient suite.
//!
//! Every command that takes `--out` creates a fresh run directory holding the
//! resolved `config.txt` and a `metrics.csv`. Existing directories are never
//! overwritten.

use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{generate, quantize, read_dataset, split, write_dataset, PairRecord, Split};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{alignment_report, evaluate, radius_dynamics_report, AlignmentReport, RadiusReport, RetrievalMetrics};
use crate::model::{ModelParameters, ParamName};
use crate::objectives::{gradcheck, gradcheck_instance, GradcheckReport, Objective, GRADCHECK_STEP};
use crate::text_mass::RadiusVariant;
use crate::trainer::{TrainLog, TrainState, Trainer};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.tmck";
pub const STEPS_FILE: &str = "train_steps.csv";
pub const EPOCHS_FILE: &str = "train_epochs.csv";
pub const ABLATION_LOG_FILE: &str = "ablation_log.csv";
pub const RADIUS_FILE: &str = "radius_report.csv";
pub const ALIGNMENT_FILE: &str = "alignment_report.csv";
pub const OBSERVATIONS_FILE: &str = "observations.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

pub const RUN_METRICS_HEADER: &str = "config,seed,direction,r1,r5,r10,mdr,mnr";
pub const ABLATION_LOG_HEADER: &str = "config,seed,mode,text_mass,radius_params";
pub const GRADCHECK_HEADER: &str =
    "seed,radius,mode,alpha,checked,failures,max_relative_error,max_absolute_error";

/// Inference settings of the trials sweep; `None` scores with `t` itself.
pub const TRIAL_GRID: [Option<usize>; 4] = [None, Some(5), Some(10), Some(20)];
pub const ALPHA_GRID: [f64; 5] = [0.5, 0.8, 1.0, 1.2, 1.5];

/// Batch size, dimension, concepts and frames of the gradient suite.
pub const GRADCHECK_SHAPE: (usize, usize, usize, usize) = (4, 16, 8, 4);

#[derive(Parser, Debug)]
#[command(name = "tmass", version, about = "Stochastic text-mass retrieval workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into the run directory.
    GenData(Options),
    /// Train one model and evaluate it on the test split.
    Train(Options),
    /// Evaluate a checkpoint on the test split.
    Eval(Options),
    /// Baseline against the three radius variants.
    AblateRadius(Options),
    /// Baseline against the loss combinations.
    AblateLoss(Options),
    /// Inference without sampling and with 5, 10 and 20 trials.
    SweepTrials(Options),
    /// Support-loss weight sweep.
    SweepAlpha(Options),
    /// Radius-dynamics and alignment reports.
    Analyze(Options),
    /// Analytic against finite-difference gradients.
    Gradcheck(Options),
}

#[derive(Args, Debug, Clone, Default)]
struct Options {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; also replaces the seed list of grid commands.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
    /// t-mass, baseline or ablation-ce-plus-s.
    #[arg(long)]
    mode: Option<String>,
    /// Best-of-M inference trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Support-loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// fixed-mean, scalar or linear.
    #[arg(long)]
    radius: Option<String>,
    /// Dataset directory written by gen-data; generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate, analyze or resume.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Stop training after this many completed epochs.
    #[arg(long)]
    stop_after: Option<usize>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on usage or contract errors, 2 on I/O
/// and file-format errors.
pub fn cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(parsed.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(o) => gen_data(&o),
        Command::Train(o) => train_command(&o),
        Command::Eval(o) => eval_command(&o),
        Command::AblateRadius(o) => grid_command(&o, radius_cells),
        Command::AblateLoss(o) => grid_command(&o, loss_cells),
        Command::SweepTrials(o) => sweep_trials_command(&o),
        Command::SweepAlpha(o) => grid_command(&o, alpha_cells),
        Command::Analyze(o) => analyze_command(&o),
        Command::Gradcheck(o) => gradcheck_command(&o),
    }
}

/// Applies the command-line overrides on top of `cfg`.
fn apply_overrides(cfg: &mut RunConfig, o: &Options) -> Result<()> {
    if let Some(seed) = o.seed {
        cfg.set("seed", &seed.to_string())?;
        cfg.seeds = vec![seed];
    }
    if let Some(mode) = &o.mode {
        cfg.set("mode", mode)?;
    }
    if let Some(trials) = o.trials {
        cfg.set("trials", &trials.to_string())?;
    }
    if let Some(alpha) = o.alpha {
        cfg.set("alpha", &alpha.to_string())?;
    }
    if let Some(radius) = &o.radius {
        cfg.set("radius", radius)?;
    }
    cfg.validate()
}

fn resolve(o: &Options) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, o)?;
    Ok(cfg)
}

/// Checkpoint plus its config. Only overrides that leave the stored model
/// meaningful are accepted.
fn resolve_checkpoint(o: &Options, path: &Path) -> Result<Checkpoint> {
    ensure(o.config.is_none(), || "--config cannot be combined with --checkpoint; the checkpoint carries its config".into())?;
    ensure(
        o.seed.is_none() && o.mode.is_none() && o.alpha.is_none() && o.radius.is_none(),
        || "--seed, --mode, --alpha and --radius would contradict the checkpoint's model".into(),
    )?;
    let mut ck = Checkpoint::load(path)?;
    apply_overrides(&mut ck.config, o)?;
    Ok(ck)
}

fn out_dir(o: &Options) -> Result<&Path> {
    o.out
        .as_deref()
        .ok_or_else(|| Error::contract("this command needs --out <dir>"))
}

fn refuse_existing(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::io(
            dir,
            io::Error::new(io::ErrorKind::AlreadyExists, "run directory already exists"),
        ));
    }
    Ok(())
}

/// Creates `dir`, refusing to reuse an existing path.
pub fn create_run_dir(dir: &Path) -> Result<()> {
    refuse_existing(dir)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Train and test splits, read from `data` or generated from `cfg`.
pub fn load_splits(cfg: &RunConfig, data: Option<&Path>) -> Result<(Vec<PairRecord>, Vec<PairRecord>)> {
    let records = match data {
        Some(dir) => read_dataset(dir)?,
        None => {
            let mut records = generate(&cfg.data)?;
            quantize(&mut records);
            records
        }
    };
    Ok((split(&records, Split::Train), split(&records, Split::Test)))
}

/// One metrics row of a run table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub config: String,
    /// A seed, or `median` for summary rows.
    pub seed: String,
    pub metrics: RetrievalMetrics,
}

pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut out = format!("{RUN_METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.config,
            r.seed,
            r.metrics.direction,
            r.metrics.csv_fields()
        ));
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-column medians of each config's rows, in first-appearance order.
pub fn median_rows(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.config.as_str()) {
            names.push(&r.config);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let group: Vec<&RetrievalMetrics> = rows.iter().filter(|r| r.config == name).map(|r| &r.metrics).collect();
            let col = |f: fn(&RetrievalMetrics) -> f64| median(&mut group.iter().map(|m| f(m)).collect::<Vec<_>>());
            MetricsRow {
                config: name.to_string(),
                seed: "median".into(),
                metrics: RetrievalMetrics {
                    direction: group[0].direction,
                    r1: col(|m| m.r1),
                    r5: col(|m| m.r5),
                    r10: col(|m| m.r10),
                    mdr: col(|m| m.mdr),
                    mnr: col(|m| m.mnr),
                },
            }
        })
        .collect()
}

/// A trained model with its log and test metrics in both directions.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub state: TrainState,
    pub log: TrainLog,
    pub metrics: [RetrievalMetrics; 2],
}

/// Evaluates `params` on `test`, sampling exactly when the model has a text mass.
pub fn evaluate_model(params: &ModelParameters, cfg: &RunConfig, test: &[PairRecord]) -> Result<[RetrievalMetrics; 2]> {
    evaluate(params, test, &cfg.train.sampling(), params.text_mass, cfg.train.seed)
}

pub fn train_and_evaluate(cfg: &RunConfig, train: &[PairRecord], test: &[PairRecord]) -> Result<CellOutcome> {
    let (state, log) = crate::trainer::train(&cfg.train, train, test, cfg.mode)?;
    let metrics = evaluate_model(&state.params, cfg, test)?;
    Ok(CellOutcome { state, log, metrics })
}

/// Trains and evaluates one grid cell on its own data.
pub fn run_cell(cfg: &RunConfig, data: Option<&Path>) -> Result<CellOutcome> {
    let (train, test) = load_splits(cfg, data)?;
    train_and_evaluate(cfg, &train, &test)
}

/// Named grid configurations derived from a base config.
pub type Cells = Vec<(String, RunConfig)>;

fn cell(base: &RunConfig, name: &str, edit: impl FnOnce(&mut RunConfig)) -> (String, RunConfig) {
    let mut cfg = base.clone();
    edit(&mut cfg);
    (name.to_string(), cfg)
}

/// Baseline without a radius, then the fixed-mean, scalar and linear radius.
pub fn radius_cells(base: &RunConfig) -> Cells {
    let mut out = vec![cell(base, "baseline", |c| c.mode = Objective::Baseline)];
    for variant in RadiusVariant::ALL {
        out.push(cell(base, variant.as_str(), |c| {
            c.mode = Objective::TMass;
            c.train.variant = variant;
        }));
    }
    out
}

/// Baseline, `L_ce + L_s`, `L_s` alone and `L_s + α·L_sup`.
pub fn loss_cells(base: &RunConfig) -> Cells {
    vec![
        cell(base, "baseline", |c| c.mode = Objective::Baseline),
        cell(base, "ce-plus-s", |c| c.mode = Objective::CePlusS),
        cell(base, "s-only", |c| {
            c.mode = Objective::TMass;
            c.train.alpha = 0.0;
        }),
        cell(base, "s-plus-sup", |c| c.mode = Objective::TMass),
    ]
}

pub fn alpha_cells(base: &RunConfig) -> Cells {
    ALPHA_GRID
        .iter()
        .map(|&a| {
            cell(base, &format!("alpha={a}"), |c| {
                c.mode = Objective::TMass;
                c.train.alpha = a;
            })
        })
        .collect()
}

/// Grid result: text-to-video rows per config per seed, then medians, plus a
/// log naming each cell's mode and trainable radius parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    pub rows: Vec<MetricsRow>,
    pub log: String,
}

impl GridTable {
    pub fn csv(&self) -> String {
        metrics_table(&self.rows)
    }
}

fn radius_params(params: &ModelParameters) -> String {
    let names: Vec<&str> = params
        .trainable()
        .into_iter()
        .filter(|p| matches!(p, ParamName::RadiusTheta | ParamName::RadiusWeight))
        .map(ParamName::as_str)
        .collect();
    if names.is_empty() {
        "none".into()
    } else {
        names.join(";")
    }
}

/// Trains every (cell, seed) pair, concurrently, and assembles the table in
/// cell-major, seed-minor order.
pub fn run_grid(cells: &[(String, RunConfig)], seeds: &[u64], data: Option<&Path>) -> Result<GridTable> {
    ensure(!seeds.is_empty(), || "a grid needs at least one seed".into())?;
    let jobs: Vec<(&str, RunConfig, u64)> = cells
        .iter()
        .flat_map(|(name, cfg)| seeds.iter().map(move |&s| (name.as_str(), cfg.with_seed(s), s)))
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|(_, cfg, _)| run_cell(cfg, data))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut log = format!("{ABLATION_LOG_HEADER}\n");
    for ((name, cfg, seed), outcome) in jobs.iter().zip(&outcomes) {
        rows.push(MetricsRow {
            config: name.to_string(),
            seed: seed.to_string(),
            metrics: outcome.metrics[0],
        });
        log.push_str(&format!(
            "{name},{seed},{},{},{}\n",
            cfg.mode,
            outcome.state.params.text_mass,
            radius_params(&outcome.state.params)
        ));
    }
    let medians = median_rows(&rows);
    rows.extend(medians);
    Ok(GridTable { rows, log })
}

/// One text-mass model per seed, evaluated without sampling and at each
/// trial count of [`TRIAL_GRID`].
pub fn sweep_trials(cfg: &RunConfig, data: Option<&Path>) -> Result<GridTable> {
    ensure(cfg.mode != Objective::Baseline, || "sweep-trials needs a text-mass mode".into())?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let cfg = cfg.with_seed(seed);
            let (train, test) = load_splits(&cfg, data)?;
            let (state, _) = crate::trainer::train(&cfg.train, &train, &test, cfg.mode)?;
            TRIAL_GRID
                .iter()
                .map(|m| {
                    let sampling = crate::text_mass::SamplingConfig {
                        trials: m.unwrap_or(1),
                        ..cfg.train.sampling()
                    };
                    Ok(evaluate(&state.params, &test, &sampling, m.is_some(), seed)?[0])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (k, m) in TRIAL_GRID.iter().enumerate() {
        let name = m.map_or("off".to_string(), |m| format!("m={m}"));
        for (seed, metrics) in cfg.seeds.iter().zip(&per_seed) {
            rows.push(MetricsRow {
                config: name.clone(),
                seed: seed.to_string(),
                metrics: metrics[k],
            });
        }
    }
    let medians = median_rows(&rows);
    rows.extend(medians);
    let log = format!("{ABLATION_LOG_HEADER}\n")
        + &cfg
            .seeds
            .iter()
            .map(|s| format!("trials,{s},{},true,{}\n", cfg.mode, cfg.train.variant))
            .collect::<String>();
    Ok(GridTable { rows, log })
}

/// Radius dynamics of every test query against every test video.
pub fn full_radius_report(params: &ModelParameters, cfg: &RunConfig, test: &[PairRecord]) -> Result<RadiusReport> {
    let videos: Vec<_> = test.iter().map(|r| r.video.clone()).collect();
    let sampling = cfg.train.sampling();
    let reports = test
        .par_iter()
        .enumerate()
        .map(|(q, r)| radius_dynamics_report(&r.text, &videos, q, params, &sampling, cfg.train.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(RadiusReport {
        rows: reports.into_iter().flat_map(|r| r.rows).collect(),
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Qualitative expectations, logged rather than enforced.
pub fn observations(radius: &RadiusReport, alignment: &AlignmentReport) -> String {
    let mut queries: Vec<u64> = radius.rows.iter().map(|r| r.query_id).collect();
    queries.dedup();
    let smallest = queries.iter().filter(|&&q| radius.relevant_is_smallest(q) == Some(true)).count();
    let rel = mean(radius.rows.iter().filter(|r| r.relevant).map(|r| r.l1_radius));
    let irr = mean(radius.rows.iter().filter(|r| !r.relevant).map(|r| r.l1_radius));
    let rows = &alignment.rows;
    let irr_det = mean(rows.iter().map(|r| r.max_irrelevant_sim_det));
    let irr_stoch = mean(rows.iter().map(|r| r.max_irrelevant_sim_stoch));
    let ce_det = mean(rows.iter().map(|r| r.ce_det));
    let ce_stoch = mean(rows.iter().map(|r| r.ce_stoch));
    let verdict = |ok: bool| if ok { "yes" } else { "no" };
    format!(
        "queries = {}\n\
         relevant_smallest_radius = {smallest}\n\
         relevant_smallest_radius_fraction = {:.6}\n\
         mean_l1_radius_relevant = {rel:.6}\n\
         mean_l1_radius_irrelevant = {irr:.6}\n\
         relevant_radius_tends_smallest = {}\n\
         mean_max_irrelevant_sim_det = {irr_det:.6}\n\
         mean_max_irrelevant_sim_stoch = {irr_stoch:.6}\n\
         mean_ce_det = {ce_det:.6}\n\
         mean_ce_stoch = {ce_stoch:.6}\n\
         sampling_changes_alignment = {}\n",
        queries.len(),
        smallest as f64 / queries.len().max(1) as f64,
        verdict(rel < irr),
        verdict(irr_det != irr_stoch || ce_det != ce_stoch),
    )
}

/// Runs the suite on one small random instance per seed.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<Vec<(u64, GradcheckReport)>> {
    let (n, dim, concepts, frames) = GRADCHECK_SHAPE;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let (batch, params, noise) = gradcheck_instance(seed, n, dim, concepts, frames, cfg.train.variant);
            let params = if cfg.mode == Objective::Baseline {
                ModelParameters {
                    text_mass: false,
                    ..params
                }
            } else {
                params
            };
            let report = gradcheck(&batch, &params, cfg.mode, cfg.train.alpha, &noise, GRADCHECK_STEP)?;
            Ok((seed, report))
        })
        .collect()
}

fn print_rows(rows: &[MetricsRow]) {
    print!("{}", metrics_table(rows));
}

fn gen_data(o: &Options) -> Result<()> {
    let cfg = resolve(o)?;
    let dir = out_dir(o)?;
    let mut records = generate(&cfg.data)?;
    quantize(&mut records);
    create_run_dir(dir)?;
    write(dir, CONFIG_FILE, &cfg.to_text())?;
    write_dataset(dir, &records)?;
    write(dir, METRICS_FILE, &format!("{RUN_METRICS_HEADER}\n"))?;
    println!(
        "wrote {} train and {} test pairs to {}",
        cfg.data.pairs,
        cfg.data.test_pairs,
        dir.display()
    );
    Ok(())
}

fn direction_rows(name: &str, seed: u64, metrics: &[RetrievalMetrics]) -> Vec<MetricsRow> {
    metrics
        .iter()
        .map(|m| MetricsRow {
            config: name.to_string(),
            seed: seed.to_string(),
            metrics: *m,
        })
        .collect()
}

fn train_command(o: &Options) -> Result<()> {
    let dir = out_dir(o)?;
    let (cfg, resumed) = match &o.checkpoint {
        Some(path) => {
            let ck = resolve_checkpoint(o, path)?;
            (ck.config, Some(ck.state))
        }
        None => (resolve(o)?, None),
    };
    let (train, test) = load_splits(&cfg, o.data.as_deref())?;
    let mut trainer = match resumed {
        Some(state) => Trainer::resume(&cfg.train, cfg.mode, train.len(), state)?,
        None => Trainer::new(&cfg.train, cfg.mode, train.len())?,
    };
    let stop = o.stop_after.unwrap_or(usize::MAX);
    while !trainer.finished() && trainer.epoch() < stop {
        trainer.run_epoch(&train, &test)?;
    }
    let state = trainer.state();
    let metrics = evaluate_model(&state.params, &cfg, &test)?;
    let rows = direction_rows(cfg.mode.as_str(), cfg.train.seed, &metrics);
    create_run_dir(dir)?;
    write(dir, CONFIG_FILE, &cfg.to_text())?;
    Checkpoint {
        config: cfg.clone(),
        state,
    }
    .save(&dir.join(CHECKPOINT_FILE))?;
    let log = trainer.into_log();
    write(dir, STEPS_FILE, &log.steps_csv())?;
    write(dir, EPOCHS_FILE, &log.epochs_csv())?;
    write(dir, METRICS_FILE, &metrics_table(&rows))?;
    print_rows(&rows);
    Ok(())
}

fn eval_command(o: &Options) -> Result<()> {
    let dir = out_dir(o)?;
    let path = o
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::contract("eval needs --checkpoint <file>"))?;
    let ck = resolve_checkpoint(o, path)?;
    let (_, test) = load_splits(&ck.config, o.data.as_deref())?;
    let metrics = evaluate_model(&ck.state.params, &ck.config, &test)?;
    let rows = direction_rows(ck.config.mode.as_str(), ck.config.train.seed, &metrics);
    create_run_dir(dir)?;
    write(dir, CONFIG_FILE, &ck.config.to_text())?;
    write(dir, METRICS_FILE, &metrics_table(&rows))?;
    print_rows(&rows);
    Ok(())
}

fn write_grid(dir: &Path, cfg: &RunConfig, table: &GridTable) -> Result<()> {
    create_run_dir(dir)?;
    write(dir, CONFIG_FILE, &cfg.to_text())?;
    write(dir, METRICS_FILE, &table.csv())?;
    write(dir, ABLATION_LOG_FILE, &table.log)?;
    print_rows(&table.rows);
    Ok(())
}

fn grid_command(o: &Options, cells: fn(&RunConfig) -> Cells) -> Result<()> {
    let dir = out_dir(o)?;
    refuse_existing(dir)?;
    let cfg = resolve(o)?;
    let table = run_grid(&cells(&cfg), &cfg.seeds, o.data.as_deref())?;
    write_grid(dir, &cfg, &table)
}

fn sweep_trials_command(o: &Options) -> Result<()> {
    let dir = out_dir(o)?;
    refuse_existing(dir)?;
    let cfg = resolve(o)?;
    let table = sweep_trials(&cfg, o.data.as_deref())?;
    write_grid(dir, &cfg, &table)
}

fn analyze_command(o: &Options) -> Result<()> {
    let dir = out_dir(o)?;
    let (cfg, params) = match &o.checkpoint {
        Some(path) => {
            let ck = resolve_checkpoint(o, path)?;
            (ck.config, ck.state.params)
        }
        None => {
            let cfg = resolve(o)?;
            ensure(cfg.mode != Objective::Baseline, || "analyze needs a text-mass mode".into())?;
            let (train, test) = load_splits(&cfg, o.data.as_deref())?;
            let (state, _) = crate::trainer::train(&cfg.train, &train, &test, cfg.mode)?;
            (cfg, state.params)
        }
    };
    ensure(params.text_mass, || "analyze needs a text-mass model".into())?;
    let (_, test) = load_splits(&cfg, o.data.as_deref())?;
    let radius = full_radius_report(&params, &cfg, &test)?;
    let alignment = alignment_report(&test, &params, &cfg.train.sampling(), cfg.train.seed)?;
    let metrics = evaluate_model(&params, &cfg, &test)?;
    let rows = direction_rows(cfg.mode.as_str(), cfg.train.seed, &metrics);
    let notes = observations(&radius, &alignment);
    create_run_dir(dir)?;
    write(dir, CONFIG_FILE, &cfg.to_text())?;
    write(dir, RADIUS_FILE, &radius.to_csv())?;
    write(dir, ALIGNMENT_FILE, &alignment.to_csv())?;
    write(dir, METRICS_FILE, &metrics_table(&rows))?;
    write(dir, OBSERVATIONS_FILE, &notes)?;
    print!("{notes}");
    Ok(())
}

fn gradcheck_command(o: &Options) -> Result<()> {
    let cfg = resolve(o)?;
    let reports = run_gradcheck(&cfg)?;
    let mut csv = format!("{GRADCHECK_HEADER}\n");
    for (seed, r) in &reports {
        csv.push_str(&format!(
            "{seed},{},{},{},{},{},{:.6e},{:.6e}\n",
            cfg.train.variant, cfg.mode, cfg.train.alpha, r.checked, r.failures, r.max_relative_error, r.max_absolute_error
        ));
    }
    let max_rel = reports.iter().map(|(_, r)| r.max_relative_error).fold(0.0, f64::max);
    let failures: usize = reports.iter().map(|(_, r)| r.failures).sum();
    if let Some(dir) = &o.out {
        create_run_dir(dir)?;
        write(dir, CONFIG_FILE, &cfg.to_text())?;
        write(dir, GRADCHECK_FILE, &csv)?;
    }
    print!("{csv}");
    println!("max relative error: {max_rel:.6e}");
    if failures > 0 {
        let worst = reports.iter().find_map(|(_, r)| r.worst);
        return Err(Error::OracleFailure(format!(
            "{failures} coordinates outside tolerance, worst at {worst:?}"
        )));
    }
    Ok(())
}
