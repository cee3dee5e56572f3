//! Command-line front end for `ssmix`: dataset ingestion and preprocessing,
//! fitting, grid model selection, simulation, evaluation and trajectory
//! prediction. Every subcommand writes its artifacts into `--out`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use ssmix::selection::initial_model;
use ssmix::{
    cluster_similarity, fit_mixture, generate_benchmark, grid_select, load_dataset, noiseless_trajectory,
    parse_transforms, preprocess, read_labels, write_csv_long, write_json, DataFormat, Dataset, FitOptions,
    InitMethod, MixtureModel, ParamBlock,
};

#[derive(Parser, Debug)]
#[command(name = "ssmix", version, about = "Cluster irregularly sampled time series with mixtures of linear Gaussian state space models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the three-class simulated benchmark.
    Simulate(SimulateArgs),
    /// Fit one mixture.
    Fit(FitArgs),
    /// Fit a grid of (M, d) cells and pick the lowest mean ABIC.
    Select(SelectArgs),
    /// Compare cluster assignments against ground-truth labels.
    Evaluate(EvaluateArgs),
    /// Noiseless trajectories of every cluster in a model file.
    Predict(PredictArgs),
}

/// An inclusive integer range written `A..B`, or a single value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntRange {
    pub lo: usize,
    pub hi: usize,
}

impl IntRange {
    pub fn values(&self) -> Vec<usize> {
        (self.lo..=self.hi).collect()
    }

    fn single(&self, flag: &str) -> Result<usize> {
        ensure!(self.lo == self.hi, "{flag} takes a single value here, got {self}");
        Ok(self.lo)
    }
}

impl FromStr for IntRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("`{x}` is not a non-negative integer"));
        let (lo, hi) = match s.split_once("..") {
            Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
            None => (num(s)?, num(s)?),
        };
        if lo == 0 || lo > hi {
            return Err(format!("`{s}` is not a range of positive values A..B with A <= B"));
        }
        Ok(Self { lo, hi })
    }
}

impl fmt::Display for IntRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}..{}", self.lo, self.hi)
        }
    }
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset file (JSON or CSV-long).
    #[arg(long)]
    pub data: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<DataFormat>,
    /// Comma separated transforms, e.g. `log,minmax-per-series`.
    #[arg(long)]
    pub transform: Option<String>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset<f64>> {
        let format = self.format.unwrap_or_else(|| DataFormat::from_path(&self.data));
        let data = load_dataset(&self.data, format).with_context(|| format!("reading {}", self.data.display()))?;
        match &self.transform {
            Some(list) => Ok(preprocess(data, &parse_transforms(list)?)?),
            None => Ok(data),
        }
    }
}

#[derive(Args, Debug)]
pub struct EngineArgs {
    #[arg(long, default_value = "identity")]
    pub init: InitMethod,
    #[arg(long, default_value_t = 30)]
    pub kmeans_restarts: usize,
    #[arg(long, default_value_t = 0.1)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the available cores. Results do not
    /// depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Parameter blocks held at their initial values, e.g. `Sigma,P`.
    #[arg(long)]
    pub fix: Option<String>,
}

impl EngineArgs {
    fn options(&self) -> Result<FitOptions> {
        let fixed_params = match &self.fix {
            Some(list) => list
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.parse::<ParamBlock>())
                .collect::<Result<BTreeSet<_>, _>>()?,
            None => BTreeSet::new(),
        };
        let threads = self.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let options = FitOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            threads,
            fixed_params,
            init: self.init,
            kmeans_restarts: self.kmeans_restarts,
        };
        options.validate()?;
        Ok(options)
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Format of the emitted dataset.
    #[arg(long, default_value = "json")]
    pub format: DataFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub clusters: IntRange,
    #[arg(long)]
    pub latent_dim: IntRange,
    /// Ground-truth labels (`series_id,label`); adds similarity to the summary.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Also write trajectories.csv.
    #[arg(long)]
    pub trajectories: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub clusters: IntRange,
    #[arg(long)]
    pub latent_dim: IntRange,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Ground-truth labels (`series_id,label`).
    #[arg(long)]
    pub labels: PathBuf,
    /// assignments.csv written by `fit`.
    #[arg(long)]
    pub assignments: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// model.json written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// End of the time grid.
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Files written into an output directory. Unless [`Artifacts::commit`] is
/// called, dropping removes them again (and the directory, if it was created
/// here and is left empty).
struct Artifacts {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
    committed: bool,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), created_dir, written: Vec::new(), committed: false })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        body(&mut out)?;
        out.flush()?;
        Ok(())
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for path in &self.written {
            let _ = fs::remove_file(path);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

fn write_pretty(out: &mut impl Write, value: &serde_json::Value) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_labels(path: &Path, dataset: &Dataset<f64>) -> Result<Vec<usize>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_labels(file, dataset.ids())?)
}

fn write_trajectories(out: &mut impl Write, model: &MixtureModel<f64>, horizon: f64, points: usize) -> Result<()> {
    ensure!(points >= 2 && horizon > 0.0, "need at least two grid points and a positive horizon");
    let grid: Vec<f64> = (0..points).map(|i| horizon * i as f64 / (points - 1) as f64).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["cluster".to_string(), "t".to_string()];
    header.extend((1..=model.obs_dim).map(|j| format!("y_{j}")));
    w.write_record(&header)?;
    for (l, theta) in model.clusters.iter().enumerate() {
        let y = noiseless_trajectory(theta, &grid)?;
        for (k, t) in grid.iter().enumerate() {
            let mut row = vec![l.to_string(), t.to_string()];
            row.extend(y.row(k).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Fit(a) => fit(&a),
        Command::Select(a) => select(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Predict(a) => predict(&a),
    }
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let bench = generate_benchmark::<f64>(args.seed);
    let mut out = Artifacts::new(&args.out)?;
    match args.format {
        DataFormat::Json => out.write("data.json", |w| Ok(write_json(&bench.dataset, &mut *w)?))?,
        DataFormat::CsvLong => out.write("data.csv", |w| Ok(write_csv_long(&bench.dataset, &mut *w)?))?,
    }
    out.write("labels.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["series_id", "label"])?;
        for (id, label) in bench.dataset.ids().zip(&bench.labels) {
            csv.write_record([id, &label.to_string()])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    out.write("truth.json", |w| Ok(writeln!(w, "{}", bench.truth.to_json())?))?;
    out.commit();
    log::info!("wrote {} series to {}", bench.dataset.len(), args.out.display());
    Ok(())
}

fn fit(args: &FitArgs) -> Result<()> {
    let m = args.clusters.single("--clusters")?;
    let d = args.latent_dim.single("--latent-dim")?;
    let dataset = args.data.load()?;
    let options = args.engine.options()?;
    let labels = args.labels.as_deref().map(|p| load_labels(p, &dataset)).transpose()?;
    let mut out = Artifacts::new(&args.out)?;
    let start = Instant::now();
    let model0 = initial_model(&dataset, m, d, &options)?;
    let report = fit_mixture(&dataset, &model0, &options)?;
    let wall = start.elapsed().as_secs_f64();
    log::info!(
        "M={m} d={d}: {} iterations, converged={}, loglik={:.3}, ABIC={:.3}",
        report.iterations(),
        report.converged,
        report.loglik,
        report.abic
    );

    out.write("model.json", |w| Ok(writeln!(w, "{}", report.model.to_json())?))?;
    out.write("assignments.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["series_id".to_string(), "cluster".to_string()];
        header.extend((0..m).map(|l| format!("resp_{l}")));
        csv.write_record(&header)?;
        for (i, id) in dataset.ids().enumerate() {
            let mut row = vec![id.to_string(), report.assignments[i].to_string()];
            row.extend(report.responsibilities.row(i).iter().map(|p| p.to_string()));
            csv.write_record(&row)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    out.write("trace.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["iter", "loglik", "param_delta", "warnings"])?;
        for t in &report.trace {
            csv.write_record([t.iteration.to_string(), t.loglik.to_string(), t.param_delta.to_string(), t.warnings.join("; ")])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let similarity = match &labels {
        Some(l) => {
            let k = m.max(l.iter().copied().max().unwrap_or(0) + 1);
            Some(cluster_similarity(l, &report.assignments, k)?)
        }
        None => None,
    };
    let summary = json!({
        "M": m,
        "d": d,
        "n": dataset.obs_dim(),
        "n_series": dataset.len(),
        "init": format!("{:?}", options.init).to_lowercase(),
        "seed": options.seed,
        "abic": report.abic,
        "loglik": report.loglik,
        "converged": report.converged,
        "iterations": report.iterations(),
        "wall_time_seconds": wall,
        "similarity": similarity.as_ref().map(|s| s.similarity),
        "confusion": similarity.as_ref().map(|s| &s.confusion),
    });
    out.write("summary.json", |w| write_pretty(w, &summary))?;
    if args.trajectories {
        let horizon = dataset.series().iter().filter_map(|s| s.timestamps.last().copied()).fold(0.0, f64::max);
        out.write("trajectories.csv", |w| write_trajectories(w, &report.model, horizon, 200))?;
    }
    out.commit();
    Ok(())
}

fn select(args: &SelectArgs) -> Result<()> {
    let dataset = args.data.load()?;
    let options = args.engine.options()?;
    let labels = args.labels.as_deref().map(|p| load_labels(p, &dataset)).transpose()?;
    let mut out = Artifacts::new(&args.out)?;
    let grid = grid_select(
        &dataset,
        &args.clusters.values(),
        &args.latent_dim.values(),
        args.repeats,
        &options,
        labels.as_deref(),
    )?;
    out.write("grid.csv", |w| Ok(grid.write_csv(&mut *w)?))?;
    let best = grid.best_cell();
    out.write("best.json", |w| {
        write_pretty(w, &json!({ "best": best, "cells": &grid.cells }))
    })?;
    // The grid documents which cells broke, so it is kept even then.
    out.commit();
    let failed: Vec<String> = grid
        .rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("M={} d={} repeat={}: {e}", r.m, r.d, r.repeat)))
        .collect();
    if let Some(b) = best {
        log::info!("lowest mean ABIC at M={} d={}: {:?}", b.m, b.d, b.mean_abic);
    }
    if !failed.is_empty() {
        bail!("{} of {} fits failed:\n  {}", failed.len(), grid.rows.len(), failed.join("\n  "));
    }
    Ok(())
}

fn read_assignments(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let cluster = record.get(1).context("assignments row without a cluster column")?;
        rows.push((record[0].to_string(), cluster.parse().with_context(|| format!("bad cluster `{cluster}`"))?));
    }
    Ok(rows)
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let assigned = read_assignments(&args.assignments)?;
    let file = File::open(&args.labels).with_context(|| format!("reading {}", args.labels.display()))?;
    let truth = read_labels(file, assigned.iter().map(|(id, _)| id.as_str()))?;
    let predicted: Vec<usize> = assigned.iter().map(|(_, c)| *c).collect();
    let m = truth.iter().chain(&predicted).copied().max().map_or(1, |x| x + 1);
    let sim = cluster_similarity(&truth, &predicted, m)?;
    let report = json!({
        "n_series": truth.len(),
        "similarity": sim.similarity,
        "permutation": sim.permutation,
        "confusion": sim.confusion,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &args.out {
        let mut out = Artifacts::new(dir)?;
        out.write("evaluation.json", |w| write_pretty(w, &report))?;
        out.commit();
    }
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let text = fs::read_to_string(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let model = MixtureModel::<f64>::from_json(&text)?;
    let mut out = Artifacts::new(&args.out)?;
    out.write("trajectories.csv", |w| write_trajectories(w, &model, args.horizon, args.points))?;
    out.commit();
    Ok(())
}
