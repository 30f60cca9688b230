//! Subcommand implementations. Each writes only through an [`OutDir`] and
//! finishes with a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tro_core::centrality::TopologicalPrior;
use tro_core::data::{load_csv_from, split_groups, CsvSchema, GroupedDataset};
use tro_core::eval::{evaluate_groups, Metric};
use tro_core::graph::{Provenance, TopologyGraph};
use tro_core::model::{Checkpoint, Predictor};
use tro_core::optim::train_erm;
use tro_core::pipeline::{learn_topology, report, run_method, FeatureSource, Method};
use tro_core::simplex::SimplexVector;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output::{InputFile, Manifest, OutDir};

/// File inputs shared by the subcommands.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    /// Directory written by `gen-data`; without it the dataset is built from
    /// the config.
    pub data: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Inputs {
    /// Fills unset inputs from a manifest's record.
    pub fn or_from_manifest(mut self, manifest: &Manifest) -> Self {
        let get = |k: &str| manifest.inputs.get(k).map(|f| f.path.clone());
        if self.data.is_none() {
            self.data = get("data.csv").and_then(|p| p.parent().map(Path::to_path_buf));
        }
        self.prior = self.prior.or_else(|| get("prior"));
        self.checkpoint = self.checkpoint.or_else(|| get("checkpoint"));
        self
    }
}

type Recorded = BTreeMap<String, InputFile>;

fn meta(config: &ExperimentConfig) -> Value {
    json!({ "config": config, "seed": config.seed })
}

/// Serializes `doc` and adds the resolved config and seed.
fn with_meta(doc: &impl Serialize, config: &ExperimentConfig) -> Value {
    let mut v = serde_json::to_value(doc).expect("document serializes");
    if let Value::Object(map) = &mut v {
        map.insert(
            "config".into(),
            serde_json::to_value(config).expect("config serializes"),
        );
        map.insert("seed".into(), json!(config.seed));
    }
    v
}

fn load_data(
    config: &ExperimentConfig,
    inputs: &Inputs,
    recorded: &mut Recorded,
) -> CliResult<(GroupedDataset, Option<TopologyGraph>)> {
    let Some(dir) = &inputs.data else {
        return config.build_dataset();
    };
    let csv_path = dir.join("data.csv");
    let (file, text) = InputFile::read(&csv_path)?;
    recorded.insert("data.csv".into(), file);
    let header = text.lines().next().unwrap_or_default();
    let dim = header.split(',').filter(|c| c.starts_with('x')).count();
    let dataset = load_csv_from(text.as_bytes(), &CsvSchema::exported(dim), config.task())
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    let topo_path = dir.join("topology.json");
    let graph = if topo_path.exists() {
        let (file, text) = InputFile::read(&topo_path)?;
        recorded.insert("topology.json".into(), file);
        Some(TopologyGraph::from_json(&text)?)
    } else {
        None
    };
    Ok((dataset, graph))
}

fn load_prior(path: &Path, dataset: &GroupedDataset, recorded: &mut Recorded) -> CliResult<SimplexVector> {
    let (file, text) = InputFile::read(path)?;
    recorded.insert("prior".into(), file);
    let prior = TopologicalPrior::from_json(&text)?;
    let m = dataset.train_ids().len();
    if prior.len() != m {
        return Err(CliError::config(format!(
            "prior has {} entries for {m} training groups",
            prior.len()
        )));
    }
    Ok(prior.prior)
}

fn learn_prior(
    config: &ExperimentConfig,
    dataset: &GroupedDataset,
    physical: Option<&TopologyGraph>,
) -> CliResult<tro_core::pipeline::TopologyResult> {
    let feature_model = match (config.topology.mode, config.topology.feature_source) {
        (Provenance::Data, FeatureSource::ErmHidden) => {
            let cfg = config.method.tro_config(config.seed);
            Some(train_erm(dataset, config.model.arch(), config.model.loss(), &cfg)?.0)
        }
        _ => None,
    };
    Ok(learn_topology(
        dataset,
        physical,
        feature_model.as_ref(),
        &config.topology,
    )?)
}

pub fn gen_data(config: &ExperimentConfig, out: &Path) -> CliResult<Manifest> {
    let mut dir = OutDir::create(out)?;
    let (dataset, graph) = config.build_dataset()?;
    let mut csv = Vec::new();
    dataset.write_csv_to(&mut csv)?;
    dir.write("data.csv", csv)?;
    if let Some(g) = graph {
        dir.write_json("topology.json", &with_meta(&g.to_document(), config))?;
    }
    dir.finish("gen-data", config, Recorded::new())
}

pub fn topology(config: &ExperimentConfig, inputs: &Inputs, out: &Path) -> CliResult<Manifest> {
    let mut recorded = Recorded::new();
    let (dataset, physical) = load_data(config, inputs, &mut recorded)?;
    let result = learn_prior(config, &dataset, physical.as_ref())?;
    let mut dir = OutDir::create(out)?;
    dir.write_json("topology.json", &with_meta(&result.graph.to_document(), config))?;
    dir.write("topology.dot", result.graph.to_dot())?;
    dir.write_json("prior.json", &with_meta(&result.prior, config))?;
    dir.finish("topology", config, recorded)
}

/// Checkpoint document written by `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    method: Method,
    #[serde(default)]
    q: Option<SimplexVector>,
    model: Checkpoint,
}

pub fn train(config: &ExperimentConfig, inputs: &Inputs, out: &Path) -> CliResult<Manifest> {
    let mut recorded = Recorded::new();
    let (dataset, physical) = load_data(config, inputs, &mut recorded)?;
    let method = config.method.name;
    let prior = match (&inputs.prior, method.needs_prior()) {
        (Some(path), true) => Some(load_prior(path, &dataset, &mut recorded)?),
        (None, true) => {
            return Err(CliError::config(format!(
                "method {} needs a prior file (--prior)",
                method.name()
            )))
        }
        (Some(path), false) => {
            tracing::warn!(method = method.name(), prior = %path.display(), "method ignores the prior file");
            None
        }
        (None, false) => None,
    };
    let loss = config.model.loss();
    let outcome = run_method(
        method,
        &dataset,
        prior.as_ref(),
        config.model.arch(),
        loss,
        &config.method.tro_config(config.seed),
    )?;
    let run = report(&outcome.model, &dataset, loss, physical.as_ref(), meta(config))?;

    let mut dir = OutDir::create(out)?;
    let ckpt = CheckpointFile {
        method,
        q: outcome.q,
        model: outcome.model.to_checkpoint(),
    };
    dir.write_json("checkpoint.json", &with_meta(&ckpt, config))?;
    dir.write("history.csv", outcome.history.to_csv())?;
    dir.write("report.json", run.to_json())?;
    dir.write("report.csv", run.to_csv())?;
    tracing::info!(method = method.name(), overall = run.overall, "trained");
    dir.finish("train", config, recorded)
}

pub fn eval(config: &ExperimentConfig, inputs: &Inputs, out: &Path) -> CliResult<Manifest> {
    let mut recorded = Recorded::new();
    let (dataset, physical) = load_data(config, inputs, &mut recorded)?;
    let path = inputs
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("eval needs a checkpoint file (--checkpoint)"))?;
    let (file, text) = InputFile::read(path)?;
    recorded.insert("checkpoint".into(), file);
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let inner = value.get("model").cloned().unwrap_or(value);
    let ckpt: Checkpoint =
        serde_json::from_value(inner).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let model = Predictor::from_checkpoint(ckpt)?;
    let run = report(&model, &dataset, config.model.loss(), physical.as_ref(), meta(config))?;
    let mut dir = OutDir::create(out)?;
    dir.write("report.json", run.to_json())?;
    dir.write("report.csv", run.to_csv())?;
    dir.finish("eval", config, recorded)
}

/// One trained grid cell.
#[derive(Debug, Clone)]
struct CellResult {
    cell: usize,
    lambda: f64,
    eta_q: f64,
    seed: u64,
    val: f64,
    test: f64,
    dir: String,
    history: String,
    report: String,
}

/// Grid over `sweep.lambda x sweep.eta_q x sweep.seeds`. Each cell trains on
/// the training groups minus a held-out share, scores that share for
/// selection, and reports on the test groups.
pub fn sweep(config: &ExperimentConfig, inputs: &Inputs, out: &Path, jobs: usize) -> CliResult<Manifest> {
    let grid: Vec<(f64, f64)> = config
        .sweep
        .lambda
        .iter()
        .flat_map(|&l| config.sweep.eta_q.iter().map(move |&q| (l, q)))
        .collect();
    if grid.is_empty() || config.sweep.seeds.is_empty() {
        return Err(CliError::config("sweep grid is empty"));
    }
    if grid.len() > 1 && config.eval.val_fraction == 0.0 {
        return Err(CliError::config(
            "selecting among several cells needs eval.val_fraction > 0",
        ));
    }
    let mut recorded = Recorded::new();
    let method = config.method.name;

    // Per seed: dataset, physical graph and prior.
    let mut per_seed = Vec::new();
    for &seed in &config.sweep.seeds {
        let cfg = config.with_seed(seed)?;
        let (dataset, physical) = load_data(&cfg, inputs, &mut recorded)?;
        let prior = match (&inputs.prior, method.needs_prior()) {
            (_, false) => None,
            (Some(path), true) => Some(load_prior(path, &dataset, &mut recorded)?),
            (None, true) => Some(learn_prior(&cfg, &dataset, physical.as_ref())?.prior.prior),
        };
        per_seed.push((cfg, dataset, physical, prior));
    }

    let tasks: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|c| (0..per_seed.len()).map(move |s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    let results: Vec<CliResult<CellResult>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, s)| {
                let (lambda, eta_q) = grid[c];
                let (base, dataset, physical, prior) = &per_seed[s];
                let mut cfg = base.clone();
                cfg.method.lambda = lambda;
                cfg.method.eta_q = eta_q;
                let loss = cfg.model.loss();
                let (fit, val, _) = split_groups(dataset, dataset.train_ids(), cfg.eval.val_fraction, cfg.seed)?;
                let outcome = run_method(
                    method,
                    &fit,
                    prior.as_ref(),
                    cfg.model.arch(),
                    loss,
                    &cfg.method.tro_config(cfg.seed),
                )?;
                let val_metric = if val.groups().is_empty() {
                    f64::NAN
                } else {
                    let m = evaluate_groups(&outcome.model, &val.groups().iter().collect::<Vec<_>>(), val.task())?;
                    m.values().sum::<f64>() / m.len() as f64
                };
                let run = report(&outcome.model, dataset, loss, physical.as_ref(), meta(&cfg))?;
                Ok(CellResult {
                    cell: c,
                    lambda,
                    eta_q,
                    seed: cfg.seed,
                    val: val_metric,
                    test: run.overall,
                    dir: format!("cells/cell_{c:03}/seed_{}", cfg.seed),
                    history: outcome.history.to_csv(),
                    report: run.to_json(),
                })
            })
            .collect()
    });
    let results = results.into_iter().collect::<CliResult<Vec<_>>>()?;

    let metric = Metric::for_task(config.task());
    let name = match metric {
        Metric::Accuracy => "accuracy",
        Metric::Mse => "mse",
    };
    let mut dir = OutDir::create(out)?;
    let mut summary = format!("cell,lambda,eta_q,seed,val_{name},test_{name}\n");
    for r in &results {
        dir.write(&format!("{}/history.csv", r.dir), &r.history)?;
        dir.write(&format!("{}/report.json", r.dir), &r.report)?;
        summary.push_str(&format!(
            "{},{:?},{:?},{},{:?},{:?}\n",
            r.cell, r.lambda, r.eta_q, r.seed, r.val, r.test
        ));
    }
    dir.write("summary.csv", summary)?;

    let cell_means: Vec<f64> = (0..grid.len())
        .map(|c| {
            let vals: Vec<f64> = results.iter().filter(|r| r.cell == c).map(|r| r.val).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let best = select_cell(&cell_means, metric.higher_is_better());
    let selection = json!({
        "metric": metric,
        "criterion": "mean validation metric over seeds",
        "cells": grid.iter().zip(&cell_means).enumerate().map(|(c, ((l, q), v))| json!({
            "cell": c, "lambda": l, "eta_q": q, "mean_val": finite_or_null(*v),
        })).collect::<Vec<_>>(),
        "best": json!({ "cell": best, "lambda": grid[best].0, "eta_q": grid[best].1 }),
        "config": config,
        "seed": config.seed,
    });
    dir.write_json("selection.json", &selection)?;
    dir.finish("sweep", config, recorded)
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// Index of the best finite score; ties and an all-NaN column go to the
/// first cell.
pub fn select_cell(scores: &[f64], higher_is_better: bool) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        let b = scores[best];
        let better = if higher_is_better { s > b } else { s < b };
        if s.is_finite() && (!b.is_finite() || better) {
            best = i;
        }
    }
    best
}
