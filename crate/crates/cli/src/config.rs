//! Experiment configuration: a TOML document with nested blocks, or the
//! `config` field of an emitted manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tro_core::data::{
    gen_dg_ring, gen_grid_regression, load_csv, CsvSchema, DgRingParams, GridParams, GroupedDataset, Task,
};
use tro_core::graph::{parse_physical_topology, TopologyGraph};
use tro_core::model::{Activation, Arch, LossKind};
use tro_core::optim::{QInit, StepSchedule, TroConfig};
use tro_core::pipeline::{Method, TopologyConfig};

use crate::error::{CliError, CliResult};

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];
pub const DEFAULT_ETA_Q_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives data generation, initialization, sampling and splits.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

/// Where groups come from. Generator seeds are replaced by the experiment
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DatasetConfig {
    DgRing(DgRingParams),
    Grid(GridParams),
    Csv(CsvDataset),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::DgRing(DgRingParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvDataset {
    pub path: PathBuf,
    pub task: Task,
    pub schema: CsvSchema,
    /// Physical topology file (JSON or edge list).
    #[serde(default)]
    pub topology: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub name: Method,
    pub lambda: f64,
    pub eta_theta: f64,
    pub eta_q: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: StepSchedule,
    pub q_init: QInit,
    pub early_stop: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        let t = TroConfig::default();
        MethodConfig {
            name: Method::Tro,
            lambda: t.lambda,
            eta_theta: t.eta_theta,
            eta_q: t.eta_q,
            iterations: t.iterations,
            batch_size: t.batch_size,
            schedule: t.step_schedule,
            q_init: t.q_init,
            early_stop: t.early_stop,
        }
    }
}

impl MethodConfig {
    pub fn tro_config(&self, seed: u64) -> TroConfig {
        TroConfig {
            lambda: self.lambda,
            eta_theta: self.eta_theta,
            eta_q: self.eta_q,
            iterations: self.iterations,
            batch_size: self.batch_size,
            seed,
            step_schedule: self.schedule,
            q_init: self.q_init,
            early_stop: self.early_stop,
            record_history: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    #[default]
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// Hidden width; MLP only.
    pub hidden: usize,
    pub activation: Activation,
    /// Defaults to logistic for classification and squared for regression.
    pub loss: Option<LossKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: ArchKind::Linear,
            hidden: 16,
            activation: Activation::Tanh,
            loss: None,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self) -> Arch {
        match self.arch {
            ArchKind::Linear => Arch::Linear,
            ArchKind::Mlp => Arch::Mlp {
                hidden: self.hidden,
                activation: self.activation,
            },
        }
    }

    pub fn loss(&self) -> LossKind {
        self.loss.unwrap_or(LossKind::Logistic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Share of every training group held out for sweep model selection.
    pub val_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { val_fraction: 0.2 }
    }
}

/// Hyperparameter grid for `sweep`. An empty `seeds` list means the
/// experiment seed alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda: Vec<f64>,
    pub eta_q: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambda: DEFAULT_LAMBDA_GRID.to_vec(),
            eta_q: DEFAULT_ETA_Q_GRID.to_vec(),
            seeds: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the text is a manifest or a bare config
    /// object.
    pub fn parse(text: &str) -> CliResult<Self> {
        if text.trim_start().starts_with('{') {
            let value: serde_json::Value =
                serde_json::from_str(text).map_err(|e| CliError::config(format!("json config: {e}")))?;
            let inner = value.get("config").cloned().unwrap_or(value);
            return serde_json::from_value(inner).map_err(|e| CliError::config(format!("json config: {e}")));
        }
        toml::from_str(text).map_err(|e| CliError::config(format!("toml config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fills every defaulted field so the echoed config is complete.
    pub fn resolve(mut self) -> CliResult<Self> {
        match &mut self.dataset {
            DatasetConfig::DgRing(p) => p.seed = self.seed,
            DatasetConfig::Grid(p) => p.seed = self.seed,
            DatasetConfig::Csv(_) => {}
        }
        if self.model.loss.is_none() {
            self.model.loss = Some(match self.task() {
                Task::Classification => LossKind::Logistic,
                Task::Regression => LossKind::Squared,
            });
        }
        if self.sweep.seeds.is_empty() {
            self.sweep.seeds = vec![self.seed];
        }
        if !(0.0..1.0).contains(&self.eval.val_fraction) {
            return Err(CliError::config(format!(
                "eval.val_fraction must be in [0, 1), got {}",
                self.eval.val_fraction
            )));
        }
        self.method.tro_config(self.seed).validate()?;
        Ok(self)
    }

    pub fn with_seed(&self, seed: u64) -> CliResult<Self> {
        let mut c = self.clone();
        c.seed = seed;
        c.sweep.seeds = Vec::new();
        c.resolve()
    }

    pub fn task(&self) -> Task {
        match &self.dataset {
            DatasetConfig::DgRing(_) => Task::Classification,
            DatasetConfig::Grid(_) => Task::Regression,
            DatasetConfig::Csv(c) => c.task,
        }
    }

    /// Builds the dataset and, when known, its physical topology.
    pub fn build_dataset(&self) -> CliResult<(GroupedDataset, Option<TopologyGraph>)> {
        match &self.dataset {
            DatasetConfig::DgRing(p) => {
                let (d, g) = gen_dg_ring(p)?;
                Ok((d, Some(g)))
            }
            DatasetConfig::Grid(p) => {
                let (d, g) = gen_grid_regression(p)?;
                Ok((d, Some(g)))
            }
            DatasetConfig::Csv(c) => {
                let d = load_csv(&c.path, &c.schema, c.task)?;
                let g = match &c.topology {
                    Some(path) => {
                        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                        Some(parse_physical_topology(&text)?.with_names(d.names())?)
                    }
                    None => None,
                };
                Ok((d, g))
            }
        }
    }
}
