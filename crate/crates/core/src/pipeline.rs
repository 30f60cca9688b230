//! End-to-end runs: learn a topology and prior, train a method, report.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::centrality::{data_centrality, make_prior, physical_centrality, PathMetric, TopologicalPrior};
use crate::data::GroupedDataset;
use crate::diffusion::{extract_features, pairwise_group_distances, KernelScale, DEFAULT_ALPHA, DEFAULT_MAX_SCALE};
use crate::error::{Error, Result};
use crate::eval::{compile_report, evaluate, hop_partition, Metric, RunReport};
use crate::graph::{build_knn_graph, Provenance, TopologyGraph};
use crate::model::{Arch, LossKind, Predictor};
use crate::optim::{train_erm, train_group_dro, train_iw_erm, train_tro, History, TroConfig};
use crate::simplex::SimplexVector;

/// Features fed to the diffusion affinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    #[default]
    Raw,
    /// Hidden layer of an ERM-trained model.
    ErmHidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    pub mode: Provenance,
    pub feature_source: FeatureSource,
    /// Fixed RBF bandwidth; `None` uses the median heuristic.
    pub sigma2: Option<f64>,
    pub alpha: f64,
    pub max_scale: usize,
    pub knn_k: usize,
    pub metric: PathMetric,
    pub temperature: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            mode: Provenance::Physical,
            feature_source: FeatureSource::Raw,
            sigma2: None,
            alpha: DEFAULT_ALPHA,
            max_scale: DEFAULT_MAX_SCALE,
            knn_k: 3,
            metric: PathMetric::Hops,
            temperature: 1.0,
        }
    }
}

/// Learned or supplied topology plus the prior derived from it.
#[derive(Debug, Clone)]
pub struct TopologyResult {
    /// Physical mode: the supplied graph over all groups. Data mode: a kNN
    /// graph over the training groups only, numbered in `train_ids` order.
    pub graph: TopologyGraph,
    pub prior: TopologicalPrior,
}

/// Builds the prior over the dataset's training groups.
///
/// `physical` is required in physical mode. In data mode with
/// [`FeatureSource::ErmHidden`], `feature_model` supplies the hidden layer.
pub fn learn_topology(
    dataset: &GroupedDataset,
    physical: Option<&TopologyGraph>,
    feature_model: Option<&Predictor>,
    config: &TopologyConfig,
) -> Result<TopologyResult> {
    let train = dataset.train_ids();
    let names: Vec<String> = dataset.train_groups().iter().map(|g| g.name.clone()).collect();
    match config.mode {
        Provenance::Physical => {
            let graph = physical.ok_or_else(|| Error::invalid("physical mode needs a topology graph"))?;
            if graph.num_groups() < dataset.groups().iter().map(|g| g.id + 1).max().unwrap_or(0) {
                return Err(Error::invalid("topology graph does not cover every group"));
            }
            let c = physical_centrality(graph, train, dataset.test_ids(), config.metric)?;
            let prior = make_prior(&c, Provenance::Physical, config.temperature)?.with_names(names)?;
            Ok(TopologyResult {
                graph: graph.clone(),
                prior,
            })
        }
        Provenance::Data => {
            let feats = dataset
                .train_groups()
                .iter()
                .map(|g| match config.feature_source {
                    FeatureSource::Raw => Ok(g.x.clone()),
                    FeatureSource::ErmHidden => {
                        let model =
                            feature_model.ok_or_else(|| Error::invalid("erm_hidden features need a trained model"))?;
                        extract_features(model, g.x.view())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<ArrayView2<'_, f64>> = feats.iter().map(|f| f.view()).collect();
            let scale = config.sigma2.map_or(KernelScale::Median, KernelScale::Fixed);
            let dist = pairwise_group_distances(&views, scale, config.alpha, config.max_scale)?;
            let graph = build_knn_graph(&dist, config.knn_k)?.with_names(names.clone())?;
            let local: Vec<usize> = (0..train.len()).collect();
            let c = data_centrality(&graph, &local, config.metric)?;
            let prior = make_prior(&c, Provenance::Data, config.temperature)?.with_names(names)?;
            Ok(TopologyResult { graph, prior })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tro,
    Erm,
    GroupDro,
    IwErm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Erm, Method::GroupDro, Method::IwErm, Method::Tro];

    pub fn needs_prior(self) -> bool {
        matches!(self, Method::Tro | Method::IwErm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Tro => "tro",
            Method::Erm => "erm",
            Method::GroupDro => "group_dro",
            Method::IwErm => "iw_erm",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub model: Predictor,
    pub history: History,
    /// Final group weights; `None` for ERM.
    pub q: Option<SimplexVector>,
}

/// Trains `method` on the dataset's training groups.
pub fn run_method(
    method: Method,
    dataset: &GroupedDataset,
    prior: Option<&SimplexVector>,
    arch: Arch,
    loss: LossKind,
    config: &TroConfig,
) -> Result<MethodOutcome> {
    let need = || prior.ok_or_else(|| Error::invalid(format!("method {} needs a prior", method.name())));
    let state = match method {
        Method::Erm => {
            let (model, history) = train_erm(dataset, arch, loss, config)?;
            return Ok(MethodOutcome {
                model,
                history,
                q: None,
            });
        }
        Method::Tro => train_tro(dataset, need()?, arch, loss, config)?,
        Method::IwErm => train_iw_erm(dataset, need()?, arch, loss, config)?,
        Method::GroupDro => train_group_dro(dataset, arch, loss, config)?,
    };
    Ok(MethodOutcome {
        model: state.model,
        history: state.history,
        q: Some(state.q),
    })
}

/// Evaluates on the test groups, with hop levels when a graph over all
/// groups is available.
pub fn report(
    model: &Predictor,
    dataset: &GroupedDataset,
    loss: LossKind,
    hop_graph: Option<&TopologyGraph>,
    meta: serde_json::Value,
) -> Result<RunReport> {
    let metrics = evaluate(model, dataset, loss)?;
    let hops = match hop_graph {
        Some(g) => hop_partition(g, dataset.train_ids(), dataset.test_ids())?,
        None => Default::default(),
    };
    compile_report(Metric::for_task(dataset.task()), metrics, hops, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dg_ring, DgRingParams};

    #[test]
    fn physical_prior_peaks_next_to_test_block() {
        let (ds, graph) = gen_dg_ring(&DgRingParams::default()).unwrap();
        let t = learn_topology(&ds, Some(&graph), None, &TopologyConfig::default()).unwrap();
        assert_eq!(t.prior.centrality, vec![0.0, 9.0, 18.0, 27.0, 36.0, 45.0]);
        assert_eq!(t.prior.prior.argmax(), 5);
        assert!(learn_topology(&ds, None, None, &TopologyConfig::default()).is_err());
    }

    #[test]
    fn data_topology_recovers_chain_of_shifted_groups() {
        let (ds, _) = gen_dg_ring(&DgRingParams::benchmark(0)).unwrap();
        let cfg = TopologyConfig {
            mode: Provenance::Data,
            sigma2: Some(0.2),
            knn_k: 2,
            ..TopologyConfig::default()
        };
        let t = learn_topology(&ds, None, None, &cfg).unwrap();
        assert_eq!(t.graph.num_groups(), 6);
        assert!((0..5).all(|e| t.graph.has_edge(e, e + 1)));
        let c = &t.prior.centrality;
        assert!(c[0] < c[2] && c[5] < c[3], "{c:?}");
    }

    #[test]
    fn methods_check_prior() {
        let (ds, _) = gen_dg_ring(&DgRingParams::default()).unwrap();
        let cfg = TroConfig {
            iterations: 5,
            ..TroConfig::default()
        };
        assert!(run_method(Method::Tro, &ds, None, Arch::Linear, LossKind::Logistic, &cfg).is_err());
        let out = run_method(Method::Erm, &ds, None, Arch::Linear, LossKind::Logistic, &cfg).unwrap();
        assert!(out.q.is_none());
        let r = report(&out.model, &ds, LossKind::Logistic, None, serde_json::Value::Null).unwrap();
        assert_eq!(r.per_group.len(), 9);
    }
}
