//! Test metrics and hop-level aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Group, GroupedDataset, Task};
use crate::error::{Error, Result};
use crate::graph::TopologyGraph;
use crate::model::{LossKind, Predictor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Mse,
}

impl Metric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification => Metric::Accuracy,
            Task::Regression => Metric::Mse,
        }
    }

    /// Whether larger values are better.
    pub fn higher_is_better(self) -> bool {
        self == Metric::Accuracy
    }
}

fn check_loss(task: Task, loss: LossKind) -> Result<()> {
    match (task, loss) {
        (Task::Classification, LossKind::Logistic) | (Task::Regression, LossKind::Squared) => Ok(()),
        _ => Err(Error::invalid(format!("loss {loss:?} does not fit a {task:?} task"))),
    }
}

/// Accuracy (logit > 0 predicts 1) or mean squared error on one group.
pub fn group_metric(model: &Predictor, group: &Group, task: Task) -> Result<f64> {
    let pred = model.predict(group.x.view())?;
    let n = group.len() as f64;
    Ok(match task {
        Task::Classification => {
            let hits = pred
                .iter()
                .zip(group.y.iter())
                .filter(|(f, y)| f64::from(**f > 0.0) == **y)
                .count();
            hits as f64 / n
        }
        Task::Regression => {
            pred.iter()
                .zip(group.y.iter())
                .map(|(f, y)| (f - y).powi(2))
                .sum::<f64>()
                / n
        }
    })
}

/// Metric for every test group, keyed by group id.
pub fn evaluate(model: &Predictor, dataset: &GroupedDataset, loss: LossKind) -> Result<BTreeMap<usize, f64>> {
    check_loss(dataset.task(), loss)?;
    if dataset.test_ids().is_empty() {
        return Err(Error::invalid("dataset has no test groups"));
    }
    evaluate_groups(model, &dataset.test_groups(), dataset.task())
}

pub fn evaluate_groups(model: &Predictor, groups: &[&Group], task: Task) -> Result<BTreeMap<usize, f64>> {
    groups
        .iter()
        .map(|g| Ok((g.id, group_metric(model, g, task)?)))
        .collect()
}

/// Hop bucket of a test group; distances of three or more, and unreachable
/// groups, share the last bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HopLevel {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3+")]
    ThreePlus,
}

impl HopLevel {
    pub fn from_hops(hops: Option<usize>) -> Self {
        match hops {
            Some(1) => HopLevel::One,
            Some(2) => HopLevel::Two,
            _ => HopLevel::ThreePlus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            HopLevel::One => "1",
            HopLevel::Two => "2",
            HopLevel::ThreePlus => "3+",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopInfo {
    /// Unweighted distance to the nearest training group; `None` if
    /// unreachable.
    pub hops: Option<usize>,
    pub level: HopLevel,
}

/// Distance from each test group to its nearest training group.
pub fn hop_partition(
    graph: &TopologyGraph,
    train_ids: &[usize],
    test_ids: &[usize],
) -> Result<BTreeMap<usize, HopInfo>> {
    let m = graph.num_groups();
    for &id in train_ids.iter().chain(test_ids) {
        if id >= m {
            return Err(Error::invalid(format!("group {id} is not in the {m}-node topology")));
        }
    }
    if let Some(id) = test_ids.iter().find(|id| train_ids.contains(id)) {
        return Err(Error::invalid(format!("group {id} is both train and test")));
    }
    // multi-source BFS from all training groups
    let mut dist: Vec<Option<usize>> = vec![None; m];
    let mut queue = std::collections::VecDeque::new();
    for &s in train_ids {
        if dist[s].is_none() {
            dist[s] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(v) = queue.pop_front() {
        let d = dist[v].expect("queued nodes have distances");
        for &u in graph.neighbors(v) {
            if dist[u].is_none() {
                dist[u] = Some(d + 1);
                queue.push_back(u);
            }
        }
    }
    Ok(test_ids
        .iter()
        .map(|&t| {
            (
                t,
                HopInfo {
                    hops: dist[t],
                    level: HopLevel::from_hops(dist[t]),
                },
            )
        })
        .collect())
}

/// Test-set results for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metric: Metric,
    pub per_group: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hops: BTreeMap<usize, HopInfo>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hop_averages: BTreeMap<HopLevel, f64>,
    /// Unweighted mean over test groups.
    pub overall: f64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Assembles a report; `hops` may be empty when no topology is available,
/// otherwise it must cover exactly the metric's groups.
pub fn compile_report(
    metric: Metric,
    per_group: BTreeMap<usize, f64>,
    hops: BTreeMap<usize, HopInfo>,
    meta: serde_json::Value,
) -> Result<RunReport> {
    if per_group.is_empty() {
        return Err(Error::invalid("report needs at least one test group"));
    }
    if !hops.is_empty() && !hops.keys().eq(per_group.keys()) {
        return Err(Error::invalid("hop levels and metrics cover different groups"));
    }
    if per_group.values().any(|v| !v.is_finite()) {
        return Err(Error::degenerate("non-finite test metric"));
    }
    let overall = per_group.values().sum::<f64>() / per_group.len() as f64;
    let mut buckets: BTreeMap<HopLevel, Vec<f64>> = BTreeMap::new();
    for (id, info) in &hops {
        buckets.entry(info.level).or_default().push(per_group[id]);
    }
    let hop_averages = buckets
        .into_iter()
        .map(|(level, vals)| (level, vals.iter().sum::<f64>() / vals.len() as f64))
        .collect();
    Ok(RunReport {
        metric,
        per_group,
        hops,
        hop_averages,
        overall,
        meta,
    })
}

impl RunReport {
    pub fn hop_average(&self, level: HopLevel) -> Option<f64> {
        self.hop_averages.get(&level).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format(format!("run report: {e}")))
    }

    /// One row per test group: `group_id,hop,level,<metric>`.
    pub fn to_csv(&self) -> String {
        let name = match self.metric {
            Metric::Accuracy => "accuracy",
            Metric::Mse => "mse",
        };
        let mut out = format!("group_id,hop,level,{name}\n");
        for (id, v) in &self.per_group {
            let (hop, level) = match self.hops.get(id) {
                Some(h) => (
                    h.hops.map_or("unreachable".to_string(), |k| k.to_string()),
                    h.level.label(),
                ),
                None => (String::new(), ""),
            };
            writeln!(out, "{id},{hop},{level},{v:?}").expect("writing to a String cannot fail");
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))?;
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_physical_topology;
    use crate::model::Arch;
    use ndarray::{Array1, Array2};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> TopologyGraph {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        load_physical_topology(n, &edges).unwrap()
    }

    #[test]
    fn chain_hops() {
        let hops = hop_partition(&chain(5), &[0], &[1, 2, 3, 4]).unwrap();
        let levels: Vec<_> = hops.values().map(|h| h.level).collect();
        assert_eq!(
            levels,
            [HopLevel::One, HopLevel::Two, HopLevel::ThreePlus, HopLevel::ThreePlus]
        );
        assert_eq!(hops[&4].hops, Some(4));
    }

    #[test]
    fn unreachable_is_three_plus() {
        let g = load_physical_topology(4, &[(0, 1)]).unwrap();
        let hops = hop_partition(&g, &[0], &[1, 3]).unwrap();
        assert_eq!(hops[&1].level, HopLevel::One);
        assert_eq!(
            hops[&3],
            HopInfo {
                hops: None,
                level: HopLevel::ThreePlus
            }
        );
        assert!(hop_partition(&g, &[0], &[4]).is_err());
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
        let p = rng.random_range(0.1..0.7);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.random_bool(p) {
                    edges.push((a, b));
                }
            }
        }
        edges
    }

    /// Shortest hop count by enumerating simple paths.
    fn brute_hops(n: usize, edges: &[(usize, usize)], from: &[usize], to: usize) -> Option<usize> {
        fn walk(v: usize, to: usize, adj: &[Vec<bool>], seen: &mut Vec<bool>, len: usize, best: &mut Option<usize>) {
            if v == to {
                *best = Some(best.map_or(len, |b| b.min(len)));
                return;
            }
            for u in 0..adj.len() {
                if adj[v][u] && !seen[u] {
                    seen[u] = true;
                    walk(u, to, adj, seen, len + 1, best);
                    seen[u] = false;
                }
            }
        }
        let mut adj = vec![vec![false; n]; n];
        for &(a, b) in edges {
            adj[a][b] = true;
            adj[b][a] = true;
        }
        let mut best = None;
        for &s in from {
            let mut seen = vec![false; n];
            seen[s] = true;
            walk(s, to, &adj, &mut seen, 0, &mut best);
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn hops_match_path_enumeration(seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=8);
            let edges = random_graph(&mut rng, n);
            let g = load_physical_topology(n, &edges).unwrap();
            let k = rng.random_range(1..n);
            let train: Vec<usize> = (0..k).collect();
            let test: Vec<usize> = (k..n).collect();
            let hops = hop_partition(&g, &train, &test).unwrap();
            for &t in &test {
                prop_assert_eq!(hops[&t].hops, brute_hops(n, &edges, &train, t));
            }

            // adding an edge never raises a level
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b {
                let mut more = edges.clone();
                more.push((a, b));
                let g2 = load_physical_topology(n, &more).unwrap();
                let hops2 = hop_partition(&g2, &train, &test).unwrap();
                for &t in &test {
                    prop_assert!(hops2[&t].level <= hops[&t].level);
                }
            }
        }
    }

    fn group(id: usize, x: Vec<f64>, y: Vec<f64>) -> Group {
        Group {
            id,
            name: id.to_string(),
            x: Array2::from_shape_vec((y.len(), 1), x).unwrap(),
            y: Array1::from(y),
        }
    }

    #[test]
    fn perfect_classifier_and_zero_regressor() {
        let g = group(0, vec![-1.0, 2.0, -3.0], vec![0.0, 1.0, 0.0]);
        let model = Predictor::new(Arch::Linear, 1, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(group_metric(&model, &g, Task::Classification).unwrap(), 1.0);
        let z = group(0, vec![1.0, 2.0], vec![0.0, 0.0]);
        let zero = Predictor::zeros(Arch::Linear, 1, 1).unwrap();
        assert_eq!(group_metric(&zero, &z, Task::Regression).unwrap(), 0.0);
    }

    #[test]
    fn random_labeler_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1000;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let model = Predictor::new(Arch::Linear, 1, 1, vec![1.0, 0.0]).unwrap();
        let acc = group_metric(&model, &group(0, x, y), Task::Classification).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn metric_ignores_row_order() {
        let g = group(0, vec![0.3, -1.2, 2.0, 0.1], vec![1.0, -1.0, 0.5, 0.0]);
        let rev = group(0, vec![0.1, 2.0, -1.2, 0.3], vec![0.0, 0.5, -1.0, 1.0]);
        let model = Predictor::new(Arch::Linear, 1, 1, vec![0.7, -0.1]).unwrap();
        let a = group_metric(&model, &g, Task::Regression).unwrap();
        let b = group_metric(&model, &rev, Task::Regression).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn loss_must_fit_task() {
        let ds = GroupedDataset::new(
            Task::Regression,
            vec![group(0, vec![1.0], vec![0.5]), group(1, vec![2.0], vec![1.5])],
            vec![0],
            vec![1],
        )
        .unwrap();
        let model = Predictor::zeros(Arch::Linear, 1, 1).unwrap();
        assert!(matches!(
            evaluate(&model, &ds, LossKind::Logistic),
            Err(Error::InvalidInput(_))
        ));
        let m = evaluate(&model, &ds, LossKind::Squared).unwrap();
        assert_eq!(m.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(m[&1], 2.25);
    }

    #[test]
    fn report_examples() {
        let one = compile_report(
            Metric::Mse,
            BTreeMap::from([(3, 0.7)]),
            BTreeMap::new(),
            serde_json::Value::Null,
        )
        .unwrap();
        assert_eq!(one.overall, 0.7);

        let hops = hop_partition(&chain(4), &[0], &[1, 2, 3]).unwrap();
        let metrics = BTreeMap::from([(1, 0.4), (2, 0.6), (3, 0.9)]);
        let r = compile_report(Metric::Accuracy, metrics, hops.clone(), serde_json::json!({"seed": 1})).unwrap();
        assert!((r.overall - (0.4 + 0.6 + 0.9) / 3.0).abs() < 1e-12);
        assert_eq!(r.hop_average(HopLevel::One), Some(0.4));
        assert_eq!(r.hop_average(HopLevel::ThreePlus), Some(0.9));

        let two = compile_report(
            Metric::Accuracy,
            BTreeMap::from([(1, 0.4), (2, 0.6)]),
            BTreeMap::new(),
            serde_json::Value::Null,
        )
        .unwrap();
        assert!((two.overall - 0.5).abs() < 1e-12);

        assert!(compile_report(
            Metric::Accuracy,
            BTreeMap::from([(1, 0.4)]),
            hops,
            serde_json::Value::Null
        )
        .is_err());
        assert!(compile_report(
            Metric::Accuracy,
            BTreeMap::new(),
            BTreeMap::new(),
            serde_json::Value::Null
        )
        .is_err());
    }

    #[test]
    fn report_round_trip() {
        let hops = hop_partition(&chain(4), &[0], &[1, 2, 3]).unwrap();
        let metrics = BTreeMap::from([(1, 0.1), (2, 1.0 / 3.0), (3, 0.9)]);
        let r = compile_report(Metric::Mse, metrics, hops, serde_json::json!({"method": "tro"})).unwrap();
        let back = RunReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert!(csv.starts_with("group_id,hop,level,mse\n1,1,1,0.1\n"));
        assert!(csv.contains("\n3,3,3+,0.9\n"));
    }
}
