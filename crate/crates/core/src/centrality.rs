//! Betweenness centrality of groups and the softmax prior derived from it.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::ops::{Add, Div, Mul};

use num_rational::Ratio;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Provenance, TopologyGraph};
use crate::simplex::{softmax, SimplexVector};

/// Scalar used to accumulate path-count ratios. `f64` for production;
/// exact rationals for verification on small graphs.
pub trait PathScalar: Clone + Zero + One + Add<Output = Self> + Mul<Output = Self> + Div<Output = Self> {
    fn from_count(c: u64) -> Self;
}

impl PathScalar for f64 {
    fn from_count(c: u64) -> Self {
        c as f64
    }
}

impl PathScalar for Ratio<i128> {
    fn from_count(c: u64) -> Self {
        Ratio::from_integer(i128::from(c))
    }
}

/// Distance used for "shortest".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathMetric {
    /// Hop counts; edge weights ignored.
    #[default]
    Hops,
    /// Sum of edge weights (Dijkstra). Ties require exact equality.
    Weighted,
}

/// Shortest-path DAG from one source: visit order (nondecreasing
/// distance), predecessor lists and path counts.
struct ShortestPaths {
    order: Vec<usize>,
    preds: Vec<Vec<usize>>,
    sigma: Vec<u64>,
}

fn bfs_paths(graph: &TopologyGraph, s: usize) -> ShortestPaths {
    let n = graph.num_groups();
    let mut dist: Vec<Option<usize>> = vec![None; n];
    let mut sigma = vec![0u64; n];
    let mut preds = vec![Vec::new(); n];
    let mut order = Vec::with_capacity(n);
    dist[s] = Some(0);
    sigma[s] = 1;
    let mut queue = VecDeque::from([s]);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        let dv = dist[v].expect("queued");
        for &w in graph.neighbors(v) {
            if dist[w].is_none() {
                dist[w] = Some(dv + 1);
                queue.push_back(w);
            }
            if dist[w] == Some(dv + 1) {
                sigma[w] += sigma[v];
                preds[w].push(v);
            }
        }
    }
    ShortestPaths { order, preds, sigma }
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then node index for determinism
        other.dist.total_cmp(&self.dist).then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra_paths(graph: &TopologyGraph, s: usize) -> ShortestPaths {
    let n = graph.num_groups();
    let mut dist: Vec<Option<f64>> = vec![None; n];
    let mut settled = vec![false; n];
    let mut sigma = vec![0u64; n];
    let mut preds = vec![Vec::new(); n];
    let mut order = Vec::with_capacity(n);
    let mut heap = BinaryHeap::new();
    sigma[s] = 1;
    dist[s] = Some(0.0);
    heap.push(HeapEntry { dist: 0.0, node: s });
    while let Some(HeapEntry { dist: d, node: v }) = heap.pop() {
        if settled[v] {
            continue;
        }
        if dist[v].is_some_and(|best| d > best) {
            continue;
        }
        settled[v] = true;
        order.push(v);
        for &w in graph.neighbors(v) {
            let alt = d + graph.edge_weight(v, w).expect("neighbor has an edge");
            match dist[w] {
                Some(best) if alt > best => {}
                Some(best) if alt == best => {
                    if !settled[w] {
                        sigma[w] += sigma[v];
                        preds[w].push(v);
                    }
                }
                _ => {
                    dist[w] = Some(alt);
                    sigma[w] = sigma[v];
                    preds[w] = vec![v];
                    heap.push(HeapEntry { dist: alt, node: w });
                }
            }
        }
    }
    ShortestPaths { order, preds, sigma }
}

fn membership(graph: &TopologyGraph, nodes: &[usize], what: &str) -> Result<Vec<bool>> {
    if nodes.is_empty() {
        return Err(Error::invalid(format!("{what} set is empty")));
    }
    let mut flags = vec![false; graph.num_groups()];
    for &v in nodes {
        if v >= graph.num_groups() {
            return Err(Error::invalid(format!(
                "{what} node {v} not in graph of {} groups",
                graph.num_groups()
            )));
        }
        flags[v] = true;
    }
    Ok(flags)
}

/// Source-target betweenness over unordered pairs `{s, t}` with one end in
/// `sources` and the other in `targets`, accumulated with Brandes'
/// dependency recursion. Endpoints never count as intermediates;
/// disconnected pairs contribute nothing.
pub fn betweenness_with<T: PathScalar>(
    graph: &TopologyGraph,
    sources: &[usize],
    targets: &[usize],
    metric: PathMetric,
) -> Result<Vec<T>> {
    let is_source = membership(graph, sources, "source")?;
    let is_target = membership(graph, targets, "target")?;
    let n = graph.num_groups();
    let half = T::one() / (T::one() + T::one());
    let both = |v: usize| is_source[v] && is_target[v];

    let mut centrality = vec![T::zero(); n];
    for s in (0..n).filter(|&v| is_source[v]) {
        let paths = match metric {
            PathMetric::Hops => bfs_paths(graph, s),
            PathMetric::Weighted => dijkstra_paths(graph, s),
        };
        // Pairs reachable as both (s, t) and (t, s) are split in half.
        let pair_weight = |t: usize| -> T {
            if t == s || !is_target[t] {
                T::zero()
            } else if both(s) && both(t) {
                half.clone()
            } else {
                T::one()
            }
        };
        let mut delta = vec![T::zero(); n];
        for &w in paths.order.iter().rev() {
            let carried = pair_weight(w) + delta[w].clone();
            let sigma_w = T::from_count(paths.sigma[w]);
            for &v in &paths.preds[w] {
                let share = T::from_count(paths.sigma[v]) / sigma_w.clone() * carried.clone();
                delta[v] = delta[v].clone() + share;
            }
            if w != s {
                centrality[w] = centrality[w].clone() + delta[w].clone();
            }
        }
    }
    Ok(centrality)
}

/// [`betweenness_with`] over `f64` with hop-count paths.
pub fn betweenness(graph: &TopologyGraph, sources: &[usize], targets: &[usize]) -> Result<Vec<f64>> {
    betweenness_with(graph, sources, targets, PathMetric::Hops)
}

/// Centrality of each training group for information flowing from the
/// training groups to the test groups. Returned in `train` order.
pub fn physical_centrality(
    graph: &TopologyGraph,
    train: &[usize],
    test: &[usize],
    metric: PathMetric,
) -> Result<Vec<f64>> {
    let c = betweenness_with::<f64>(graph, train, test, metric)?;
    Ok(train.iter().map(|&e| c[e]).collect())
}

/// Centrality of each training group over pairs of training groups.
/// Returned in `train` order.
pub fn data_centrality(graph: &TopologyGraph, train: &[usize], metric: PathMetric) -> Result<Vec<f64>> {
    if train.len() < 2 {
        return Err(Error::invalid("data centrality needs at least two training groups"));
    }
    let c = betweenness_with::<f64>(graph, train, train, metric)?;
    Ok(train.iter().map(|&e| c[e]).collect())
}

/// Prior over training groups with the centrality it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologicalPrior {
    pub mode: Provenance,
    pub centrality: Vec<f64>,
    pub prior: SimplexVector,
    pub group_names: Vec<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

/// `prior = softmax(centrality / temperature)`.
pub fn make_prior(centrality: &[f64], mode: Provenance, temperature: f64) -> Result<TopologicalPrior> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = centrality.iter().map(|c| c / temperature).collect();
    let prior = softmax(&scaled)?;
    Ok(TopologicalPrior {
        mode,
        centrality: centrality.to_vec(),
        prior,
        group_names: (0..centrality.len()).map(|i| format!("g{i}")).collect(),
        temperature,
    })
}

impl TopologicalPrior {
    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.centrality.len() {
            return Err(Error::invalid("one name per training group required"));
        }
        self.group_names = names;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.centrality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centrality.is_empty()
    }

    /// Uniform prior (all-zero centrality) over `m` groups.
    pub fn uniform(m: usize, mode: Provenance) -> Result<Self> {
        make_prior(&vec![0.0; m], mode, 1.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prior serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: TopologicalPrior = serde_json::from_str(s).map_err(|e| Error::format(format!("prior json: {e}")))?;
        if p.centrality.len() != p.prior.len() || p.group_names.len() != p.prior.len() {
            return Err(Error::format("prior json: field lengths disagree"));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_physical_topology;

    fn path(n: usize) -> TopologyGraph {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        load_physical_topology(n, &edges).unwrap()
    }

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn path_star_complete() {
        assert_eq!(betweenness(&path(3), &all(3), &all(3)).unwrap(), vec![0.0, 1.0, 0.0]);

        let star = load_physical_topology(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        assert_eq!(betweenness(&star, &all(4), &all(4)).unwrap(), vec![3.0, 0.0, 0.0, 0.0]);

        let k4_edges: Vec<_> = (0..4).flat_map(|a| ((a + 1)..4).map(move |b| (a, b))).collect();
        let k4 = load_physical_topology(4, &k4_edges).unwrap();
        assert_eq!(betweenness(&k4, &all(4), &all(4)).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn split_paths_share_credit() {
        // 4-cycle: the pair (0, 2) has two shortest paths, via 1 and via 3
        let c4 = load_physical_topology(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        assert_eq!(betweenness(&c4, &all(4), &all(4)).unwrap(), vec![0.5; 4]);
        let exact: Vec<Ratio<i128>> = betweenness_with(&c4, &all(4), &all(4), PathMetric::Hops).unwrap();
        assert!(exact.iter().all(|c| *c == Ratio::new(1, 2)));
    }

    #[test]
    fn physical_chain() {
        let g = path(3);
        assert_eq!(
            physical_centrality(&g, &[0, 1], &[2], PathMetric::Hops).unwrap(),
            vec![0.0, 1.0]
        );

        let k4_edges: Vec<_> = (0..4).flat_map(|a| ((a + 1)..4).map(move |b| (a, b))).collect();
        let k4 = load_physical_topology(4, &k4_edges).unwrap();
        assert_eq!(
            physical_centrality(&k4, &[0, 1, 2], &[3], PathMetric::Hops).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn data_path_ordering() {
        let c = data_centrality(&path(6), &all(6), PathMetric::Hops).unwrap();
        // endpoints 0, interior i*(5-i)
        assert_eq!(c, vec![0.0, 4.0, 6.0, 6.0, 4.0, 0.0]);
        assert_eq!(
            data_centrality(&path(2), &all(2), PathMetric::Hops).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(data_centrality(&path(2), &[0], PathMetric::Hops).is_err());
    }

    #[test]
    fn empty_sets_rejected_and_disconnected_pairs_ignored() {
        let g = load_physical_topology(4, &[(0, 1), (1, 2)]).unwrap();
        assert!(betweenness(&g, &[], &[1]).is_err());
        assert!(betweenness(&g, &[0], &[]).is_err());
        assert!(betweenness(&g, &[0], &[7]).is_err());
        assert_eq!(betweenness(&g, &all(4), &all(4)).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        let empty = load_physical_topology(3, &[]).unwrap();
        assert_eq!(betweenness(&empty, &all(3), &all(3)).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn weighted_metric_follows_weights() {
        // 0-1-2 cheap, 0-2 direct but expensive
        let g = TopologyGraph::from_edges(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 5.0)], Provenance::Data).unwrap();
        assert_eq!(
            betweenness_with::<f64>(&g, &all(3), &all(3), PathMetric::Hops).unwrap(),
            vec![0.0; 3]
        );
        assert_eq!(
            betweenness_with::<f64>(&g, &all(3), &all(3), PathMetric::Weighted).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        // on unit weights both metrics agree
        let c4 = load_physical_topology(5, &[(0, 1), (1, 2), (2, 3), (3, 0), (3, 4)]).unwrap();
        assert_eq!(
            betweenness_with::<f64>(&c4, &all(5), &all(5), PathMetric::Weighted).unwrap(),
            betweenness(&c4, &all(5), &all(5)).unwrap()
        );
    }

    #[test]
    fn prior_examples() {
        let p = make_prior(&[0.0; 4], Provenance::Physical, 1.0).unwrap();
        assert!(p.prior.as_slice().iter().all(|w| (w - 0.25).abs() < 1e-15));

        let p = make_prior(&[0.0, 1.0, 0.0], Provenance::Data, 1.0).unwrap();
        let want = [0.211_941_557_4, 0.576_116_885_1, 0.211_941_557_4];
        for (a, b) in p.prior.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(p.prior.argmax(), 1);

        let back = TopologicalPrior::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert!(make_prior(&[1.0], Provenance::Data, 0.0).is_err());
    }
}
