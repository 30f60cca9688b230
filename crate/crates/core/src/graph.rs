//! Undirected graphs over groups: physical adjacency or learned from
//! pairwise distances.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Physical,
    Data,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Physical => "physical",
            Provenance::Data => "data",
        })
    }
}

/// Undirected simple graph whose nodes are groups `0..num_groups`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyGraph {
    num_groups: usize,
    /// Keyed by `(low, high)` endpoint pair.
    edges: BTreeMap<(usize, usize), f64>,
    provenance: Provenance,
    names: Vec<String>,
    distances: Option<DenseMatrix>,
    adjacency: Vec<Vec<usize>>,
}

fn default_names(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("g{i}")).collect()
}

impl TopologyGraph {
    /// Builds a graph from weighted edges. Duplicate edges collapse to one
    /// (the last weight wins).
    pub fn from_edges(
        num_groups: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (a, b, w) in edges {
            if a >= num_groups || b >= num_groups {
                return Err(Error::format(format!(
                    "edge ({a}, {b}) references a node outside 0..{num_groups}"
                )));
            }
            if a == b {
                return Err(Error::format(format!("self-loop on node {a}")));
            }
            if !w.is_finite() {
                return Err(Error::format(format!("edge ({a}, {b}) has non-finite weight")));
            }
            map.insert((a.min(b), a.max(b)), w);
        }
        let mut adjacency = vec![Vec::new(); num_groups];
        for &(a, b) in map.keys() {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        adjacency.iter_mut().for_each(|n| n.sort_unstable());
        Ok(TopologyGraph {
            num_groups,
            edges: map,
            provenance,
            names: default_names(num_groups),
            distances: None,
            adjacency,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_groups {
            return Err(Error::invalid(format!(
                "{} names for {} groups",
                names.len(),
                self.num_groups
            )));
        }
        self.names = names;
        Ok(self)
    }

    pub fn with_distance_matrix(mut self, d: DenseMatrix) -> Result<Self> {
        check_distance_matrix(&d, self.num_groups)?;
        self.distances = Some(d);
        Ok(self)
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn distance_matrix(&self) -> Option<&DenseMatrix> {
        self.distances.as_ref()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(low, high, weight)` in sorted order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.edges.iter().map(|(&(a, b), &w)| (a, b, w))
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains_key(&(a.min(b), a.max(b)))
    }

    pub fn edge_weight(&self, a: usize, b: usize) -> Option<f64> {
        self.edges.get(&(a.min(b), a.max(b))).copied()
    }

    /// Sorted neighbor list.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    /// Unweighted hop distances from `source`; `None` for unreachable nodes.
    pub fn bfs_hops(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_groups];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v].expect("queued nodes have distances");
            for &w in &self.adjacency[v] {
                if dist[w].is_none() {
                    dist[w] = Some(dv + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Graphviz rendering: one `graph` block, nodes labelled by group name,
    /// edges carrying a `weight` attribute.
    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "graph topology {{");
        let _ = writeln!(s, "  // provenance: {}", self.provenance);
        for (i, name) in self.names.iter().enumerate() {
            let _ = writeln!(s, "  {i} [label=\"{}\"];", name.replace('"', "\\\""));
        }
        for (a, b, w) in self.edges() {
            let _ = writeln!(s, "  {a} -- {b} [weight={w}];");
        }
        s.push_str("}\n");
        s
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            num_groups: self.num_groups,
            provenance: self.provenance,
            group_names: self.names.clone(),
            edges: self.edges().collect(),
            distance_matrix: self.distances.as_ref().map(|d| {
                (0..d.rows())
                    .map(|i| (0..d.cols()).map(|j| d.get(i, j)).collect())
                    .collect()
            }),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph serializes")
    }

    pub fn from_document(doc: GraphDocument) -> Result<Self> {
        let mut g =
            TopologyGraph::from_edges(doc.num_groups, doc.edges, doc.provenance)?.with_names(doc.group_names)?;
        if let Some(rows) = doc.distance_matrix {
            let m = rows.len();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            g = g.with_distance_matrix(DenseMatrix::from_row_major(m, m, flat)?)?;
        }
        Ok(g)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: GraphDocument = serde_json::from_str(s).map_err(|e| Error::format(format!("topology json: {e}")))?;
        TopologyGraph::from_document(doc)
    }

    /// Induced subgraph on `nodes`, relabelled `0..nodes.len()` in the given
    /// order.
    pub fn induced(&self, nodes: &[usize]) -> Result<TopologyGraph> {
        let mut index = vec![None; self.num_groups];
        for (new, &old) in nodes.iter().enumerate() {
            if old >= self.num_groups {
                return Err(Error::invalid(format!("node {old} not in graph")));
            }
            index[old] = Some(new);
        }
        let edges = self.edges().filter_map(|(a, b, w)| Some((index[a]?, index[b]?, w)));
        TopologyGraph::from_edges(nodes.len(), edges, self.provenance)?
            .with_names(nodes.iter().map(|&i| self.names[i].clone()).collect())
    }
}

/// JSON mirror of a [`TopologyGraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub num_groups: usize,
    pub provenance: Provenance,
    pub group_names: Vec<String>,
    pub edges: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_matrix: Option<Vec<Vec<f64>>>,
}

fn check_distance_matrix(d: &DenseMatrix, m: usize) -> Result<()> {
    if d.rows() != m || d.cols() != m {
        return Err(Error::invalid(format!(
            "distance matrix is {}x{}, expected {m}x{m}",
            d.rows(),
            d.cols()
        )));
    }
    if d.max_asymmetry().unwrap_or(f64::INFINITY) > 1e-9 {
        return Err(Error::invalid("distance matrix is not symmetric"));
    }
    if (0..m).any(|i| d.get(i, i) != 0.0) {
        return Err(Error::invalid("distance matrix must have a zero diagonal"));
    }
    Ok(())
}

/// Symmetrized k-nearest-neighbor graph. Ties in distance go to the lower
/// node index.
pub fn build_knn_graph(distances: &DenseMatrix, k: usize) -> Result<TopologyGraph> {
    let m = distances.rows();
    if k == 0 || k >= m {
        return Err(Error::invalid(format!("knn k must be in 1..{m}, got {k}")));
    }
    check_distance_matrix(distances, m)?;
    let mut edges = Vec::new();
    for i in 0..m {
        let mut others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| distances.get(i, a).total_cmp(&distances.get(i, b)).then(a.cmp(&b)));
        edges.extend(others[..k].iter().map(|&j| (i, j, distances.get(i, j))));
    }
    TopologyGraph::from_edges(m, edges, Provenance::Data)?.with_distance_matrix(distances.clone())
}

/// A physical topology: unit-weight edges over a declared group count.
pub fn load_physical_topology(num_groups: usize, edges: &[(usize, usize)]) -> Result<TopologyGraph> {
    TopologyGraph::from_edges(
        num_groups,
        edges.iter().map(|&(a, b)| (a, b, 1.0)),
        Provenance::Physical,
    )
}

#[derive(Debug, Deserialize)]
struct EdgeListJson {
    num_groups: usize,
    edges: Vec<(usize, usize)>,
}

/// Parses a physical topology from either a JSON document
/// `{"num_groups": m, "edges": [[i, j], ...]}` or a plain-text edge list.
///
/// The text form is one edge per line (`i j` or `i,j`), with `#` comments and
/// a mandatory `num_groups <m>` line.
pub fn parse_physical_topology(text: &str) -> Result<TopologyGraph> {
    if text.trim_start().starts_with('{') {
        let doc: EdgeListJson =
            serde_json::from_str(text).map_err(|e| Error::format(format!("edge list json: {e}")))?;
        return load_physical_topology(doc.num_groups, &doc.edges);
    }

    let mut num_groups = None;
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parse = |f: &str| {
            f.parse::<usize>()
                .map_err(|_| Error::format(format!("line {}: expected a node id, got {f:?}", lineno + 1)))
        };
        match fields.as_slice() {
            ["num_groups", m] => num_groups = Some(parse(m)?),
            [a, b] => edges.push((parse(a)?, parse(b)?)),
            _ => {
                return Err(Error::format(format!(
                    "line {}: expected `i j` or `num_groups m`, got {line:?}",
                    lineno + 1
                )))
            }
        }
    }
    let m = num_groups.ok_or_else(|| Error::format("edge list is missing a `num_groups` line"))?;
    load_physical_topology(m, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_distances(pos: &[f64]) -> DenseMatrix {
        let m = pos.len();
        let entries = (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| (pos[i] - pos[j]).abs())
            .collect();
        DenseMatrix::from_row_major(m, m, entries).unwrap()
    }

    fn edge_set(g: &TopologyGraph) -> Vec<(usize, usize)> {
        g.edges().map(|(a, b, _)| (a, b)).collect()
    }

    #[test]
    fn physical_path_and_empty() {
        let g = load_physical_topology(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(edge_set(&g), vec![(0, 1), (1, 2)]);
        assert_eq!(g.provenance(), Provenance::Physical);
        assert!(g.edges().all(|(_, _, w)| w == 1.0));

        let empty = load_physical_topology(4, &[]).unwrap();
        assert_eq!(empty.edge_count(), 0);
    }

    #[test]
    fn duplicates_collapse_and_errors() {
        let g = load_physical_topology(3, &[(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert!(matches!(load_physical_topology(3, &[(0, 3)]), Err(Error::Format(_))));
        assert!(matches!(load_physical_topology(3, &[(2, 2)]), Err(Error::Format(_))));
    }

    #[test]
    fn knn_examples() {
        let tri = line_distances(&[0.0, 1.0, 5.0]);
        let g = build_knn_graph(&tri, 2).unwrap();
        assert_eq!(edge_set(&g), vec![(0, 1), (0, 2), (1, 2)]);

        let chain = build_knn_graph(&line_distances(&[0.0, 1.0, 2.0, 3.0]), 1).unwrap();
        assert_eq!(edge_set(&chain), vec![(0, 1), (1, 2), (2, 3)]);
        assert!(chain.bfs_hops(0).iter().all(|d| d.is_some()));
        assert_eq!(chain.provenance(), Provenance::Data);
        assert_eq!(chain.edge_weight(1, 2), Some(1.0));

        assert!(build_knn_graph(&tri, 0).is_err());
        assert!(build_knn_graph(&tri, 3).is_err());
    }

    #[test]
    fn knn_ties_go_to_lower_index() {
        // node 1 is equidistant from 0 and 2
        let g = build_knn_graph(&line_distances(&[0.0, 1.0, 2.0, 10.0]), 1).unwrap();
        assert!(g.has_edge(0, 1));
        assert!(g.has_edge(1, 2));
        assert!(g.has_edge(2, 3));
        let again = build_knn_graph(&line_distances(&[0.0, 1.0, 2.0, 10.0]), 1).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn knn_rejects_bad_matrices() {
        let bad = DenseMatrix::from_row_major(2, 2, vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        assert!(build_knn_graph(&bad, 1).is_err());
        let diag = DenseMatrix::from_row_major(2, 2, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(build_knn_graph(&diag, 1).is_err());
    }

    #[test]
    fn text_and_json_edge_lists() {
        let text = "# chain\nnum_groups 3\n0 1\n1,2\n";
        let g = parse_physical_topology(text).unwrap();
        assert_eq!(edge_set(&g), vec![(0, 1), (1, 2)]);
        let json = r#"{"num_groups": 3, "edges": [[0, 1], [1, 2]]}"#;
        assert_eq!(parse_physical_topology(json).unwrap(), g);
        assert!(parse_physical_topology("0 1\n").is_err());
        assert!(parse_physical_topology("num_groups 2\n0 x\n").is_err());
    }

    #[test]
    fn dot_and_json_mirror() {
        let g = build_knn_graph(&line_distances(&[0.0, 1.0, 3.0]), 1)
            .unwrap()
            .with_names(vec!["a".into(), "b".into(), "c".into()])
            .unwrap();
        let dot = g.to_dot();
        assert!(dot.starts_with("graph topology {"));
        assert_eq!(dot.matches(" -- ").count(), g.edge_count());
        assert!(dot.contains("label=\"b\""));
        assert!(dot.contains("weight=2"));
        let back = TopologyGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        assert!(back.distance_matrix().is_some());
    }

    #[test]
    fn induced_subgraph_relabels() {
        let g = load_physical_topology(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let sub = g.induced(&[3, 2, 0]).unwrap();
        assert_eq!(edge_set(&sub), vec![(0, 1)]);
        assert_eq!(sub.names(), &["g3", "g2", "g0"]);
    }
}
