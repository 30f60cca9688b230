//! Grouped datasets: synthetic generators, CSV ingestion and splitting.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{load_physical_topology, TopologyGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Binary labels in {0, 1}.
    Classification,
    Regression,
}

/// One group (environment) of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub id: usize,
    pub name: String,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl Group {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn select(&self, rows: &[usize]) -> Group {
        Group {
            id: self.id,
            name: self.name.clone(),
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
        }
    }
}

/// Examples partitioned into groups, with disjoint train and test group
/// sets. Group ids are unique but need not be contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    task: Task,
    groups: Vec<Group>,
    train_ids: Vec<usize>,
    test_ids: Vec<usize>,
}

impl GroupedDataset {
    pub fn new(task: Task, groups: Vec<Group>, train_ids: Vec<usize>, test_ids: Vec<usize>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let dim = groups.first().map(|g| g.x.ncols());
        for g in &groups {
            if !seen.insert(g.id) {
                return Err(Error::invalid(format!("duplicate group id {}", g.id)));
            }
            if g.is_empty() {
                return Err(Error::invalid(format!("group {} ({}) is empty", g.id, g.name)));
            }
            if g.x.nrows() != g.y.len() {
                return Err(Error::invalid(format!(
                    "group {}: {} feature rows but {} labels",
                    g.id,
                    g.x.nrows(),
                    g.y.len()
                )));
            }
            if Some(g.x.ncols()) != dim {
                return Err(Error::invalid("groups have different feature dimensions"));
            }
            if task == Task::Classification && g.y.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::invalid(format!(
                    "group {}: classification labels must be 0 or 1",
                    g.id
                )));
            }
        }
        for id in train_ids.iter().chain(&test_ids) {
            if !seen.contains(id) {
                return Err(Error::invalid(format!("split references unknown group {id}")));
            }
        }
        let train: BTreeSet<_> = train_ids.iter().collect();
        if train.len() != train_ids.len() {
            return Err(Error::invalid("duplicate training group id"));
        }
        if test_ids.iter().any(|id| train.contains(id)) {
            return Err(Error::invalid("train and test groups overlap"));
        }
        Ok(GroupedDataset {
            task,
            groups,
            train_ids,
            test_ids,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn dim(&self) -> usize {
        self.groups.first().map_or(0, |g| g.x.ncols())
    }

    pub fn train_ids(&self) -> &[usize] {
        &self.train_ids
    }

    pub fn test_ids(&self) -> &[usize] {
        &self.test_ids
    }

    pub fn group(&self, id: usize) -> Option<&Group> {
        self.groups.iter().find(|g| g.id == id)
    }

    fn expect_group(&self, id: usize) -> &Group {
        self.group(id).expect("split ids are validated at construction")
    }

    /// Training groups in `train_ids` order.
    pub fn train_groups(&self) -> Vec<&Group> {
        self.train_ids.iter().map(|&id| self.expect_group(id)).collect()
    }

    pub fn test_groups(&self) -> Vec<&Group> {
        self.test_ids.iter().map(|&id| self.expect_group(id)).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    /// All training examples stacked in `train_ids` order.
    pub fn pooled_train(&self) -> (Array2<f64>, Array1<f64>) {
        let groups = self.train_groups();
        let xs: Vec<ArrayView2<'_, f64>> = groups.iter().map(|g| g.x.view()).collect();
        let ys: Vec<ArrayView1<'_, f64>> = groups.iter().map(|g| g.y.view()).collect();
        (
            ndarray::concatenate(Axis(0), &xs).expect("groups share a dimension"),
            ndarray::concatenate(Axis(0), &ys).expect("label vectors concatenate"),
        )
    }

    /// Same groups with a different train/test assignment.
    pub fn with_split(&self, train_ids: Vec<usize>, test_ids: Vec<usize>) -> Result<Self> {
        GroupedDataset::new(self.task, self.groups.clone(), train_ids, test_ids)
    }

    /// Writes the dataset as CSV: `group,split,x0..x{d-1},y`. Floats use the
    /// shortest representation that parses back to the same bits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write_csv_to<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.dim();
        let mut header = vec!["group".to_string(), "split".to_string()];
        header.extend((0..d).map(|j| format!("x{j}")));
        header.push("y".into());
        w.write_record(&header).map_err(csv_err)?;
        for g in &self.groups {
            let split = if self.train_ids.contains(&g.id) {
                "train"
            } else if self.test_ids.contains(&g.id) {
                "test"
            } else {
                "none"
            };
            for (row, y) in g.x.rows().into_iter().zip(g.y.iter()) {
                let mut rec = vec![g.name.clone(), split.to_string()];
                rec.extend(row.iter().map(|v| format!("{v:?}")));
                rec.push(format!("{y:?}"));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::format(e.to_string()))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format(e.to_string())
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: String,
    pub group_column: String,
    /// Optional column holding `train` / `test`; without it every group is a
    /// training group.
    #[serde(default)]
    pub split_column: Option<String>,
}

impl CsvSchema {
    /// Schema matching [`GroupedDataset::write_csv`] output.
    pub fn exported(dim: usize) -> Self {
        CsvSchema {
            feature_columns: (0..dim).map(|j| format!("x{j}")).collect(),
            label_column: "y".into(),
            group_column: "group".into(),
            split_column: Some("split".into()),
        }
    }
}

/// Loads a grouped dataset. Groups are numbered by first appearance.
pub fn load_csv(path: &Path, schema: &CsvSchema, task: Task) -> Result<GroupedDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_csv_from(file, schema, task).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_csv_from<R: std::io::Read>(reader: R, schema: &CsvSchema, task: Task) -> Result<GroupedDataset> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(csv_err)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(format!("missing column {name:?}")))
    };
    if schema.feature_columns.is_empty() {
        return Err(Error::format("schema lists no feature columns"));
    }
    let feature_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<_>>()?;
    let label_idx = column(&schema.label_column)?;
    let group_idx = column(&schema.group_column)?;
    let split_idx = schema.split_column.as_deref().map(column).transpose()?;

    struct Acc {
        name: String,
        x: Vec<f64>,
        y: Vec<f64>,
        split: Option<String>,
    }
    let mut order: Vec<Acc> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for (i, rec) in r.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let rec = rec.map_err(csv_err)?;
        let num = |col: usize| -> Result<f64> {
            let cell = rec.get(col).unwrap_or("");
            cell.trim().parse::<f64>().map_err(|_| {
                Error::format(format!(
                    "row {line}, column {:?}: not a number: {cell:?}",
                    &headers[col]
                ))
            })
        };
        let name = rec.get(group_idx).unwrap_or("").to_string();
        let slot = *index.entry(name.clone()).or_insert_with(|| {
            order.push(Acc {
                name: name.clone(),
                x: Vec::new(),
                y: Vec::new(),
                split: None,
            });
            order.len() - 1
        });
        for &c in &feature_idx {
            let v = num(c)?;
            order[slot].x.push(v);
        }
        let y = num(label_idx)?;
        order[slot].y.push(y);
        if let Some(c) = split_idx {
            let s = rec.get(c).unwrap_or("").trim().to_string();
            match &order[slot].split {
                None => order[slot].split = Some(s),
                Some(prev) if *prev != s => {
                    return Err(Error::format(format!(
                        "row {line}: group {name:?} assigned to both {prev:?} and {s:?}"
                    )))
                }
                _ => {}
            }
        }
    }

    let d = feature_idx.len();
    let mut groups = Vec::with_capacity(order.len());
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (id, acc) in order.into_iter().enumerate() {
        let n = acc.y.len();
        match acc.split.as_deref() {
            None | Some("train") => train.push(id),
            Some("test") => test.push(id),
            Some("none") | Some("") => {}
            Some(other) => return Err(Error::format(format!("group {:?}: unknown split {other:?}", acc.name))),
        }
        groups.push(Group {
            id,
            name: acc.name,
            x: Array2::from_shape_vec((n, d), acc.x).map_err(|e| Error::format(e.to_string()))?,
            y: Array1::from(acc.y),
        });
    }
    if groups.is_empty() {
        return Err(Error::format("no data rows"));
    }
    GroupedDataset::new(task, groups, train, test).map_err(|e| Error::format(e.to_string()))
}

/// Holds out a seeded fraction of every training group for validation.
///
/// Returns `(train, validation, test)`: training groups with their
/// remaining points, the held-out points (groups with nothing held out are
/// omitted), and the test groups untouched.
pub fn split_groups(
    dataset: &GroupedDataset,
    train_ids: &[usize],
    val_fraction: f64,
    seed: u64,
) -> Result<(GroupedDataset, GroupedDataset, GroupedDataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!(
            "validation fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    for id in train_ids {
        if dataset.group(*id).is_none() {
            return Err(Error::invalid(format!("unknown training group {id}")));
        }
    }
    let test_ids: Vec<usize> = dataset
        .groups()
        .iter()
        .map(|g| g.id)
        .filter(|id| !train_ids.contains(id))
        .collect();

    let mut train_groups = Vec::new();
    let mut val_groups = Vec::new();
    for &id in train_ids {
        let g = dataset.expect_group(id);
        let n = g.len();
        let n_val = (n as f64 * val_fraction).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (val_idx, fit_idx) = perm.split_at(n_val);
        let mut val_idx = val_idx.to_vec();
        let mut fit_idx = fit_idx.to_vec();
        val_idx.sort_unstable();
        fit_idx.sort_unstable();
        if fit_idx.is_empty() {
            return Err(Error::invalid(format!(
                "validation fraction leaves group {id} without training points"
            )));
        }
        train_groups.push(g.select(&fit_idx));
        if !val_idx.is_empty() {
            val_groups.push(g.select(&val_idx));
        }
    }
    let val_ids = val_groups.iter().map(|g| g.id).collect();
    let test_groups = test_ids.iter().map(|&id| dataset.expect_group(id).clone()).collect();
    Ok((
        GroupedDataset::new(dataset.task(), train_groups, train_ids.to_vec(), vec![])?,
        GroupedDataset::new(dataset.task(), val_groups, val_ids, vec![])?,
        GroupedDataset::new(dataset.task(), test_groups, vec![], test_ids)?,
    ))
}

/// Area-uniform point in the annulus `inner <= |x| <= inner + 1`.
fn annulus_point(rng: &mut ChaCha8Rng, inner: f64) -> (f64, f64) {
    let outer = inner + 1.0;
    let r = (rng.random::<f64>() * (outer * outer - inner * inner) + inner * inner).sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    (r * a.cos(), r * a.sin())
}

/// Rotating-boundary binary classification over a chain of groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgRingParams {
    pub groups: usize,
    pub n_per_group: usize,
    /// Boundary rotation between consecutive groups (radians).
    pub angle_step: f64,
    /// Standard deviation of Gaussian noise added to observed features.
    pub noise_sd: f64,
    pub seed: u64,
    /// First training group; training groups form a contiguous block.
    pub train_start: usize,
    pub train_count: usize,
    /// Group `e` samples the annulus with inner radius
    /// `radius_start + e * radius_step` and width 1. Both zero gives every
    /// group the unit disk.
    pub radius_start: f64,
    pub radius_step: f64,
    /// Optional group whose boundary is rotated by an extra amount.
    pub outlier_group: Option<usize>,
    pub outlier_rotation: f64,
}

impl Default for DgRingParams {
    fn default() -> Self {
        DgRingParams {
            groups: 15,
            n_per_group: 100,
            angle_step: PI / 18.0,
            noise_sd: 0.05,
            seed: 0,
            train_start: 0,
            train_count: 6,
            radius_start: 0.0,
            radius_step: 0.0,
            outlier_group: None,
            outlier_rotation: 0.0,
        }
    }
}

impl DgRingParams {
    /// Boundary angle of group `e`.
    pub fn boundary_angle(&self, e: usize) -> f64 {
        let extra = if self.outlier_group == Some(e) {
            self.outlier_rotation
        } else {
            0.0
        };
        e as f64 * self.angle_step + extra
    }

    /// Radii within `1e-9` of zero snap to zero.
    pub fn inner_radius(&self, e: usize) -> f64 {
        let r = self.radius_start + e as f64 * self.radius_step;
        if r.abs() < 1e-9 {
            0.0
        } else {
            r
        }
    }

    /// Shrinking annuli with an outlier first group: groups drift in
    /// feature space along the chain, and group 0 has a large radius and a
    /// boundary rotated away from its neighbors.
    pub fn benchmark(seed: u64) -> Self {
        DgRingParams {
            seed,
            angle_step: 10f64.to_radians(),
            radius_start: 7.0,
            radius_step: -0.5,
            outlier_group: Some(0),
            outlier_rotation: (-60f64).to_radians(),
            ..DgRingParams::default()
        }
    }
}

/// Group `e` labels a point `x` by `1[w_e . x > 0]` with
/// `w_e = (cos a_e, sin a_e)`; points are drawn uniformly from a disk or
/// annulus around the origin and observed with Gaussian noise. The physical
/// topology is the chain `e -- e+1`.
pub fn gen_dg_ring(params: &DgRingParams) -> Result<(GroupedDataset, TopologyGraph)> {
    let m = params.groups;
    if m < 3 {
        return Err(Error::invalid("DG ring needs at least 3 groups"));
    }
    if params.n_per_group < 2 {
        return Err(Error::invalid("DG ring needs at least 2 points per group"));
    }
    if !(params.noise_sd >= 0.0) || !params.angle_step.is_finite() {
        return Err(Error::invalid("noise must be nonnegative and parameters finite"));
    }
    let radii_ok = [params.inner_radius(0), params.inner_radius(m - 1)]
        .iter()
        .all(|r| r.is_finite() && *r >= 0.0);
    if !radii_ok {
        return Err(Error::invalid("annulus radii must be finite and nonnegative"));
    }
    if params.train_count == 0 || params.train_count >= m || params.train_start >= m {
        return Err(Error::invalid(format!(
            "training block ({} groups from {}) must leave test groups among {m}",
            params.train_count, params.train_start
        )));
    }
    if params.outlier_group.is_some_and(|g| g >= m) {
        return Err(Error::invalid("outlier group out of range"));
    }

    let mut groups = Vec::with_capacity(m);
    for e in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(e as u64);
        let angle = params.boundary_angle(e);
        let (wx, wy) = (angle.cos(), angle.sin());
        let inner = params.inner_radius(e);
        let n = params.n_per_group;
        let mut x = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let (px, py) = annulus_point(&mut rng, inner);
            y[i] = if wx * px + wy * py > 0.0 { 1.0 } else { 0.0 };
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            x[[i, 0]] = px + params.noise_sd * nx;
            x[[i, 1]] = py + params.noise_sd * ny;
        }
        groups.push(Group {
            id: e,
            name: format!("{e}"),
            x,
            y,
        });
    }
    let train: Vec<usize> = (0..params.train_count).map(|k| (params.train_start + k) % m).collect();
    let test: Vec<usize> = (0..m).filter(|e| !train.contains(e)).collect();
    let dataset = GroupedDataset::new(Task::Classification, groups, train, test)?;
    let edges: Vec<(usize, usize)> = (1..m).map(|e| (e - 1, e)).collect();
    let graph = load_physical_topology(m, &edges)?.with_names(dataset.names())?;
    Ok((dataset, graph))
}

/// Linear regression tasks on a grid whose coefficients drift with position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridParams {
    pub rows: usize,
    pub cols: usize,
    pub n_per_group: usize,
    pub dim: usize,
    /// Coefficient change per grid step.
    pub drift_per_hop: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Rows `0..train_rows` (the north) are training groups.
    pub train_rows: usize,
    /// Share of the drift that runs east-west rather than north-south.
    pub east_west_share: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            rows: 8,
            cols: 6,
            n_per_group: 50,
            dim: 4,
            drift_per_hop: 0.25,
            noise_sd: 1.0,
            seed: 0,
            train_rows: 4,
            east_west_share: 0.5,
        }
    }
}

impl GridParams {
    /// Small, high-dimensional groups with north-south drift only.
    pub fn benchmark(seed: u64) -> Self {
        GridParams {
            seed,
            n_per_group: 10,
            dim: 8,
            east_west_share: 0.0,
            ..GridParams::default()
        }
    }
}

fn fixed_direction(d: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(f).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Group at cell `(r, c)` draws `x ~ U[-1, 1]^d` and
/// `y = w_rc . x + b_rc + noise`, where `(w_rc, b_rc)` moves
/// `drift_per_hop` per grid step along fixed directions. The physical
/// topology is the 4-neighbor grid; the north `train_rows` rows train.
pub fn gen_grid_regression(params: &GridParams) -> Result<(GroupedDataset, TopologyGraph)> {
    let (rows, cols) = (params.rows, params.cols);
    if rows * cols < 4 || rows == 0 || cols == 0 {
        return Err(Error::invalid("grid needs at least 4 cells"));
    }
    if params.n_per_group == 0 || params.dim == 0 {
        return Err(Error::invalid("grid groups need points and features"));
    }
    if params.train_rows == 0 || params.train_rows >= rows {
        return Err(Error::invalid("train_rows must leave rows on both sides of the cut"));
    }
    if !(params.noise_sd >= 0.0) || !params.drift_per_hop.is_finite() {
        return Err(Error::invalid("noise must be nonnegative and drift finite"));
    }
    if !(0.0..=1.0).contains(&params.east_west_share) {
        return Err(Error::invalid("east_west_share must be in [0, 1]"));
    }
    let d = params.dim;
    // base coefficients and drift directions over (w, b)
    let base = fixed_direction(d + 1, |k| if k < d { 1.0 } else { 0.0 });
    let south = fixed_direction(d + 1, |k| if k % 2 == 0 { 1.0 } else { -1.0 });
    let east = fixed_direction(d + 1, |k| if k < d.div_ceil(2) { 1.0 } else { -1.0 });
    let ns = (1.0 - params.east_west_share).sqrt() * params.drift_per_hop;
    let ew = params.east_west_share.sqrt() * params.drift_per_hop;

    let mut groups = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            let coef: Vec<f64> = (0..=d)
                .map(|k| base[k] + ns * r as f64 * south[k] + ew * c as f64 * east[k])
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(id as u64);
            let n = params.n_per_group;
            let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
            let y = Array1::from_shape_fn(n, |i| {
                let signal: f64 = (0..d).map(|k| coef[k] * x[[i, k]]).sum::<f64>() + coef[d];
                let e: f64 = rng.sample(StandardNormal);
                signal + params.noise_sd * e
            });
            groups.push(Group {
                id,
                name: format!("r{r}c{c}"),
                x,
                y,
            });
        }
    }
    let train: Vec<usize> = (0..params.train_rows * cols).collect();
    let test: Vec<usize> = (params.train_rows * cols..rows * cols).collect();
    let dataset = GroupedDataset::new(Task::Regression, groups, train, test)?;

    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            if c + 1 < cols {
                edges.push((id, id + 1));
            }
            if r + 1 < rows {
                edges.push((id, id + cols));
            }
        }
    }
    let graph = load_physical_topology(rows * cols, &edges)?.with_names(dataset.names())?;
    Ok((dataset, graph))
}
