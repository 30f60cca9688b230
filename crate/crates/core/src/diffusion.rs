//! Data-driven topology between groups via diffusion Earth Mover's Distance.
//!
//! All groups are pooled into one point cloud. A Gaussian affinity over the
//! pooled points is normalized twice into a row-stochastic diffusion
//! operator `P`. Each group is then represented by the distribution of a
//! random walk started uniformly on its own points after `2^k` steps,
//! `k = 0..=K`, and two groups are compared by a weighted sum of l1 norms of
//! differences between consecutive scales.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::Predictor;

/// Default largest scale index (walk lengths 1, 2, 4, 8, 16).
pub const DEFAULT_MAX_SCALE: usize = 4;
/// Default weighting exponent between long- and short-range terms.
pub const DEFAULT_ALPHA: f64 = 0.5;

fn squared_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_features(features: ArrayView2<'_, f64>) -> Result<()> {
    if features.nrows() < 2 {
        return Err(Error::invalid("need at least two points"));
    }
    if features.ncols() == 0 {
        return Err(Error::invalid("features need at least one column"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature value"));
    }
    Ok(())
}

/// Gaussian affinity `K_ij = exp(-||f_i - f_j||^2 / sigma2)`.
pub fn rbf_affinity(features: ArrayView2<'_, f64>, sigma2: f64) -> Result<DenseMatrix> {
    check_features(features)?;
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::invalid(format!("kernel scale must be positive, got {sigma2}")));
    }
    let n = features.nrows();
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let v = (-squared_distance(features.row(i), features.row(j)) / sigma2).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    DenseMatrix::from_array(k)
}

/// Median of all pairwise squared distances.
///
/// When more than half the pairs coincide the plain median is zero; the
/// median of the nonzero pairs is used instead so the kernel stays usable.
pub fn median_heuristic_sigma2(features: ArrayView2<'_, f64>) -> Result<f64> {
    check_features(features)?;
    let n = features.nrows();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(squared_distance(features.row(i), features.row(j)));
        }
    }
    let med = median(&mut d);
    if med > 0.0 {
        return Ok(med);
    }
    let mut positive: Vec<f64> = d.into_iter().filter(|v| *v > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::degenerate("all points coincide; kernel scale undefined"));
    }
    Ok(median(&mut positive))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Row-stochastic Markov operator built from a symmetric affinity.
#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    p: DenseMatrix,
    sigma2: Option<f64>,
}

impl DiffusionOperator {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.p
    }

    pub fn n(&self) -> usize {
        self.p.rows()
    }

    /// Kernel scale the affinity was built with, when known.
    pub fn sigma2(&self) -> Option<f64> {
        self.sigma2
    }

    /// Affinity plus operator in one step.
    pub fn from_features(features: ArrayView2<'_, f64>, sigma2: f64) -> Result<Self> {
        let mut op = diffusion_operator(&rbf_affinity(features, sigma2)?)?;
        op.sigma2 = Some(sigma2);
        Ok(op)
    }
}

/// `Q = diag(K 1)`, `M = Q^-1 K Q^-1`, `D = diag(M 1)`, `P = D^-1 M`.
pub fn diffusion_operator(k: &DenseMatrix) -> Result<DiffusionOperator> {
    let n = k.rows();
    if k.cols() != n {
        return Err(Error::invalid("affinity matrix must be square"));
    }
    if k.entries().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("affinity entries must be finite and nonnegative"));
    }
    if k.max_asymmetry().unwrap_or(0.0) > 1e-9 {
        return Err(Error::invalid("affinity matrix must be symmetric"));
    }
    let q = k.row_sums();
    if let Some(i) = q.iter().position(|s| *s <= 0.0) {
        return Err(Error::degenerate(format!("point {i} has zero total affinity")));
    }
    let kv = k.view();
    let m = Array2::from_shape_fn((n, n), |(i, j)| kv[[i, j]] / (q[i] * q[j]));
    let d: Vec<f64> = m.rows().into_iter().map(|r| r.sum()).collect();
    if let Some(i) = d.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::degenerate(format!("point {i} is isolated after normalization")));
    }
    let p = Array2::from_shape_fn((n, n), |(i, j)| m[[i, j]] / d[i]);
    Ok(DiffusionOperator {
        p: DenseMatrix::from_array(p)?,
        sigma2: None,
    })
}

/// Cached dyadic powers `P^(2^k)` for `k = 0..=max_scale`, computed by
/// repeated squaring and shared across groups.
#[derive(Debug, Clone)]
pub struct DyadicPowers {
    powers: Vec<DenseMatrix>,
}

impl DyadicPowers {
    pub fn new(op: &DiffusionOperator, max_scale: usize) -> Result<Self> {
        let mut powers = Vec::with_capacity(max_scale + 1);
        powers.push(op.p.clone());
        for k in 0..max_scale {
            let next = powers[k].matmul(&powers[k])?;
            powers.push(next);
        }
        Ok(DyadicPowers { powers })
    }

    pub fn max_scale(&self) -> usize {
        self.powers.len() - 1
    }

    pub fn n(&self) -> usize {
        self.powers[0].rows()
    }

    /// `P^(2^k)`.
    pub fn power(&self, k: usize) -> &DenseMatrix {
        &self.powers[k]
    }

    /// Multiscale densities for the group marked by `indicator`.
    pub fn densities(&self, group_id: usize, indicator: &[bool]) -> Result<MultiscaleDensity> {
        let n = self.n();
        if indicator.len() != n {
            return Err(Error::invalid(format!(
                "indicator has {} entries for {n} points",
                indicator.len()
            )));
        }
        let members: Vec<usize> = (0..n).filter(|&i| indicator[i]).collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("group {group_id} has no points")));
        }
        let inv = 1.0 / members.len() as f64;
        // Walk distribution after t steps from a uniform start on the group:
        // the mean of the group's rows of P^t.
        let scales = self
            .powers
            .iter()
            .map(|pt| {
                let view = pt.view();
                let mut mu = vec![0.0; n];
                for &i in &members {
                    for (m, v) in mu.iter_mut().zip(view.row(i)) {
                        *m += v;
                    }
                }
                mu.iter_mut().for_each(|m| *m *= inv);
                mu
            })
            .collect();
        Ok(MultiscaleDensity { group_id, scales })
    }
}

/// Densities of one group at scales `2^0 .. 2^K` over all pooled points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleDensity {
    pub group_id: usize,
    pub scales: Vec<Vec<f64>>,
}

impl MultiscaleDensity {
    pub fn max_scale(&self) -> usize {
        self.scales.len() - 1
    }
}

/// Densities for one group; `indicator` holds 0/1 membership flags.
pub fn multiscale_densities(op: &DiffusionOperator, indicator: &[f64], max_scale: usize) -> Result<MultiscaleDensity> {
    if indicator.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::invalid("group indicator must be 0/1"));
    }
    let flags: Vec<bool> = indicator.iter().map(|v| *v == 1.0).collect();
    DyadicPowers::new(op, max_scale)?.densities(0, &flags)
}

/// Multiscale l1 distance between two density stacks:
///
/// `sum_{k<K} 2^{-(K-k-1) alpha} ||(a_{k+1}-a_k) - (b_{k+1}-b_k)||_1 + ||a_K - b_K||_1`.
pub fn diffusion_emd(a: &MultiscaleDensity, b: &MultiscaleDensity, alpha: f64) -> Result<f64> {
    if a.scales.len() != b.scales.len() || a.scales.is_empty() {
        return Err(Error::invalid("density stacks have different scale counts"));
    }
    let n = a.scales[0].len();
    if a.scales.iter().chain(&b.scales).any(|s| s.len() != n) {
        return Err(Error::invalid("density stacks have different point counts"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let kmax = a.max_scale();
    let mut total = 0.0;
    for k in 0..kmax {
        let weight = 2f64.powf(-((kmax - k - 1) as f64) * alpha);
        let l1: f64 = (0..n)
            .map(|i| {
                let da = a.scales[k + 1][i] - a.scales[k][i];
                let db = b.scales[k + 1][i] - b.scales[k][i];
                (da - db).abs()
            })
            .sum();
        total += weight * l1;
    }
    total += a.scales[kmax]
        .iter()
        .zip(&b.scales[kmax])
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>();
    Ok(total)
}

/// How the kernel scale is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelScale {
    Median,
    Fixed(f64),
}

/// Symmetric matrix of diffusion EMDs between every pair of groups.
pub fn pairwise_group_distances(
    groups: &[ArrayView2<'_, f64>],
    scale: KernelScale,
    alpha: f64,
    max_scale: usize,
) -> Result<DenseMatrix> {
    let m = groups.len();
    if m < 2 {
        return Err(Error::invalid("need at least two groups"));
    }
    if let Some(i) = groups.iter().position(|g| g.nrows() == 0) {
        return Err(Error::invalid(format!("group {i} is empty")));
    }
    let dim = groups[0].ncols();
    if groups.iter().any(|g| g.ncols() != dim) {
        return Err(Error::invalid("groups have different feature dimensions"));
    }
    let pooled = ndarray::concatenate(ndarray::Axis(0), groups).map_err(|e| Error::invalid(e.to_string()))?;
    let sigma2 = match scale {
        KernelScale::Median => median_heuristic_sigma2(pooled.view())?,
        KernelScale::Fixed(s) => s,
    };
    let op = DiffusionOperator::from_features(pooled.view(), sigma2)?;
    let powers = DyadicPowers::new(&op, max_scale)?;

    let n = pooled.nrows();
    let mut start = 0;
    let mut densities = Vec::with_capacity(m);
    for (gid, g) in groups.iter().enumerate() {
        let mut indicator = vec![false; n];
        indicator[start..start + g.nrows()].iter_mut().for_each(|f| *f = true);
        start += g.nrows();
        densities.push(powers.densities(gid, &indicator)?);
    }

    let mut dist = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let d = diffusion_emd(&densities[i], &densities[j], alpha)?;
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    DenseMatrix::from_array(dist)
}

/// Features used for the affinity: last hidden layer of `model`, or the raw
/// inputs for a linear model.
pub fn extract_features(model: &Predictor, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    model.hidden_features(x)
}
