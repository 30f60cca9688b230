//! Probability-simplex vectors and the operations that produce them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the unit-sum invariant.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A vector of nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    /// Validates `weights` against the simplex invariants.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("simplex vector must be non-empty"));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::invalid(format!(
                "simplex weights must be finite and nonnegative, got {w}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("simplex weights must sum to 1, got {sum}")));
        }
        Ok(SimplexVector(weights))
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("simplex dimension must be at least 1"));
        }
        Ok(SimplexVector(vec![1.0 / m as f64; m]))
    }

    /// The `i`-th vertex of the `m`-dimensional simplex.
    pub fn vertex(m: usize, i: usize) -> Result<Self> {
        if i >= m {
            return Err(Error::invalid(format!("vertex {i} out of range for m = {m}")));
        }
        let mut w = vec![0.0; m];
        w[i] = 1.0;
        Ok(SimplexVector(w))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest weight; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        SimplexVector::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(s: SimplexVector) -> Vec<f64> {
        s.0
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("{what}: empty vector")));
    }
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::invalid(format!("{what}: entry {i} is not finite ({x})")));
    }
    Ok(())
}

/// Euclidean projection of `v` onto the probability simplex.
///
/// Sort-and-threshold: with `u` sorted in decreasing order, the support size
/// is the largest `j` with `u_j > (sum_{i<=j} u_i - 1) / j`, and the result is
/// `max(v - tau, 0)` for the matching threshold `tau`.
pub fn project_to_simplex(v: &[f64]) -> Result<SimplexVector> {
    check_finite(v, "project_to_simplex")?;

    let mut u = v.to_vec();
    u.sort_unstable_by(|a, b| b.total_cmp(a));

    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }

    let mut x: Vec<f64> = v.iter().map(|&vi| (vi - tau).max(0.0)).collect();

    // Rounding in the threshold can leave the sum a few ulps off; rescaling
    // the support keeps the unit-sum invariant tight without moving zeros.
    let sum: f64 = x.iter().sum();
    if sum > 0.0 && sum != 1.0 {
        x.iter_mut().for_each(|xi| *xi /= sum);
    }
    Ok(SimplexVector(x))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<SimplexVector> {
    check_finite(v, "softmax")?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(SimplexVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Squared-distance penalty `D(q||p) = 0.5 * ||q - p||^2` and its gradient
/// with respect to `q`.
pub fn prior_distance(q: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
    if q.len() != p.len() {
        return Err(Error::invalid(format!(
            "prior_distance: length mismatch ({} vs {})",
            q.len(),
            p.len()
        )));
    }
    let grad: Vec<f64> = q.iter().zip(p).map(|(a, b)| a - b).collect();
    let value = 0.5 * grad.iter().map(|d| d * d).sum::<f64>();
    Ok((value, grad))
}
