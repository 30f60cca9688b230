//! Small differentiable predictors with exact analytic gradients.
//!
//! Two architectures are supported: an affine map and a network with one
//! hidden layer. Parameters live in one flat vector laid out layer by layer,
//! each layer as its row-major `fan_in x fan_out` weight matrix followed by
//! its bias.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Arch {
    Linear,
    Mlp { hidden: usize, activation: Activation },
}

impl Arch {
    pub fn param_count(self, input_dim: usize, output_dim: usize) -> usize {
        match self {
            Arch::Linear => input_dim * output_dim + output_dim,
            Arch::Mlp { hidden, .. } => input_dim * hidden + hidden + hidden * output_dim + output_dim,
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Arch::Linear)
    }
}

/// Per-example loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Binary cross-entropy on a logit; labels in {0, 1}.
    Logistic,
    /// `(f - y)^2`, no one-half factor.
    Squared,
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LossKind {
    /// Loss value and derivative with respect to the prediction.
    pub fn value_and_slope(self, pred: f64, target: f64) -> (f64, f64) {
        match self {
            LossKind::Squared => {
                let r = pred - target;
                (r * r, 2.0 * r)
            }
            LossKind::Logistic => {
                // sign +1 for label 1, -1 for label 0
                let s = 2.0 * target - 1.0;
                let v = softplus(-s * pred);
                (v, -s * sigmoid(-s * pred))
            }
        }
    }

    fn check_targets(self, y: ArrayView1<'_, f64>) -> Result<()> {
        if let Some(t) = y.iter().find(|t| !t.is_finite()) {
            return Err(Error::invalid(format!("non-finite target {t}")));
        }
        if self == LossKind::Logistic {
            if let Some(t) = y.iter().find(|t| **t != 0.0 && **t != 1.0) {
                return Err(Error::invalid(format!(
                    "logistic loss needs labels in {{0, 1}}, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// A predictor: architecture plus flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    arch: Arch,
    input_dim: usize,
    output_dim: usize,
    theta: Vec<f64>,
}

/// Layer-wise views over a flat parameter vector.
struct Layers<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    second: Option<(ArrayView2<'a, f64>, ArrayView1<'a, f64>, Activation)>,
}

impl Predictor {
    pub fn new(arch: Arch, input_dim: usize, output_dim: usize, theta: Vec<f64>) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if let Arch::Mlp { hidden: 0, .. } = arch {
            return Err(Error::invalid("hidden width must be positive"));
        }
        let expected = arch.param_count(input_dim, output_dim);
        if theta.len() != expected {
            return Err(Error::invalid(format!(
                "{arch:?} with dims ({input_dim}, {output_dim}) needs {expected} parameters, got {}",
                theta.len()
            )));
        }
        Ok(Predictor {
            arch,
            input_dim,
            output_dim,
            theta,
        })
    }

    pub fn zeros(arch: Arch, input_dim: usize, output_dim: usize) -> Result<Self> {
        Predictor::new(
            arch,
            input_dim,
            output_dim,
            vec![0.0; arch.param_count(input_dim, output_dim)],
        )
    }

    /// Seeded uniform initialization in `[-a, a]` with `a = 1/sqrt(fan_in)`
    /// per layer.
    pub fn init(arch: Arch, input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        let mut model = Predictor::zeros(arch, input_dim, output_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for v in slice.iter_mut() {
                *v = rng.random_range(-a..=a);
            }
        };
        match arch {
            Arch::Linear => fill(&mut model.theta, input_dim),
            Arch::Mlp { hidden, .. } => {
                let split = input_dim * hidden + hidden;
                let (first, second) = model.theta.split_at_mut(split);
                fill(first, input_dim);
                fill(second, hidden);
            }
        }
        Ok(model)
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.theta.len(),
                theta.len()
            )));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        let mut m = self.clone();
        m.set_theta(theta)?;
        Ok(m)
    }

    fn layers(&self) -> Layers<'_> {
        let d = self.input_dim;
        let o = self.output_dim;
        let t = &self.theta[..];
        fn mat(s: &[f64], r: usize, c: usize) -> ArrayView2<'_, f64> {
            ArrayView2::from_shape((r, c), s).expect("layer shape matches parameter layout")
        }
        match self.arch {
            Arch::Linear => Layers {
                w1: mat(&t[..d * o], d, o),
                b1: ArrayView1::from(&t[d * o..]),
                second: None,
            },
            Arch::Mlp { hidden: h, activation } => {
                let w1_end = d * h;
                let b1_end = w1_end + h;
                let w2_end = b1_end + h * o;
                Layers {
                    w1: mat(&t[..w1_end], d, h),
                    b1: ArrayView1::from(&t[w1_end..b1_end]),
                    second: Some((
                        mat(&t[b1_end..w2_end], h, o),
                        ArrayView1::from(&t[w2_end..]),
                        activation,
                    )),
                }
            }
        }
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::invalid(format!(
                "model expects {} input columns, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("NaN in model input"));
        }
        Ok(())
    }

    /// Outputs (`n x output_dim`): logits for classification, real values
    /// for regression.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let layers = self.layers();
        let z1 = x.dot(&layers.w1) + layers.b1;
        Ok(match layers.second {
            None => z1,
            Some((w2, b2, act)) => z1.mapv(|z| act.apply(z)).dot(&w2) + b2,
        })
    }

    /// Single-output convenience wrapper around [`Predictor::forward`].
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if self.output_dim != 1 {
            return Err(Error::invalid("predict needs a single-output model"));
        }
        Ok(self.forward(x)?.column(0).to_owned())
    }

    /// Last hidden-layer activations; the raw inputs for a linear model.
    pub fn hidden_features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let layers = self.layers();
        Ok(match layers.second {
            None => x.to_owned(),
            Some((_, _, act)) => (x.dot(&layers.w1) + layers.b1).mapv(|z| act.apply(z)),
        })
    }

    fn check_batch(&self, x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, loss: LossKind) -> Result<()> {
        self.check_input(x)?;
        if self.output_dim != 1 {
            return Err(Error::invalid("losses are defined for single-output models"));
        }
        if x.nrows() == 0 || x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "batch needs matching non-empty inputs and targets ({} vs {})",
                x.nrows(),
                y.len()
            )));
        }
        loss.check_targets(y)
    }

    /// Mean per-example loss over the batch.
    pub fn batch_loss(&self, x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, loss: LossKind) -> Result<f64> {
        self.check_batch(x, y, loss)?;
        let out = self.forward(x)?;
        let total: f64 = out
            .column(0)
            .iter()
            .zip(y.iter())
            .map(|(&f, &t)| loss.value_and_slope(f, t).0)
            .sum();
        Ok(total / y.len() as f64)
    }

    /// Gradient of [`Predictor::batch_loss`] with respect to `theta`.
    pub fn batch_grad(&self, x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, loss: LossKind) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(x, y, loss)?.1)
    }

    /// Mean loss and its gradient in one forward/backward pass.
    pub fn loss_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        y: ArrayView1<'_, f64>,
        loss: LossKind,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_batch(x, y, loss)?;
        let n = y.len() as f64;
        let layers = self.layers();
        let z1 = x.dot(&layers.w1) + layers.b1;

        let (out, hidden) = match &layers.second {
            None => (z1.clone(), None),
            Some((w2, b2, act)) => {
                let a = z1.mapv(|z| act.apply(z));
                (a.dot(w2) + b2, Some(a))
            }
        };

        let mut value = 0.0;
        let mut dout = Array2::<f64>::zeros((y.len(), 1));
        for (i, (&f, &t)) in out.column(0).iter().zip(y.iter()).enumerate() {
            let (v, s) = loss.value_and_slope(f, t);
            value += v;
            dout[[i, 0]] = s / n;
        }
        value /= n;

        let mut grad = Vec::with_capacity(self.theta.len());
        match (&layers.second, hidden) {
            (None, _) => {
                grad.extend(x.t().dot(&dout).iter());
                grad.extend(dout.sum_axis(Axis(0)).iter());
            }
            (Some((w2, _, act)), Some(a)) => {
                let mut dz1 = dout.dot(&w2.t());
                dz1.zip_mut_with(&z1, |g, &z| *g *= act.derivative(z));
                grad.extend(x.t().dot(&dz1).iter());
                grad.extend(dz1.sum_axis(Axis(0)).iter());
                grad.extend(a.t().dot(&dout).iter());
                grad.extend(dout.sum_axis(Axis(0)).iter());
            }
            (Some(_), None) => unreachable!("hidden activations computed for mlp"),
        }
        Ok((value, grad))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.arch,
            dims: Dims {
                input: self.input_dim,
                output: self.output_dim,
            },
            theta: self.theta.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        Predictor::new(c.arch, c.dims.input, c.dims.output, c.theta)
    }

    /// JSON checkpoint. Floats are written in shortest round-trip form, so
    /// reading the document back reproduces `theta` bit for bit.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| Error::format(format!("checkpoint: {e}")))?;
        Predictor::from_checkpoint(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub output: usize,
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Arch,
    pub dims: Dims,
    pub theta: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    const MLP: Arch = Arch::Mlp {
        hidden: 4,
        activation: Activation::Tanh,
    };

    #[test]
    fn param_counts() {
        assert_eq!(Arch::Linear.param_count(3, 1), 4);
        assert_eq!(MLP.param_count(3, 1), 3 * 4 + 4 + 4 + 1);
        assert!(Predictor::new(Arch::Linear, 2, 1, vec![0.0; 2]).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let x = array![[1.0, 2.0], [3.0, -4.0], [0.5, 0.5]];
        for arch in [Arch::Linear, MLP] {
            let m = Predictor::zeros(arch, 2, 1).unwrap();
            let out = m.forward(x.view()).unwrap();
            assert_eq!(out.shape(), &[3, 1]);
            assert!(out.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn linear_forward_by_hand() {
        let m = Predictor::new(Arch::Linear, 2, 1, vec![1.0, -1.0, 0.0]).unwrap();
        let out = m.predict(array![[3.0, 1.0]].view()).unwrap();
        assert_eq!(out[0], 2.0);
        assert!(m.forward(array![[1.0, 2.0, 3.0]].view()).is_err());
    }

    #[test]
    fn loss_examples() {
        let x = array![[1.0], [2.0]];
        let m = Predictor::new(Arch::Linear, 1, 1, vec![2.0, 1.0]).unwrap();
        let y = array![3.0, 5.0];
        assert_eq!(m.batch_loss(x.view(), y.view(), LossKind::Squared).unwrap(), 0.0);
        let g = m.batch_grad(x.view(), y.view(), LossKind::Squared).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-12));

        let zero = Predictor::zeros(Arch::Linear, 1, 1).unwrap();
        let l = zero
            .batch_loss(x.view(), array![1.0, 0.0].view(), LossKind::Logistic)
            .unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        assert!(m
            .batch_loss(array![[f64::NAN]].view(), array![1.0].view(), LossKind::Squared)
            .is_err());
        assert!(m
            .batch_loss(x.view(), array![0.0, 2.0].view(), LossKind::Logistic)
            .is_err());
        assert!(m.batch_loss(x.view(), array![0.0].view(), LossKind::Squared).is_err());
    }

    #[test]
    fn single_example_squared_gradient_by_hand() {
        let m = Predictor::new(Arch::Linear, 1, 1, vec![1.0, 0.0]).unwrap();
        let g = m
            .batch_grad(array![[1.0]].view(), array![0.0].view(), LossKind::Squared)
            .unwrap();
        assert_eq!(g, vec![2.0, 2.0]);
    }

    #[test]
    fn loss_is_order_invariant() {
        let m = Predictor::init(MLP, 2, 1, 3).unwrap();
        let x = array![[0.1, 0.2], [1.0, -1.0], [0.3, 0.9]];
        let y = array![1.0, 0.0, 1.0];
        let xr = array![[0.3, 0.9], [0.1, 0.2], [1.0, -1.0]];
        let yr = array![1.0, 1.0, 0.0];
        let a = m.batch_loss(x.view(), y.view(), LossKind::Logistic).unwrap();
        let b = m.batch_loss(xr.view(), yr.view(), LossKind::Logistic).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn logistic_is_finite_for_huge_logits() {
        for logit in [-1e4, -700.0, 0.0, 700.0, 1e4] {
            for label in [0.0, 1.0] {
                let (v, s) = LossKind::Logistic.value_and_slope(logit, label);
                assert!(v.is_finite() && s.is_finite(), "{logit} {label}");
                assert!(v >= 0.0);
            }
        }
        let (v, _) = LossKind::Logistic.value_and_slope(-1e4, 1.0);
        assert_eq!(v, 1e4);
    }

    #[test]
    fn hidden_features_contract() {
        let x = array![[0.5, -0.25], [1.0, 2.0], [3.0, 4.0]];
        let lin = Predictor::init(Arch::Linear, 2, 1, 0).unwrap();
        assert_eq!(lin.hidden_features(x.view()).unwrap(), x);
        let z = Predictor::zeros(MLP, 2, 1).unwrap();
        let h = z.hidden_features(x.view()).unwrap();
        assert_eq!(h.shape(), &[3, 4]);
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Predictor::init(MLP, 3, 1, 9).unwrap();
        let b = Predictor::init(MLP, 3, 1, 9).unwrap();
        let c = Predictor::init(MLP, 3, 1, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound_first = 1.0 / 3f64.sqrt();
        assert!(a.theta()[..16].iter().all(|v| v.abs() <= bound_first));
        assert!(a.theta()[16..].iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Predictor::init(MLP, 3, 1, 77).unwrap();
        let m = m
            .with_theta(m.theta().iter().map(|v| v * std::f64::consts::PI / 7.0).collect())
            .unwrap();
        let back = Predictor::from_json(&m.to_json()).unwrap();
        for (a, b) in m.theta().iter().zip(back.theta()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.arch(), m.arch());
        assert!(Predictor::from_json("{\"arch\":{\"kind\":\"linear\"}}").is_err());
    }

    fn fd_check(model: &Predictor, x: &Array2<f64>, y: &Array1<f64>, loss: LossKind) {
        let (_, grad) = model.loss_and_grad(x.view(), y.view(), loss).unwrap();
        let h = 1e-6;
        for i in 0..model.num_params() {
            let mut up = model.theta().to_vec();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let lu = model
                .with_theta(up)
                .unwrap()
                .batch_loss(x.view(), y.view(), loss)
                .unwrap();
            let ld = model
                .with_theta(dn)
                .unwrap()
                .batch_loss(x.view(), y.view(), loss)
                .unwrap();
            let fd = (lu - ld) / (2.0 * h);
            let err = (fd - grad[i]).abs();
            assert!(
                err <= 1e-7 || err / fd.abs().max(grad[i].abs()) <= 1e-5,
                "param {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn gradients_match_finite_differences(seed in any::<u64>(), mlp in any::<bool>(), logistic in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(1..4);
            let n = rng.random_range(1..6);
            let arch = if mlp { MLP } else { Arch::Linear };
            let loss = if logistic { LossKind::Logistic } else { LossKind::Squared };
            let model = Predictor::init(arch, d, 1, seed).unwrap();
            let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
            let y = Array1::from_shape_fn(n, |_| {
                if logistic { f64::from(rng.random_bool(0.5)) } else { rng.random_range(-1.0..1.0) }
            });
            fd_check(&model, &x, &y, loss);
        }

        #[test]
        fn linear_losses_are_convex(seed in any::<u64>(), logistic in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let loss = if logistic { LossKind::Logistic } else { LossKind::Squared };
            let x = Array2::from_shape_fn((8, 2), |_| rng.random_range(-2.0..2.0));
            let y = Array1::from_shape_fn(8, |_| {
                if logistic { f64::from(rng.random_bool(0.5)) } else { rng.random_range(-1.0..1.0) }
            });
            let a = Predictor::init(Arch::Linear, 2, 1, seed).unwrap();
            let b = Predictor::init(Arch::Linear, 2, 1, seed ^ 1).unwrap();
            let mid = a.with_theta(a.theta().iter().zip(b.theta()).map(|(u, v)| 0.5 * (u + v)).collect()).unwrap();
            let la = a.batch_loss(x.view(), y.view(), loss).unwrap();
            let lb = b.batch_loss(x.view(), y.view(), loss).unwrap();
            let lm = mid.batch_loss(x.view(), y.view(), loss).unwrap();
            prop_assert!(lm <= 0.5 * la + 0.5 * lb + 1e-9);
        }
    }
}
