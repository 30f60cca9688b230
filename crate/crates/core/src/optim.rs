//! Training loops: the TRO primal-dual method, ERM, Group DRO and
//! importance-weighted ERM, plus duality-gap estimation.
//!
//! One TRO step samples a minibatch from every training group, descends
//! `theta` along `sum_e q_e g_e` and then ascends `q` by projected gradient on
//! `q . L - lambda/2 ||q - p||^2`. The explicit ascent step is stable while
//! `eta_q * lambda < 2`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Group, GroupedDataset};
use crate::error::{Error, Result};
use crate::model::{Arch, LossKind, Predictor};
use crate::simplex::{argmax, prior_distance, project_to_simplex, SimplexVector};

/// Consecutive quiet steps required by the early stop.
pub const EARLY_STOP_PATIENCE: usize = 50;
pub const EARLY_STOP_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    #[default]
    Constant,
    /// Every step uses `eta / sqrt(T)`.
    OneOverSqrtT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QInit {
    #[default]
    Prior,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TroConfig {
    pub lambda: f64,
    pub eta_theta: f64,
    pub eta_q: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub step_schedule: StepSchedule,
    pub q_init: QInit,
    pub early_stop: bool,
    pub record_history: bool,
}

impl Default for TroConfig {
    fn default() -> Self {
        TroConfig {
            lambda: 0.01,
            eta_theta: 0.1,
            eta_q: 0.01,
            iterations: 1000,
            batch_size: 32,
            seed: 0,
            step_schedule: StepSchedule::Constant,
            q_init: QInit::Prior,
            early_stop: false,
            record_history: true,
        }
    }
}

impl TroConfig {
    /// Zero step sizes and zero iterations are accepted; they freeze the
    /// corresponding updates.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        for (name, eta) in [("eta_theta", self.eta_theta), ("eta_q", self.eta_q)] {
            if !(eta >= 0.0) || !eta.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {eta}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        match self.step_schedule {
            StepSchedule::Constant => 1.0,
            StepSchedule::OneOverSqrtT => 1.0 / (self.iterations.max(1) as f64).sqrt(),
        }
    }

    pub fn effective_eta_theta(&self) -> f64 {
        self.eta_theta * self.scale()
    }

    pub fn effective_eta_q(&self) -> f64 {
        self.eta_q * self.scale()
    }
}

/// Value of `sum_e q_e L_e - lambda * D(q||p)` and its gradient in `q`.
pub fn tro_objective(losses: &[f64], q: &[f64], p: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    if losses.len() != q.len() {
        return Err(Error::invalid(format!(
            "tro_objective: {} losses for {} weights",
            losses.len(),
            q.len()
        )));
    }
    let (penalty, diff) = prior_distance(q, p)?;
    let mixture: f64 = q.iter().zip(losses).map(|(a, b)| a * b).sum();
    let grad = losses.iter().zip(&diff).map(|(l, d)| l - lambda * d).collect();
    Ok((mixture - lambda * penalty, grad))
}

/// One projected ascent step on `q` for fixed losses.
pub fn q_ascent(
    q: &SimplexVector,
    losses: &[f64],
    prior: &SimplexVector,
    lambda: f64,
    eta_q: f64,
) -> Result<SimplexVector> {
    let (_, grad) = tro_objective(losses, q.as_slice(), prior.as_slice(), lambda)?;
    let moved: Vec<f64> = q.as_slice().iter().zip(&grad).map(|(a, g)| a + eta_q * g).collect();
    project_to_simplex(&moved)
}

/// Maximizer of `q . L - lambda/2 ||q - p||^2` over the simplex; the
/// worst-loss vertex when `lambda = 0`.
pub fn best_response_q(losses: &[f64], prior: &SimplexVector, lambda: f64) -> Result<SimplexVector> {
    if losses.len() != prior.len() {
        return Err(Error::invalid("best_response_q: length mismatch"));
    }
    if lambda == 0.0 {
        return SimplexVector::vertex(losses.len(), argmax(losses));
    }
    let shifted: Vec<f64> = prior
        .as_slice()
        .iter()
        .zip(losses)
        .map(|(p, l)| p + l / lambda)
        .collect();
    project_to_simplex(&shifted)
}

/// Per-iteration training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Column labels for the per-group entries (group ids, or `pooled`).
    pub labels: Vec<String>,
    pub records: Vec<IterRecord>,
}

/// Losses are minibatch means at the start of the step; `q` is the weight
/// vector those losses were combined with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub losses: Vec<f64>,
    pub q: Vec<f64>,
    pub objective: f64,
}

impl History {
    fn new(labels: Vec<String>) -> Self {
        History {
            labels,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with columns `iter,group_id,loss,q,objective`, one row per group
    /// per iteration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,group_id,loss,q,objective\n");
        for r in &self.records {
            for (k, label) in self.labels.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{:?},{:?},{:?}",
                    r.iter, label, r.losses[k], r.q[k], r.objective
                )
                .expect("writing to a String cannot fail");
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QMode {
    Ascend,
    Fixed,
}

/// Mutable optimizer state: current iterate, running averages, one sampler
/// per training group.
#[derive(Debug, Clone)]
pub struct TroState {
    pub model: Predictor,
    pub q: SimplexVector,
    pub iter: usize,
    pub history: History,
    theta_sum: Vec<f64>,
    q_sum: Vec<f64>,
    samplers: Vec<ChaCha8Rng>,
    quiet_steps: usize,
    q_mode: QMode,
}

impl TroState {
    /// Fresh state over the dataset's training groups; each group samples
    /// from its own stream of `seed`.
    pub fn new(model: Predictor, q: SimplexVector, dataset: &GroupedDataset, seed: u64) -> Result<Self> {
        let ids = dataset.train_ids();
        if ids.is_empty() {
            return Err(Error::invalid("no training groups"));
        }
        if q.len() != ids.len() {
            return Err(Error::invalid(format!(
                "weight vector has {} entries for {} training groups",
                q.len(),
                ids.len()
            )));
        }
        let samplers = ids
            .iter()
            .map(|&id| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(id as u64);
                rng
            })
            .collect();
        Ok(TroState {
            theta_sum: vec![0.0; model.num_params()],
            q_sum: vec![0.0; q.len()],
            model,
            q,
            iter: 0,
            history: History::new(ids.iter().map(|id| id.to_string()).collect()),
            samplers,
            quiet_steps: 0,
            q_mode: QMode::Ascend,
        })
    }

    pub fn theta(&self) -> &[f64] {
        self.model.theta()
    }

    /// Mean of the iterates at which gradients were taken.
    pub fn averaged_theta(&self) -> Vec<f64> {
        average(&self.theta_sum, self.iter).unwrap_or_else(|| self.model.theta().to_vec())
    }

    pub fn averaged_q(&self) -> SimplexVector {
        match average(&self.q_sum, self.iter) {
            Some(v) => project_to_simplex(&v).expect("average of simplex points is finite"),
            None => self.q.clone(),
        }
    }

    pub fn averaged_model(&self) -> Predictor {
        self.model
            .with_theta(self.averaged_theta())
            .expect("averaged theta keeps the parameter count")
    }

    /// True once the early-stop criterion has held for the full patience.
    pub fn converged(&self) -> bool {
        self.quiet_steps >= EARLY_STOP_PATIENCE
    }
}

fn average(sum: &[f64], count: usize) -> Option<Vec<f64>> {
    (count > 0).then(|| sum.iter().map(|s| s / count as f64).collect())
}

fn sample_batch(group: &Group, rng: &mut ChaCha8Rng, batch: usize) -> (Array2<f64>, Array1<f64>) {
    let rows: Vec<usize> = (0..batch).map(|_| rng.random_range(0..group.len())).collect();
    (
        group.x.select(ndarray::Axis(0), &rows),
        group.y.select(ndarray::Axis(0), &rows),
    )
}

/// Per-group minibatch losses and gradients at the current model.
fn group_losses_and_grads(
    state: &mut TroState,
    groups: &[&Group],
    batch: usize,
    loss: LossKind,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut losses = Vec::with_capacity(groups.len());
    let mut grads = Vec::with_capacity(groups.len());
    for (g, rng) in groups.iter().zip(state.samplers.iter_mut()) {
        let (x, y) = sample_batch(g, rng, batch);
        let (l, grad) = state.model.loss_and_grad(x.view(), y.view(), loss)?;
        losses.push(l);
        grads.push(grad);
    }
    Ok((losses, grads))
}

/// One primal-dual step: descend `theta` with the current `q`, then ascend
/// `q` with the losses just observed.
pub fn tro_step(
    state: &mut TroState,
    dataset: &GroupedDataset,
    prior: &SimplexVector,
    config: &TroConfig,
    loss: LossKind,
) -> Result<()> {
    let groups = dataset.train_groups();
    if groups.len() != state.samplers.len() || prior.len() != groups.len() {
        return Err(Error::invalid(format!(
            "state covers {} groups, prior {}, dataset {}",
            state.samplers.len(),
            prior.len(),
            groups.len()
        )));
    }
    let (losses, grads) = group_losses_and_grads(state, &groups, config.batch_size, loss)?;
    let q_now = state.q.clone();
    let (objective, _) = tro_objective(&losses, q_now.as_slice(), prior.as_slice(), config.lambda)?;
    if !objective.is_finite() {
        return Err(Error::degenerate(format!(
            "objective diverged at iteration {}",
            state.iter
        )));
    }

    for (s, t) in state.theta_sum.iter_mut().zip(state.model.theta()) {
        *s += t;
    }
    for (s, w) in state.q_sum.iter_mut().zip(q_now.as_slice()) {
        *s += w;
    }

    let eta_theta = config.effective_eta_theta();
    let mut theta = state.model.theta().to_vec();
    let mut dtheta: f64 = 0.0;
    for (qe, g) in q_now.as_slice().iter().zip(&grads) {
        for (t, gi) in theta.iter_mut().zip(g) {
            *t -= eta_theta * qe * gi;
        }
    }
    for (new, old) in theta.iter().zip(state.model.theta()) {
        dtheta = dtheta.max((new - old).abs());
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::degenerate(format!(
            "parameters diverged at iteration {}",
            state.iter
        )));
    }
    state.model.set_theta(theta)?;

    if state.q_mode == QMode::Ascend {
        state.q = q_ascent(&q_now, &losses, prior, config.lambda, config.effective_eta_q())?;
    }
    let dq = q_now
        .as_slice()
        .iter()
        .zip(state.q.as_slice())
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    if dtheta < EARLY_STOP_TOLERANCE && dq < EARLY_STOP_TOLERANCE {
        state.quiet_steps += 1;
    } else {
        state.quiet_steps = 0;
    }

    if config.record_history {
        state.history.records.push(IterRecord {
            iter: state.iter,
            losses,
            q: q_now.into_vec(),
            objective,
        });
    }
    state.iter += 1;
    Ok(())
}

fn initial_state(
    dataset: &GroupedDataset,
    prior: &SimplexVector,
    arch: Arch,
    config: &TroConfig,
    q_mode: QMode,
) -> Result<TroState> {
    config.validate()?;
    let m = dataset.train_ids().len();
    if prior.len() != m {
        return Err(Error::invalid(format!(
            "prior has {} entries for {m} training groups",
            prior.len()
        )));
    }
    let model = Predictor::init(arch, dataset.dim(), 1, config.seed)?;
    let q0 = match (q_mode, config.q_init) {
        (QMode::Fixed, _) | (_, QInit::Prior) => prior.clone(),
        (QMode::Ascend, QInit::Uniform) => SimplexVector::uniform(m)?,
    };
    let mut state = TroState::new(model, q0, dataset, config.seed)?;
    state.q_mode = q_mode;
    Ok(state)
}

fn run(
    state: &mut TroState,
    dataset: &GroupedDataset,
    prior: &SimplexVector,
    config: &TroConfig,
    loss: LossKind,
) -> Result<()> {
    for _ in 0..config.iterations {
        tro_step(state, dataset, prior, config, loss)?;
        if config.early_stop && state.converged() {
            tracing::debug!(iter = state.iter, "early stop");
            break;
        }
    }
    Ok(())
}

/// Runs TRO from a seeded model and `q = p` (or uniform, per config).
pub fn train_tro(
    dataset: &GroupedDataset,
    prior: &SimplexVector,
    arch: Arch,
    loss: LossKind,
    config: &TroConfig,
) -> Result<TroState> {
    let mut state = initial_state(dataset, prior, arch, config, QMode::Ascend)?;
    run(&mut state, dataset, prior, config, loss)?;
    Ok(state)
}

/// TRO with `lambda = 0` and a uniform prior.
pub fn train_group_dro(dataset: &GroupedDataset, arch: Arch, loss: LossKind, config: &TroConfig) -> Result<TroState> {
    let uniform = SimplexVector::uniform(dataset.train_ids().len())?;
    let cfg = TroConfig {
        lambda: 0.0,
        ..config.clone()
    };
    train_tro(dataset, &uniform, arch, loss, &cfg)
}

/// Weighted ERM with group weights fixed at the prior.
pub fn train_iw_erm(
    dataset: &GroupedDataset,
    prior: &SimplexVector,
    arch: Arch,
    loss: LossKind,
    config: &TroConfig,
) -> Result<TroState> {
    let mut state = initial_state(dataset, prior, arch, config, QMode::Fixed)?;
    run(&mut state, dataset, prior, config, loss)?;
    Ok(state)
}

/// Minibatch gradient descent on the pooled training data. Each step draws
/// `batch_size * groups` examples with replacement; `q` and `lambda` are
/// unused.
pub fn train_erm(
    dataset: &GroupedDataset,
    arch: Arch,
    loss: LossKind,
    config: &TroConfig,
) -> Result<(Predictor, History)> {
    config.validate()?;
    if dataset.train_ids().is_empty() {
        return Err(Error::invalid("no training groups"));
    }
    let (x, y) = dataset.pooled_train();
    let pooled = Group {
        id: usize::MAX,
        name: "pooled".into(),
        x,
        y,
    };
    let mut model = Predictor::init(arch, dataset.dim(), 1, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let batch = config.batch_size * dataset.train_ids().len();
    let eta = config.effective_eta_theta();
    let mut history = History::new(vec!["pooled".into()]);
    let mut quiet = 0;
    for iter in 0..config.iterations {
        let (bx, by) = sample_batch(&pooled, &mut rng, batch);
        let (l, grad) = model.loss_and_grad(bx.view(), by.view(), loss)?;
        if !l.is_finite() {
            return Err(Error::degenerate(format!("loss diverged at iteration {iter}")));
        }
        let theta: Vec<f64> = model.theta().iter().zip(&grad).map(|(t, g)| t - eta * g).collect();
        let step = grad.iter().fold(0.0_f64, |m, g| m.max((eta * g).abs()));
        model.set_theta(theta)?;
        if config.record_history {
            history.records.push(IterRecord {
                iter,
                losses: vec![l],
                q: vec![1.0],
                objective: l,
            });
        }
        quiet = if step < EARLY_STOP_TOLERANCE { quiet + 1 } else { 0 };
        if config.early_stop && quiet >= EARLY_STOP_PATIENCE {
            break;
        }
    }
    Ok((model, history))
}

/// Full-batch loss of `model` on every training group, in `train_ids` order.
pub fn full_batch_losses(model: &Predictor, dataset: &GroupedDataset, loss: LossKind) -> Result<Vec<f64>> {
    dataset
        .train_groups()
        .iter()
        .map(|g| model.batch_loss(g.x.view(), g.y.view(), loss))
        .collect()
}

/// Full-batch `R(theta, q)` and its gradient in `theta`.
pub fn full_batch_risk(
    model: &Predictor,
    q: &SimplexVector,
    dataset: &GroupedDataset,
    prior: &SimplexVector,
    lambda: f64,
    loss: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let groups = dataset.train_groups();
    if q.len() != groups.len() {
        return Err(Error::invalid("weight vector does not match training groups"));
    }
    let mut grad = vec![0.0; model.num_params()];
    let mut losses = Vec::with_capacity(groups.len());
    for (g, qe) in groups.iter().zip(q.as_slice()) {
        let (l, ge) = model.loss_and_grad(g.x.view(), g.y.view(), loss)?;
        losses.push(l);
        for (a, b) in grad.iter_mut().zip(&ge) {
            *a += qe * b;
        }
    }
    let (value, _) = tro_objective(&losses, q.as_slice(), prior.as_slice(), lambda)?;
    Ok((value, grad))
}

/// Inner solver budget for the duality gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerBudget {
    pub steps: usize,
    /// Stop early once the gradient norm falls below this.
    pub grad_tolerance: f64,
}

impl Default for InnerBudget {
    fn default() -> Self {
        InnerBudget {
            steps: 2000,
            grad_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityGap {
    /// May be slightly negative when the inner minimization is inexact.
    pub raw: f64,
    pub max_term: f64,
    pub min_term: f64,
}

impl DualityGap {
    pub fn clamped(&self) -> f64 {
        self.raw.max(0.0)
    }
}

/// `max_q R(theta, q) - min_theta R(theta, q)` for the pair `(theta, q)`.
///
/// The max is exact ([`best_response_q`]); the min runs full-batch gradient
/// descent with Armijo backtracking from `theta`. Only the linear
/// architecture is accepted.
pub fn duality_gap(
    model: &Predictor,
    q: &SimplexVector,
    dataset: &GroupedDataset,
    prior: &SimplexVector,
    lambda: f64,
    loss: LossKind,
    budget: InnerBudget,
) -> Result<DualityGap> {
    if !model.arch().is_linear() {
        return Err(Error::Unsupported(
            "duality gap needs a convex problem; use the linear architecture".into(),
        ));
    }
    let losses = full_batch_losses(model, dataset, loss)?;
    let q_star = best_response_q(&losses, prior, lambda)?;
    let (max_term, _) = tro_objective(&losses, q_star.as_slice(), prior.as_slice(), lambda)?;

    let mut current = model.clone();
    let (mut value, mut grad) = full_batch_risk(&current, q, dataset, prior, lambda, loss)?;
    let mut step = 1.0;
    for _ in 0..budget.steps {
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() < budget.grad_tolerance {
            break;
        }
        step *= 2.0;
        loop {
            let trial: Vec<f64> = current.theta().iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            let candidate = current.with_theta(trial)?;
            let (v, g) = full_batch_risk(&candidate, q, dataset, prior, lambda, loss)?;
            if v <= value - 0.5 * step * gnorm2 {
                current = candidate;
                value = v;
                grad = g;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                break;
            }
        }
        if step < 1e-20 {
            break;
        }
    }
    let raw = max_term - value;
    tracing::debug!(raw, max_term, min_term = value, "duality gap");
    Ok(DualityGap {
        raw,
        max_term,
        min_term: value,
    })
}
