//! Likelihood estimators, the posterior predictive, uncertainty measures and
//! the margin regularizer on out-of-distribution inputs.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::model::{BayesModel, Bound, DrawPlan};
use crate::tensor::{kernels, Graph, Tensor, Var};

/// Per-sample class probabilities `[S, B, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSamples {
    probs: Tensor,
}

impl PredictionSamples {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.ndim() != 3 {
            return Err(shape_err!("prediction samples must be [S, B, K], got {:?}", probs.shape()));
        }
        let k = probs.shape()[2];
        for row in probs.data().chunks(k) {
            check_distribution(row)?;
        }
        Ok(PredictionSamples { probs })
    }

    /// Stacks per-sample `[B, K]` probability tensors.
    pub fn from_samples(samples: &[Tensor]) -> Result<Self> {
        Self::new(Tensor::stack(samples)?)
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn samples(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn batch(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Sample `s` as a `[B, K]` tensor.
    pub fn sample(&self, s: usize) -> Result<Tensor> {
        self.probs.index_outer(s)
    }

    /// Bayes-ensemble average `[B, K]`.
    pub fn mean(&self) -> Tensor {
        let (s, b, k) = (self.samples(), self.batch(), self.classes());
        let mut out = vec![0.0; b * k];
        for chunk in self.probs.data().chunks(b * k) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= s as f64);
        Tensor::new([b, k], out).expect("shape matches")
    }
}

fn check_distribution(row: &[f64]) -> Result<()> {
    let total: f64 = row.iter().sum();
    if row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) || (total - 1.0).abs() > 1e-9 {
        return Err(invalid!("not a probability distribution: {row:?}"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub s_train: usize,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            gamma: 0.75,
            alpha: 3.0,
            s_train: 2,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid!("gamma must be finite and non-negative, got {}", self.gamma));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if self.s_train < 2 {
            return Err(invalid!("s_train must be at least 2, got {}", self.s_train));
        }
        Ok(())
    }
}

/// Which reparameterization the likelihood estimate uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// One parameter draw shared by the minibatch.
    Standard,
    /// An independent draw per exemplar.
    Exemplar,
}

impl Estimator {
    fn plan(self) -> DrawPlan<'static> {
        match self {
            Estimator::Standard => DrawPlan::Shared { candidate: None },
            Estimator::Exemplar => DrawPlan::Exemplar { candidates: None },
        }
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(shape_err!("{} labels for a batch of {batch}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(invalid!("label {bad} out of range for {classes} classes"));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `logits [B, K]`.
pub fn nll_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(shape_err!("logits must be [B, K], got {s:?}"));
    }
    check_labels(labels, s[0], s[1])?;
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.gather_rows(lp, labels)?;
    let m = g.mean(picked)?;
    g.neg(m)
}

/// [`nll_loss`] evaluated without recording.
pub fn nll_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = nll_loss(&mut g, l, labels)?;
    Ok(g.value(out).item())
}

/// Records the minibatch expected log-likelihood estimate (to be maximised).
pub fn ell_graph(
    g: &mut Graph,
    model: &BayesModel,
    bound: &Bound,
    x: Var,
    labels: &[usize],
    estimator: Estimator,
    rng: &mut impl Rng,
) -> Result<Var> {
    let plan = if model.is_deterministic() {
        DrawPlan::Deterministic
    } else {
        estimator.plan()
    };
    let logits = model.forward(g, bound, x, plan, None, rng)?;
    let nll = nll_loss(g, logits, labels)?;
    g.neg(nll)
}

fn ell_value(
    model: &BayesModel,
    x: &Tensor,
    labels: &[usize],
    estimator: Estimator,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind_constants(&mut g);
    let xv = g.constant(x.clone());
    let out = ell_graph(&mut g, model, &bound, xv, labels, estimator, rng)?;
    Ok(g.value(out).item())
}

/// Expected log-likelihood with one parameter draw for the whole batch.
pub fn ell_standard(model: &BayesModel, x: &Tensor, labels: &[usize], rng: &mut impl Rng) -> Result<f64> {
    ell_value(model, x, labels, Estimator::Standard, rng)
}

/// Expected log-likelihood with a dedicated parameter draw per exemplar.
pub fn ell_exemplar(model: &BayesModel, x: &Tensor, labels: &[usize], rng: &mut impl Rng) -> Result<f64> {
    ell_value(model, x, labels, Estimator::Exemplar, rng)
}

/// Value and parameter gradients (ascent direction, aligned with
/// [`BayesModel::parameters`]) of one likelihood estimate.
pub fn ell_gradients(
    model: &BayesModel,
    x: &Tensor,
    labels: &[usize],
    estimator: Estimator,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = ell_graph(&mut g, model, &bound, xv, labels, estimator, rng)?;
    g.backward(out)?;
    Ok((g.value(out).item(), bound.grads(&g)?))
}

/// Candidate schedule for `samples` ensemble predictions: cyclic
/// enumeration when `samples ≥ candidates`, otherwise distinct uniform picks.
pub fn candidate_schedule(candidates: usize, samples: usize, rng: &mut impl Rng) -> Vec<usize> {
    if samples >= candidates {
        (0..samples).map(|s| s % candidates).collect()
    } else {
        index::sample(rng, candidates, samples).into_vec()
    }
}

/// `S` stochastic forward passes and their average `[B, K]`.
pub fn posterior_predictive(
    model: &BayesModel,
    x: &Tensor,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<(PredictionSamples, Tensor)> {
    if samples == 0 {
        return Err(invalid!("posterior predictive needs at least one sample"));
    }
    let schedule = model
        .pse_candidates()
        .map(|c| candidate_schedule(c, samples, rng));
    let mut out = Vec::with_capacity(samples);
    for s in 0..samples {
        let plan = match (&schedule, model.is_deterministic()) {
            (Some(sched), _) => DrawPlan::Shared {
                candidate: Some(sched[s]),
            },
            (None, true) => DrawPlan::Deterministic,
            (None, false) => DrawPlan::Shared { candidate: None },
        };
        out.push(model.predict_probs(x, plan, None, rng)?);
    }
    let ps = PredictionSamples::from_samples(&out)?;
    let mean = ps.mean();
    Ok((ps, mean))
}

/// Shannon entropy (nats) of each row of `avg_probs [B, K]`.
pub fn predictive_entropy(avg_probs: &Tensor) -> Result<Tensor> {
    if avg_probs.ndim() != 2 {
        return Err(shape_err!("expected [B, K], got {:?}", avg_probs.shape()));
    }
    let k = avg_probs.shape()[1];
    let mut h = Vec::with_capacity(avg_probs.shape()[0]);
    for row in avg_probs.data().chunks(k) {
        check_distribution(row)?;
        h.push(-row.iter().map(|&p| crate::tensor::xlogx(p)).sum::<f64>());
    }
    Tensor::new([h.len()], h)
}

/// Mutual information between prediction and parameters, per instance (nats).
pub fn mutual_information(ps: &PredictionSamples) -> Tensor {
    let (s, b, k) = (ps.samples(), ps.batch(), ps.classes());
    let h_mean = predictive_entropy(&ps.mean()).expect("mean of distributions");
    let mut mean_h = vec![0.0; b];
    for (i, row) in ps.probs().data().chunks(k).enumerate() {
        mean_h[i % b] -= row.iter().map(|&p| crate::tensor::xlogx(p)).sum::<f64>();
    }
    let mi: Vec<f64> = h_mean
        .data()
        .iter()
        .zip(&mean_h)
        .map(|(h, m)| h - m / s as f64)
        .collect();
    Tensor::new([b], mi).expect("shape matches")
}

/// Records the margin regularizer `mean(min(MI, γ))` on an OOD batch, with MI
/// estimated from `s_train` per-exemplar parameter draws.
pub fn margin_graph(
    g: &mut Graph,
    model: &BayesModel,
    bound: &Bound,
    ood_x: Var,
    cfg: &RegularizerConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    cfg.validate()?;
    let plan = if model.is_deterministic() {
        DrawPlan::Deterministic
    } else {
        DrawPlan::Exemplar { candidates: None }
    };
    let mut probs = Vec::with_capacity(cfg.s_train);
    for _ in 0..cfg.s_train {
        let logits = model.forward(g, bound, ood_x, plan, None, rng)?;
        probs.push(g.softmax(logits, 1)?);
    }
    let inv_s = 1.0 / cfg.s_train as f64;
    let mut p_sum = probs[0];
    let mut h_sum = g.row_entropy(probs[0])?;
    for &p in &probs[1..] {
        p_sum = g.add(p_sum, p)?;
        let h = g.row_entropy(p)?;
        h_sum = g.add(h_sum, h)?;
    }
    let p_mean = g.scale(p_sum, inv_s)?;
    let h_of_mean = g.row_entropy(p_mean)?;
    let mean_h = g.scale(h_sum, inv_s)?;
    let mi = g.sub(h_of_mean, mean_h)?;
    let mi = g.relu(mi)?;
    let capped = g.clamp_max(mi, cfg.gamma)?;
    g.mean(capped)
}

pub fn margin_uncertainty_loss(
    model: &BayesModel,
    ood_x: &Tensor,
    cfg: &RegularizerConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind_constants(&mut g);
    let xv = g.constant(ood_x.clone());
    let out = margin_graph(&mut g, model, &bound, xv, cfg, rng)?;
    Ok(g.value(out).item())
}

/// Records `ell_exemplar + α·margin` (to be maximised). The likelihood term
/// consumes randomness before the regularizer.
#[allow(clippy::too_many_arguments)]
pub fn combined_graph(
    g: &mut Graph,
    model: &BayesModel,
    bound: &Bound,
    x: Var,
    labels: &[usize],
    ood_x: Option<Var>,
    cfg: &RegularizerConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    cfg.validate()?;
    if cfg.alpha > 0.0 && ood_x.is_none() {
        return Err(invalid!("the regularizer needs a non-empty OOD batch"));
    }
    let ell = ell_graph(g, model, bound, x, labels, Estimator::Exemplar, rng)?;
    match ood_x {
        Some(o) if cfg.alpha > 0.0 => {
            let reg = margin_graph(g, model, bound, o, cfg, rng)?;
            let reg = g.scale(reg, cfg.alpha)?;
            g.add(ell, reg)
        }
        _ => Ok(ell),
    }
}

pub fn combined_objective(
    model: &BayesModel,
    x: &Tensor,
    labels: &[usize],
    ood_x: Option<&Tensor>,
    cfg: &RegularizerConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind_constants(&mut g);
    let xv = g.constant(x.clone());
    let ov = ood_x.map(|o| g.constant(o.clone()));
    let out = combined_graph(&mut g, model, &bound, xv, labels, ov, cfg, rng)?;
    Ok(g.value(out).item())
}

/// Row-wise softmax of a `[B, K]` logit tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.ndim() != 2 {
        return Err(shape_err!("expected [B, K], got {:?}", logits.shape()));
    }
    Tensor::new(logits.shape().to_vec(), kernels::softmax(logits.data(), logits.shape(), 1))
}
