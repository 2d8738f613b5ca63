//! MAP pre-training, Bayesian fine-tuning and the baselines.

mod baselines;
mod checkpoint;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use baselines::{deep_ensemble, ensemble_predict, laplace_diag, laplace_from_fisher, mc_dropout_predict};
pub use checkpoint::{config_hash, Checkpoint, CheckpointMeta, FORMAT_VERSION};

use crate::data::{gen_ood, select_rows, DatasetSplit, OodSpec};
use crate::error::{invalid, Error, Result};
use crate::model::{BayesModel, Family, ModelSpec};
use crate::objectives::{ell_graph, margin_graph, Estimator, RegularizerConfig};
use crate::tensor::{Graph, Tensor};
use crate::variational::{InitSpec, IsotropicPrior};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    None,
    Mfg,
    Pse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight decay coefficient; fixes the prior variance `1 / (λ n)`.
    pub lambda: f64,
    pub seed: u64,
    pub variational_family: FamilyKind,
    pub pse_candidates: usize,
    pub pse_rank: usize,
    pub pse_noise_std: f64,
    pub mfg_init: InitSpec,
    pub regularizer: Option<RegularizerConfig>,
    /// Source of the OOD training pool used by the regularizer.
    pub ood_source: Option<OodSpec>,
    pub ood_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            lambda: 2e-4,
            seed: 0,
            variational_family: FamilyKind::None,
            pse_candidates: 20,
            pse_rank: 1,
            pse_noise_std: 0.05,
            mfg_init: InitSpec::default(),
            regularizer: None,
            ood_source: None,
            ood_pool: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.pse_candidates == 0 || self.pse_rank == 0 {
            return bad("pse_candidates and pse_rank must be positive".into());
        }
        if self.ood_pool == 0 {
            return bad("ood_pool must be positive".into());
        }
        if let Some(r) = &self.regularizer {
            r.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(o) = &self.ood_source {
            o.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn family(&self) -> Option<Family> {
        match self.variational_family {
            FamilyKind::None => None,
            FamilyKind::Mfg => Some(Family::Mfg(self.mfg_init)),
            FamilyKind::Pse => Some(Family::Pse {
                candidates: self.pse_candidates,
                rank: self.pse_rank,
                noise_std: self.pse_noise_std,
            }),
        }
    }
}

/// One recorded phase of a training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepEvent {
    Likelihood { estimator: Estimator, batch: usize },
    Regularizer { ood_batch: usize },
    Backward,
    Edit,
    Step { lr: f64 },
}

/// SGD with heavy-ball momentum: `v ← m·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, model: &BayesModel) -> Self {
        Sgd {
            momentum,
            velocity: model.parameters().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(invalid!("optimizer state does not match the parameters"));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

fn prior_for(cfg: &TrainConfig, data: &DatasetSplit) -> Result<IsotropicPrior> {
    IsotropicPrior::from_lambda(cfg.lambda, data.len()).map_err(|e| Error::Config(e.to_string()))
}

/// Freshly initialised deterministic network, as `pretrain_map` would start from.
pub fn initial_checkpoint(spec: &ModelSpec, cfg: &TrainConfig, data: &DatasetSplit) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = spec.build(data.input_shape(), data.classes, prior_for(cfg, data)?, &mut rng)?;
    model.standardize_inputs(&data.x)?;
    Ok(Checkpoint {
        model,
        meta: CheckpointMeta {
            config_hash: config_hash(cfg)?,
            epoch: 0,
            seed: cfg.seed,
            stage: "init".into(),
        },
    })
}

/// Maximum-a-posteriori training with weight decay applied as a gradient edit.
pub fn pretrain_map(spec: &ModelSpec, cfg: &TrainConfig, data: &DatasetSplit) -> Result<Checkpoint> {
    if cfg.variational_family != FamilyKind::None {
        return Err(Error::Config("MAP pre-training needs variational_family = none".into()));
    }
    let start = initial_checkpoint(spec, cfg, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut model = start.model;
    run_sgd(&mut model, cfg, data, None, true, &mut |_| {}, &mut rng)?;
    Ok(Checkpoint {
        model,
        meta: CheckpointMeta {
            config_hash: config_hash(cfg)?,
            epoch: cfg.epochs,
            seed: cfg.seed,
            stage: "map".into(),
        },
    })
}

pub fn bayes_finetune(start: &Checkpoint, cfg: &TrainConfig, data: &DatasetSplit) -> Result<Checkpoint> {
    bayes_finetune_traced(start, cfg, data, &mut |_| {})
}

/// Bayesian fine-tuning from a deterministic checkpoint. `observer` sees
/// every phase of every step in execution order.
pub fn bayes_finetune_traced(
    start: &Checkpoint,
    cfg: &TrainConfig,
    data: &DatasetSplit,
    observer: &mut dyn FnMut(StepEvent),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let family = cfg
        .family()
        .ok_or_else(|| Error::Config("fine-tuning needs variational_family mfg or pse".into()))?;
    if !start.model.is_deterministic() {
        return Err(Error::Config("fine-tuning must start from a deterministic checkpoint".into()));
    }
    if start.model.input_shape != data.input_shape() || start.model.num_classes != data.classes {
        return Err(Error::Config(format!(
            "checkpoint expects inputs {:?} with {} classes, data has {:?} with {}",
            start.model.input_shape,
            start.model.num_classes,
            data.input_shape(),
            data.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut model = start.model.to_variational(family, &mut rng)?;
    model.prior = prior_for(cfg, data)?;
    let pool = match &cfg.regularizer {
        Some(r) if r.alpha > 0.0 => {
            let mut spec = cfg.ood_source.unwrap_or_default();
            spec.n = Some(spec.n.unwrap_or(cfg.ood_pool));
            Some(gen_ood(data, &spec)?)
        }
        _ => None,
    };
    run_sgd(&mut model, cfg, data, pool.as_ref(), false, observer, &mut rng)?;
    Ok(Checkpoint {
        model,
        meta: CheckpointMeta {
            config_hash: config_hash(cfg)?,
            epoch: cfg.epochs,
            seed: cfg.seed,
            stage: "finetune".into(),
        },
    })
}

fn run_sgd(
    model: &mut BayesModel,
    cfg: &TrainConfig,
    data: &DatasetSplit,
    ood_pool: Option<&Tensor>,
    drop_lr: bool,
    observer: &mut dyn FnMut(StepEvent),
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut opt = Sgd::new(cfg.momentum, model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = if drop_lr && epoch as f64 >= 0.75 * cfg.epochs as f64 {
            cfg.lr * 0.1
        } else {
            cfg.lr
        };
        order.shuffle(rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let loss = train_step(model, &mut opt, cfg, data, chunk, ood_pool, lr, observer, rng)
                .map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, step {step}: {m}")),
                    other => other,
                })?;
            total += loss * chunk.len() as f64;
        }
        log::info!("epoch {epoch}: mean loss {:.6}", total / data.len() as f64);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut BayesModel,
    opt: &mut Sgd,
    cfg: &TrainConfig,
    data: &DatasetSplit,
    idx: &[usize],
    ood_pool: Option<&Tensor>,
    lr: f64,
    observer: &mut dyn FnMut(StepEvent),
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (x, y) = data.batch(idx)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let xv = g.constant(x);
    let mut objective = ell_graph(&mut g, model, &bound, xv, &y, Estimator::Exemplar, rng)?;
    observer(StepEvent::Likelihood {
        estimator: Estimator::Exemplar,
        batch: idx.len(),
    });
    if let (Some(reg), Some(pool)) = (&cfg.regularizer, ood_pool) {
        let n_pool = pool.shape()[0];
        let pick: Vec<usize> = (0..idx.len()).map(|_| rng.random_range(0..n_pool)).collect();
        let ov = g.constant(select_rows(pool, &pick)?);
        let r = margin_graph(&mut g, model, &bound, ov, reg, rng)?;
        let r = g.scale(r, reg.alpha)?;
        objective = g.add(objective, r)?;
        observer(StepEvent::Regularizer { ood_batch: pick.len() });
    }
    let loss = g.neg(objective)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value}")));
    }
    g.backward(loss)?;
    observer(StepEvent::Backward);
    let mut grads = bound.grads(&g)?;
    model.edit_gradients(&mut grads)?;
    observer(StepEvent::Edit);
    opt.step(model.parameters_mut(), &grads, lr)?;
    if let Some(t) = model.parameters().into_iter().find(|t| !t.is_finite()) {
        return Err(Error::Numerical(format!(
            "parameter of shape {:?} diverged after the update",
            t.shape()
        )));
    }
    observer(StepEvent::Step { lr });
    Ok(value)
}

/// Fraction of correctly classified training or test points under the
/// deterministic forward pass (point parameters or posterior means).
pub fn deterministic_accuracy(model: &BayesModel, data: &DatasetSplit) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = model.predict_probs(&data.x, crate::model::DrawPlan::Deterministic, None, &mut rng)?;
    Ok(crate::evaluation::top1_accuracy(&p, &data.y)?)
}
