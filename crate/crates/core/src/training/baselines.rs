use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{pretrain_map, Checkpoint, TrainConfig};
use crate::data::DatasetSplit;
use crate::error::{invalid, Error, Result};
use crate::model::{BayesModel, DrawPlan, ModelSpec, Param};
use crate::objectives::{ell_gradients, Estimator, PredictionSamples};
use crate::tensor::Tensor;
use crate::variational::MfgPosterior;

/// Diagonal Laplace approximation around a deterministic checkpoint, using
/// the empirical Fisher (sum over the data of squared per-example
/// log-likelihood gradients).
pub fn laplace_diag(start: &Checkpoint, data: &DatasetSplit) -> Result<BayesModel> {
    let model = &start.model;
    if !model.is_deterministic() {
        return Err(invalid!("the Laplace approximation needs a deterministic checkpoint"));
    }
    let mut fisher: Vec<Vec<f64>> = model.parameters().iter().map(|t| vec![0.0; t.len()]).collect();
    // deterministic forward passes draw no noise
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..data.len() {
        let (x, y) = data.batch(&[i])?;
        let (_, grads) = ell_gradients(model, &x, &y, Estimator::Standard, &mut rng)?;
        for (f, g) in fisher.iter_mut().zip(&grads) {
            for (fv, gv) in f.iter_mut().zip(g) {
                // batch of one: the gradient is the per-example one
                *fv += gv * gv;
            }
        }
    }
    laplace_from_fisher(model, &fisher)
}

/// Turns a diagonal Fisher estimate into a Gaussian posterior with
/// variance `1 / (F + 1/σ₀²)` around the point estimate.
pub fn laplace_from_fisher(model: &BayesModel, fisher: &[Vec<f64>]) -> Result<BayesModel> {
    let prec0 = 1.0 / model.prior.sigma0_sq();
    let mut out = model.clone();
    let mut blocks = fisher.iter();
    for layer in &mut out.layers {
        for p in &mut layer.params {
            let Param::Point(w) = p else {
                return Err(invalid!("expected point parameters"));
            };
            let f = blocks
                .next()
                .ok_or_else(|| invalid!("fewer Fisher blocks than parameters"))?;
            if f.len() != w.len() {
                return Err(invalid!("Fisher block of {} entries for {} weights", f.len(), w.len()));
            }
            if f.iter().any(|v| !(*v >= 0.0)) {
                return Err(invalid!("Fisher entries must be non-negative"));
            }
            let psi: Vec<f64> = f.iter().map(|fv| 0.5 * (1.0 / (fv + prec0)).ln()).collect();
            let psi = Tensor::new(w.shape().to_vec(), psi)?;
            *p = Param::Mfg(MfgPosterior::new(w.clone(), psi)?);
        }
    }
    if blocks.next().is_some() {
        return Err(invalid!("more Fisher blocks than parameters"));
    }
    Ok(out)
}

/// `S` forward passes with independent inverted-dropout masks on the input
/// of every dense layer.
pub fn mc_dropout_predict(
    model: &BayesModel,
    drop_rate: f64,
    x: &Tensor,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<PredictionSamples> {
    if !(drop_rate > 0.0 && drop_rate < 1.0) {
        return Err(invalid!("drop rate must lie in (0, 1), got {drop_rate}"));
    }
    if samples == 0 {
        return Err(invalid!("need at least one sample"));
    }
    let out = (0..samples)
        .map(|_| model.predict_probs(x, DrawPlan::Deterministic, Some(drop_rate), rng))
        .collect::<Result<Vec<_>>>()?;
    PredictionSamples::from_samples(&out)
}

/// Independent MAP runs, one per configuration.
pub fn deep_ensemble(spec: &ModelSpec, cfgs: &[TrainConfig], data: &DatasetSplit) -> Result<Vec<Checkpoint>> {
    if cfgs.len() < 2 {
        return Err(Error::Config("an ensemble needs at least two members".into()));
    }
    cfgs.iter().map(|c| pretrain_map(spec, c, data)).collect()
}

/// Stacks member softmax outputs as prediction samples (`S` = members).
pub fn ensemble_predict(members: &[&BayesModel], x: &Tensor) -> Result<PredictionSamples> {
    if members.is_empty() {
        return Err(invalid!("empty ensemble"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = members
        .iter()
        .map(|m| m.predict_probs(x, DrawPlan::Deterministic, None, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    PredictionSamples::from_samples(&out)
}
