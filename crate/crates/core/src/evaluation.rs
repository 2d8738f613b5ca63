//! Metrics, the rejection and ensemble-size analyses, the gradient-variance
//! study and posterior summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::model::{BayesModel, Param};
use crate::objectives::{mutual_information, posterior_predictive, predictive_entropy, PredictionSamples};
use crate::tensor::{macs, Graph, Tensor, Var};
use crate::variational::{standard_normal, InitSpec, MfgPosterior};

pub const ECE_BINS: usize = 15;
pub const BUCKETS: usize = 10;
pub const HIST_BINS: usize = 40;

fn rows(p: &Tensor) -> Result<(usize, usize)> {
    if p.ndim() != 2 {
        return Err(shape_err!("expected [B, K] probabilities, got {:?}", p.shape()));
    }
    Ok((p.shape()[0], p.shape()[1]))
}

fn check_labels(labels: &[usize], b: usize, k: usize) -> Result<()> {
    if labels.len() != b {
        return Err(shape_err!("{} labels for {b} predictions", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(invalid!("label {bad} out of range for {k} classes"));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predictions(avg_probs: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = rows(avg_probs)?;
    Ok(avg_probs.data().chunks(k).map(argmax).collect())
}

pub fn top1_accuracy(avg_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = rows(avg_probs)?;
    check_labels(labels, b, k)?;
    let hits = predictions(avg_probs)?
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / b as f64)
}

/// Mean negative log-probability of the true labels (nats).
pub fn nll(avg_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = rows(avg_probs)?;
    check_labels(labels, b, k)?;
    let total: f64 = avg_probs
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| -row[y].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / b as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins
/// `(lo, hi]` (the first bin also holds confidence 0).
pub fn ece(avg_probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(invalid!("ECE needs at least one bin"));
    }
    let (b, k) = rows(avg_probs)?;
    check_labels(labels, b, k)?;
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (row, &y) in avg_probs.data().chunks(k).zip(labels) {
        let pred = argmax(row);
        let c = row[pred];
        let bin = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[bin] += 1;
        conf[bin] += c;
        if pred == y {
            hits[bin] += 1.0;
        }
    }
    Ok((0..bins)
        .filter(|&i| count[i] > 0)
        .map(|i| (hits[i] - conf[i]).abs() / b as f64)
        .sum())
}

/// Step-interpolated average precision of detecting positives (`true`)
/// by descending score; tied scores enter the curve together.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(shape_err!("{} scores for {} labels", scores.len(), positive.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid!("NaN score"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == positive.len() {
        return Err(invalid!("average precision needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Accuracy of ten equal buckets of rising MI (remainder in the last bucket).
/// Instances with tied MI share their group's mean correctness, so the
/// result does not depend on how ties are split across buckets.
pub fn rejection_buckets(mi: &[f64], avg_probs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (b, k) = rows(avg_probs)?;
    check_labels(labels, b, k)?;
    if mi.len() != b {
        return Err(shape_err!("{} MI values for {b} predictions", mi.len()));
    }
    if b < BUCKETS {
        return Err(invalid!("need at least {BUCKETS} instances, got {b}"));
    }
    let preds = predictions(avg_probs)?;
    let order = mi_order(mi);
    let mut credit = vec![0.0; b];
    let mut i = 0;
    while i < b {
        let mut j = i;
        while j + 1 < b && mi[order[j + 1]] == mi[order[i]] {
            j += 1;
        }
        let group = &order[i..=j];
        let acc = group.iter().filter(|&&t| preds[t] == labels[t]).count() as f64 / group.len() as f64;
        for pos in i..=j {
            credit[pos] = acc;
        }
        i = j + 1;
    }
    let size = b / BUCKETS;
    Ok((0..BUCKETS)
        .map(|j| {
            let end = if j + 1 == BUCKETS { b } else { (j + 1) * size };
            credit[j * size..end].iter().sum::<f64>() / (end - j * size) as f64
        })
        .collect())
}

/// Instance indices sorted by ascending MI (stable).
pub fn mi_order(mi: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mi.len()).collect();
    order.sort_by(|&a, &b| mi[a].total_cmp(&mi[b]));
    order
}

/// Accuracy of the running ensemble average after each of the samples.
pub fn prefix_accuracy_curve(ps: &PredictionSamples, labels: &[usize]) -> Result<Vec<f64>> {
    let (b, k) = (ps.batch(), ps.classes());
    check_labels(labels, b, k)?;
    let mut sum = vec![0.0; b * k];
    let mut curve = Vec::with_capacity(ps.samples());
    for chunk in ps.probs().data().chunks(b * k) {
        for (s, v) in sum.iter_mut().zip(chunk) {
            *s += v;
        }
        let hits = sum.chunks(k).zip(labels).filter(|(r, &y)| argmax(r) == y).count();
        curve.push(hits as f64 / b as f64);
    }
    Ok(curve)
}

/// Ensemble accuracy for `S = 1..=s_max` from one set of `s_max` draws.
pub fn ensemble_size_curve(
    model: &BayesModel,
    x: &Tensor,
    labels: &[usize],
    s_max: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let (ps, _) = posterior_predictive(model, x, s_max, rng)?;
    prefix_accuracy_curve(&ps, labels)
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count_normal: usize,
    pub count_ood: usize,
}

/// Shared-edge histograms of MI over `[0, ln K]`; values outside the range
/// land in the end bins.
pub fn mi_histograms(normal: &[f64], ood: &[f64], classes: usize, bins: usize) -> Vec<HistBin> {
    let hi = (classes as f64).ln();
    let width = hi / bins as f64;
    let bin_of = |v: f64| ((v / width).floor().max(0.0) as usize).min(bins - 1);
    let mut out: Vec<HistBin> = (0..bins)
        .map(|i| HistBin {
            bin_lo: i as f64 * width,
            bin_hi: if i + 1 == bins { hi } else { (i + 1) as f64 * width },
            count_normal: 0,
            count_ood: 0,
        })
        .collect();
    for &v in normal {
        out[bin_of(v)].count_normal += 1;
    }
    for &v in ood {
        out[bin_of(v)].count_ood += 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub nll: f64,
    pub ece: f64,
    pub ap_per_ood_source: BTreeMap<String, f64>,
    pub bucket_accuracies: Vec<f64>,
    pub mi_histograms: Vec<HistBin>,
    pub mean_mi_normal: f64,
    pub mean_mi_ood: BTreeMap<String, f64>,
    pub mean_entropy_normal: f64,
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["top1".to_string(), "nll".into(), "ece".into()];
        cols.extend(self.ap_per_ood_source.keys().map(|k| format!("ap_{k}")));
        cols.extend((0..self.bucket_accuracies.len()).map(|i| format!("bucket_{i}")));
        cols.push("mean_mi_normal".into());
        cols.extend(self.mean_mi_ood.keys().map(|k| format!("mean_mi_{k}")));
        cols.push("mean_entropy_normal".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut vals = vec![self.top1, self.nll, self.ece];
        vals.extend(self.ap_per_ood_source.values());
        vals.extend(&self.bucket_accuracies);
        vals.push(self.mean_mi_normal);
        vals.extend(self.mean_mi_ood.values());
        vals.push(self.mean_entropy_normal);
        vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count_normal,count_ood\n");
        for b in &self.mi_histograms {
            let _ = writeln!(s, "{},{},{},{}", b.bin_lo, b.bin_hi, b.count_normal, b.count_ood);
        }
        s
    }
}

/// Builds a report from prediction samples on the normal test set and on
/// each named OOD set; MI is the OOD score.
pub fn evaluate_predictions(
    normal: &PredictionSamples,
    labels: &[usize],
    ood: &[(String, PredictionSamples)],
) -> Result<EvalReport> {
    let avg = normal.mean();
    let mi = mutual_information(normal);
    let mi_n = mi.data();
    let mut ap = BTreeMap::new();
    let mut mean_mi_ood = BTreeMap::new();
    let mut all_ood = Vec::new();
    for (name, ps) in ood {
        let mo = mutual_information(ps);
        let scores: Vec<f64> = mi_n.iter().chain(mo.data()).copied().collect();
        let positive: Vec<bool> = (0..scores.len()).map(|i| i >= mi_n.len()).collect();
        ap.insert(name.clone(), average_precision(&scores, &positive)?);
        mean_mi_ood.insert(name.clone(), mo.mean());
        all_ood.extend_from_slice(mo.data());
    }
    Ok(EvalReport {
        top1: top1_accuracy(&avg, labels)?,
        nll: nll(&avg, labels)?,
        ece: ece(&avg, labels, ECE_BINS)?,
        ap_per_ood_source: ap,
        bucket_accuracies: rejection_buckets(mi_n, &avg, labels)?,
        mi_histograms: mi_histograms(mi_n, &all_ood, normal.classes(), HIST_BINS),
        mean_mi_normal: mi.mean(),
        mean_mi_ood,
        mean_entropy_normal: predictive_entropy(&avg)?.mean(),
    })
}

pub fn evaluate(
    model: &BayesModel,
    x: &Tensor,
    labels: &[usize],
    ood: &[(String, Tensor)],
    samples: usize,
    rng: &mut impl Rng,
) -> Result<EvalReport> {
    let (normal, _) = posterior_predictive(model, x, samples, rng)?;
    let ood_ps = ood
        .iter()
        .map(|(name, xo)| Ok((name.clone(), posterior_predictive(model, xo, samples, rng)?.0)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&normal, labels, &ood_ps)
}

/// Toy convolution used to compare the two reparameterizations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceStudyConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub size: usize,
    pub batch: usize,
    pub runs: usize,
    pub seed: u64,
    pub psi_init: InitSpec,
}

impl Default for VarianceStudyConfig {
    fn default() -> Self {
        VarianceStudyConfig {
            in_channels: 4,
            out_channels: 4,
            kernel: 3,
            size: 8,
            batch: 32,
            runs: 500,
            seed: 0,
            psi_init: InitSpec::default(),
        }
    }
}

impl VarianceStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 2
            || self.batch == 0
            || self.kernel == 0
            || self.in_channels == 0
            || self.out_channels == 0
            || self.size < self.kernel
        {
            return Err(invalid!("variance study needs runs ≥ 2 and a valid conv geometry"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceStudyReport {
    pub var_standard_mu: f64,
    pub var_standard_psi: f64,
    pub var_exemplar_mu: f64,
    pub var_exemplar_psi: f64,
    /// Mean per-coordinate variance ratio standard / exemplar over all
    /// `μ` and `ψ` coordinates; NaN when both variances vanish.
    pub ratio: f64,
    pub macs_standard: u64,
    pub macs_exemplar: u64,
}

impl VarianceStudyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("estimator,coordinate_group,variance,macs\n");
        for (est, mu, psi, m) in [
            ("standard", self.var_standard_mu, self.var_standard_psi, self.macs_standard),
            ("exemplar", self.var_exemplar_mu, self.var_exemplar_psi, self.macs_exemplar),
        ] {
            let _ = writeln!(s, "{est},mu,{mu},{m}");
            let _ = writeln!(s, "{est},psi,{psi},{m}");
            let _ = writeln!(s, "{est},all,{},{m}", 0.5 * (mu + psi));
        }
        s
    }
}

struct ToyConv {
    post: MfgPosterior,
    x: Tensor,
    onehot: Tensor,
    cfg: VarianceStudyConfig,
}

impl ToyConv {
    /// Fixed input, a random posterior mean and per-pixel targets produced
    /// by an independent teacher kernel.
    fn new(cfg: &VarianceStudyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (ci, co, k, s, b) = (cfg.in_channels, cfg.out_channels, cfg.kernel, cfg.size, cfg.batch);
        let w_shape = [co, ci, k, k];
        let scale = Normal::new(0.0, 1.0 / ((ci * k * k) as f64).sqrt()).map_err(|e| invalid!("{e}"))?;
        let mu = Tensor::from_fn(w_shape, |_| scale.sample(&mut rng));
        let teacher = Tensor::from_fn(w_shape, |_| scale.sample(&mut rng));
        let x = standard_normal(&[b, ci, s, s], &mut rng);
        let psi = cfg.psi_init.draw(&w_shape, &mut rng)?;
        let pad = k / 2;
        let mut g = Graph::new();
        let (xv, tv) = (g.constant(x.clone()), g.constant(teacher));
        let t_out = g.conv2d(xv, tv, 1, 1, pad)?;
        let out = g.value(t_out);
        let hw = out.shape()[2] * out.shape()[3];
        let mut onehot = Tensor::zeros(out.shape().to_vec());
        for bi in 0..b {
            for p in 0..hw {
                let best = (0..co)
                    .max_by(|&i, &j| out.data()[(bi * co + i) * hw + p].total_cmp(&out.data()[(bi * co + j) * hw + p]))
                    .expect("channels");
                onehot.data_mut()[(bi * co + best) * hw + p] = 1.0;
            }
        }
        Ok(ToyConv {
            post: MfgPosterior::new(mu, psi)?,
            x,
            onehot,
            cfg: *cfg,
        })
    }

    /// Gradients of the mean per-pixel cross-entropy w.r.t. `(μ, ψ)` and the
    /// forward MAC count of one estimate.
    fn gradients(&self, exemplar: bool, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>, u64)> {
        let mut g = Graph::new();
        let mu = g.leaf(self.post.mu().clone());
        let psi = g.leaf(self.post.psi().clone());
        let x = g.constant(self.x.clone());
        let pad = self.cfg.kernel / 2;
        let b = self.cfg.batch;
        let (logits, counted) = macs::measure(|| -> Result<Var> {
            let std = g.exp(psi)?;
            if exemplar {
                let mut shape = vec![b];
                shape.extend_from_slice(self.post.shape());
                let eps = g.constant(standard_normal(&shape, rng));
                let std_b = g.expand(std, b)?;
                let noise = g.mul(std_b, eps)?;
                let mu_b = g.expand(mu, b)?;
                let w = g.add(mu_b, noise)?;
                g.exemplar_conv2d(x, w, 1, pad)
            } else {
                let eps = g.constant(standard_normal(self.post.shape(), rng));
                let noise = g.mul(std, eps)?;
                let w = g.add(mu, noise)?;
                g.conv2d(x, w, 1, 1, pad)
            }
        });
        let logits = logits?;
        let lp = g.log_softmax(logits, 1)?;
        let t = g.constant(self.onehot.clone());
        let picked = g.mul(lp, t)?;
        let total = g.sum(picked)?;
        let pixels = (self.onehot.len() / self.cfg.out_channels) as f64;
        let loss = g.scale(total, -1.0 / pixels)?;
        g.backward(loss)?;
        let gm = g.grad(mu).expect("leaf").to_vec();
        let gp = g.grad(psi).expect("leaf").to_vec();
        Ok((gm, gp, counted))
    }
}

fn mean_variance(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut total = 0.0;
    for j in 0..d {
        // shifted by the first draw so identical draws give exactly zero
        let shift = samples[0][j];
        let m = samples.iter().map(|s| s[j] - shift).sum::<f64>() / n;
        total += samples.iter().map(|s| (s[j] - shift - m).powi(2)).sum::<f64>() / (n - 1.0);
    }
    total / d as f64
}

/// Variance of stochastic gradients under shared versus per-exemplar
/// weight draws on a fixed toy convolution. Run `i` uses seed `seed + i`.
pub fn gradient_variance_study(cfg: &VarianceStudyConfig) -> Result<VarianceStudyReport> {
    let toy = ToyConv::new(cfg)?;
    let mut out = [(Vec::new(), Vec::new(), 0u64), (Vec::new(), Vec::new(), 0u64)];
    for (slot, exemplar) in [(0, false), (1, true)] {
        for i in 0..cfg.runs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + i as u64));
            let (gm, gp, m) = toy.gradients(exemplar, &mut rng)?;
            out[slot].0.push(gm);
            out[slot].1.push(gp);
            out[slot].2 = m;
        }
    }
    let (vs_mu, vs_psi) = (mean_variance(&out[0].0), mean_variance(&out[0].1));
    let (ve_mu, ve_psi) = (mean_variance(&out[1].0), mean_variance(&out[1].1));
    let (num, den) = (vs_mu + vs_psi, ve_mu + ve_psi);
    let ratio = if den == 0.0 { f64::NAN } else { num / den };
    Ok(VarianceStudyReport {
        var_standard_mu: vs_mu,
        var_standard_psi: vs_psi,
        var_exemplar_mu: ve_mu,
        var_exemplar_psi: ve_psi,
        ratio,
        macs_standard: out[0].2,
        macs_exemplar: out[1].2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorStatRow {
    pub layer: usize,
    pub param: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

fn stat_row(layer: usize, param: String, v: &[f64]) -> PosteriorStatRow {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    PosteriorStatRow {
        layer,
        param,
        mean,
        std: var.sqrt(),
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Per-layer summary of point weights, Gaussian means and standard
/// deviations, or shared weights and candidate perturbation entries.
pub fn posterior_stats(model: &BayesModel) -> Result<Vec<PosteriorStatRow>> {
    let mut out = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        for (p, name) in layer.params.iter().zip(layer.kind.param_names()) {
            match p {
                Param::Point(w) => out.push(stat_row(li, name.to_string(), w.data())),
                Param::Mfg(q) => {
                    out.push(stat_row(li, format!("{name}.mu"), q.mu().data()));
                    out.push(stat_row(li, format!("{name}.sigma"), q.std().data()));
                }
                Param::Pse(q) => {
                    out.push(stat_row(li, format!("{name}.w_bar"), q.w_bar().data()));
                    let mut pert = Vec::with_capacity(q.candidates() * q.m_in() * q.m_out());
                    for c in 0..q.candidates() {
                        pert.extend(q.perturbation(c)?);
                    }
                    out.push(stat_row(li, format!("{name}.perturbation"), &pert));
                }
            }
        }
    }
    Ok(out)
}

pub fn posterior_stats_csv(rows: &[PosteriorStatRow]) -> String {
    let mut s = String::from("layer,param,mean,std,min,max\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.layer, r.param, r.mean, r.std, r.min, r.max);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top1_ties_go_to_lowest_index() {
        let p = Tensor::full([3, 4], 0.25);
        assert_eq!(predictions(&p).unwrap(), vec![0, 0, 0]);
        assert_eq!(top1_accuracy(&p, &[0, 1, 0]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn ece_hand_cases() {
        let p = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(ece(&p, &[0], 15).unwrap(), 0.0);
        let p = Tensor::new([1, 2], vec![0.9, 0.1]).unwrap();
        assert!((ece(&p, &[1], 15).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let v = average_precision(&[0.9, 0.8, 0.1], &[false, false, true]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert!(average_precision(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn buckets_fixture() {
        let n = 20;
        let mi: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut data = Vec::new();
        for i in 0..n {
            data.extend(if i < n / 2 { [0.9, 0.1] } else { [0.1, 0.9] });
        }
        let p = Tensor::new([n, 2], data).unwrap();
        let b = rejection_buckets(&mi, &p, &vec![0; n]).unwrap();
        assert_eq!(b, vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(rejection_buckets(&mi[..9], &Tensor::full([9, 2], 0.5), &[0; 9]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).is_nan());
    }
}
