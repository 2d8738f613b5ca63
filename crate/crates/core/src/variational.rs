//! Variational posterior families over layer parameters.
//!
//! Two families are supported:
//!
//! * [`MfgPosterior`], a fully factorised Gaussian `N(μ, diag(exp(2ψ)))`;
//! * [`PsePosterior`], a parameter-sharing ensemble: a uniform mixture of `C`
//!   point masses at `(l_c · r_c) ∘ w̄`, with rank-`r` factors `l_c, r_c`.
//!
//! Both are initialised from a converged point estimate `w*`. The complexity
//! term of the ELBO is never differentiated through the graph; instead the
//! analytic gradients are added to the likelihood gradients after backward,
//! in the same way vanilla weight decay edits gradients.
//!
//! Gradient convention: every `edit_*` function operates on *descent*
//! gradients (gradients of the loss being minimised, i.e. the negated
//! objective), so it subtracts the ascent direction `∇L_c`.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Isotropic Gaussian prior `N(0, σ₀² I)` together with the training-set
/// size `n`. The equivalent weight-decay coefficient is `λ = 1 / (σ₀² n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropicPrior {
    sigma0_sq: f64,
    lambda: f64,
    n: usize,
}

impl IsotropicPrior {
    pub fn from_lambda(lambda: f64, n: usize) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) || n == 0 {
            return Err(invalid!("prior needs λ > 0 and n ≥ 1 (got λ={lambda}, n={n})"));
        }
        Ok(IsotropicPrior {
            sigma0_sq: 1.0 / (lambda * n as f64),
            lambda,
            n,
        })
    }

    pub fn from_variance(sigma0_sq: f64, n: usize) -> Result<Self> {
        if !(sigma0_sq > 0.0 && sigma0_sq.is_finite()) || n == 0 {
            return Err(invalid!(
                "prior needs σ₀² > 0 and n ≥ 1 (got σ₀²={sigma0_sq}, n={n})"
            ));
        }
        Ok(IsotropicPrior {
            sigma0_sq,
            lambda: 1.0 / (sigma0_sq * n as f64),
            n,
        })
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Distribution of the freshly added log-std parameters ψ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSpec {
    pub mean: f64,
    pub std: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            mean: -5.0,
            std: 0.01,
        }
    }
}

impl InitSpec {
    pub fn constant(value: f64) -> Self {
        InitSpec {
            mean: value,
            std: 0.0,
        }
    }

    pub(crate) fn draw(&self, shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
        if self.std == 0.0 {
            return Ok(Tensor::full(shape.to_vec(), self.mean));
        }
        let dist = Normal::new(self.mean, self.std)
            .map_err(|e| invalid!("bad init distribution: {e}"))?;
        Ok(Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng)))
    }
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

// ------------------------------------------------------------------ MFG

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfgPosterior {
    mu: Tensor,
    psi: Tensor,
}

impl MfgPosterior {
    pub fn new(mu: Tensor, psi: Tensor) -> Result<Self> {
        if mu.shape() != psi.shape() {
            return Err(shape_err!("μ {:?} and ψ {:?} differ", mu.shape(), psi.shape()));
        }
        if !mu.is_finite() || !psi.is_finite() {
            return Err(invalid!("non-finite variational parameters"));
        }
        Ok(MfgPosterior { mu, psi })
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn psi(&self) -> &Tensor {
        &self.psi
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.mu, &mut self.psi]
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn std(&self) -> Tensor {
        self.psi.map(f64::exp)
    }
}

/// μ copies `w*` exactly; ψ is drawn from `init`.
pub fn init_mfg_from_map(
    w_star: &Tensor,
    init: &InitSpec,
    rng: &mut impl Rng,
) -> Result<MfgPosterior> {
    if !w_star.is_finite() {
        return Err(invalid!("MAP weights contain non-finite values"));
    }
    let psi = init.draw(w_star.shape(), rng)?;
    MfgPosterior::new(w_star.clone(), psi)
}

/// `μ + exp(ψ) ∘ ε` for a given noise tensor.
pub fn sample_mfg_with_noise(p: &MfgPosterior, eps: &Tensor) -> Result<Tensor> {
    if eps.len() != p.mu.len() {
        return Err(shape_err!("noise {:?} for posterior {:?}", eps.shape(), p.shape()));
    }
    let data = p
        .mu
        .data()
        .iter()
        .zip(p.psi.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s.exp() * e)
        .collect();
    Tensor::new(p.shape().to_vec(), data)
}

pub fn sample_mfg(p: &MfgPosterior, rng: &mut impl Rng) -> Tensor {
    let eps = standard_normal(p.shape(), rng);
    sample_mfg_with_noise(p, &eps).expect("noise shaped like posterior")
}

/// `B` independent draws stacked along a new leading axis.
pub fn sample_mfg_exemplar(p: &MfgPosterior, b: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if b == 0 {
        return Err(invalid!("exemplar sampling needs B ≥ 1"));
    }
    let draws: Vec<Tensor> = (0..b).map(|_| sample_mfg(p, rng)).collect();
    Tensor::stack(&draws)
}

/// `KL(q ‖ p)` in closed form:
/// `Σ_j [ln σ₀ − ψ_j + (exp(2ψ_j) + μ_j²) / (2σ₀²) − ½]`.
pub fn kl_mfg(p: &MfgPosterior, prior: &IsotropicPrior) -> f64 {
    let s2 = prior.sigma0_sq();
    let ln_sigma0 = 0.5 * s2.ln();
    p.mu.data()
        .iter()
        .zip(p.psi.data())
        .map(|(m, psi)| ln_sigma0 - psi + ((2.0 * psi).exp() + m * m) / (2.0 * s2) - 0.5)
        .sum()
}

/// Ascent direction of the complexity loss `L_c = −KL/n`:
/// `∇μ = −λμ`, `∇ψ = −λ exp(2ψ) + 1/n`.
pub fn complexity_grad_mfg(p: &MfgPosterior, prior: &IsotropicPrior) -> (Tensor, Tensor) {
    let lambda = prior.lambda();
    let inv_n = 1.0 / prior.n() as f64;
    (
        p.mu.map(|m| -lambda * m),
        p.psi.map(|s| -lambda * (2.0 * s).exp() + inv_n),
    )
}

/// Folds the complexity loss into descent gradients of the negated
/// likelihood: `g_μ += λμ`, `g_ψ += λ exp(2ψ) − 1/n`.
///
/// The μ edit is exactly vanilla weight decay with coefficient λ.
pub fn edit_gradients_mfg(
    grad_mu: &mut [f64],
    grad_psi: &mut [f64],
    p: &MfgPosterior,
    prior: &IsotropicPrior,
) -> Result<()> {
    if grad_mu.len() != p.mu.len() || grad_psi.len() != p.psi.len() {
        return Err(shape_err!(
            "gradients ({}, {}) for posterior of {} entries",
            grad_mu.len(),
            grad_psi.len(),
            p.mu.len()
        ));
    }
    let (dmu, dpsi) = complexity_grad_mfg(p, prior);
    for (g, c) in grad_mu.iter_mut().zip(dmu.data()) {
        *g -= c;
    }
    for (g, c) in grad_psi.iter_mut().zip(dpsi.data()) {
        *g -= c;
    }
    Ok(())
}

/// Vanilla weight decay on a point parameter: `g += λw`.
pub fn weight_decay(grad: &mut [f64], w: &Tensor, lambda: f64) -> Result<()> {
    if grad.len() != w.len() {
        return Err(shape_err!("gradient of {} for weight of {}", grad.len(), w.len()));
    }
    for (g, x) in grad.iter_mut().zip(w.data()) {
        *g += lambda * x;
    }
    Ok(())
}

// ------------------------------------------------------------------ PSE

/// How a parameter tensor maps onto the `[m_in, m_out]` matrix that the
/// ensemble factors act on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixLayout {
    /// Vectors become `[1, len]`; matrices are used as-is.
    Direct,
    /// Convolution kernels `[Cout, Cin, kh, kw]` become `[Cin·kh·kw, Cout]`.
    Kernel,
}

pub fn matrix_form(param_shape: &[usize]) -> Result<(usize, usize, MatrixLayout)> {
    match *param_shape {
        [len] => Ok((1, len, MatrixLayout::Direct)),
        [m_in, m_out] => Ok((m_in, m_out, MatrixLayout::Direct)),
        [cout, cin, kh, kw] => Ok((cin * kh * kw, cout, MatrixLayout::Kernel)),
        _ => Err(shape_err!("no matrix form for parameter shape {param_shape:?}")),
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsePosterior {
    w_bar: Tensor,
    l: Tensor,
    r_fac: Tensor,
    param_shape: Vec<usize>,
    layout: MatrixLayout,
}

impl PsePosterior {
    /// `w_bar: [m_in, m_out]`, `l: [C, m_in, r]`, `r_fac: [C, r, m_out]`.
    pub fn new(w_bar: Tensor, l: Tensor, r_fac: Tensor, param_shape: Vec<usize>) -> Result<Self> {
        let (m_in, m_out, layout) = matrix_form(&param_shape)?;
        let (sl, sr) = (l.shape(), r_fac.shape());
        if w_bar.shape() != [m_in, m_out]
            || sl.len() != 3
            || sr.len() != 3
            || sl[0] != sr[0]
            || sl[1] != m_in
            || sl[2] != sr[1]
            || sr[2] != m_out
        {
            return Err(shape_err!(
                "inconsistent ensemble factors: w̄ {:?}, l {sl:?}, r {sr:?} for parameter {param_shape:?}",
                w_bar.shape()
            ));
        }
        Ok(PsePosterior {
            w_bar,
            l,
            r_fac,
            param_shape,
            layout,
        })
    }

    pub fn w_bar(&self) -> &Tensor {
        &self.w_bar
    }

    pub fn l(&self) -> &Tensor {
        &self.l
    }

    pub fn r_fac(&self) -> &Tensor {
        &self.r_fac
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_bar, &mut self.l, &mut self.r_fac]
    }

    pub fn candidates(&self) -> usize {
        self.l.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.l.shape()[2]
    }

    pub fn m_in(&self) -> usize {
        self.w_bar.shape()[0]
    }

    pub fn m_out(&self) -> usize {
        self.w_bar.shape()[1]
    }

    pub fn param_shape(&self) -> &[usize] {
        &self.param_shape
    }

    pub fn layout(&self) -> MatrixLayout {
        self.layout
    }

    /// Perturbation matrix `l_c · r_c`, row-major `[m_in, m_out]`.
    pub fn perturbation(&self, c: usize) -> Result<Vec<f64>> {
        if c >= self.candidates() {
            return Err(invalid!("candidate {c} out of range 0..{}", self.candidates()));
        }
        let (m_in, m_out, r) = (self.m_in(), self.m_out(), self.rank());
        let l = &self.l.data()[c * m_in * r..(c + 1) * m_in * r];
        let rf = &self.r_fac.data()[c * r * m_out..(c + 1) * r * m_out];
        let mut out = vec![0.0; m_in * m_out];
        crate::tensor::kernels::gemm_nn(m_in, r, m_out, l, rf, &mut out);
        Ok(out)
    }

    /// Candidate weight `(l_c · r_c) ∘ w̄` in matrix form.
    pub fn candidate_matrix(&self, c: usize) -> Result<Vec<f64>> {
        let mut p = self.perturbation(c)?;
        for (v, w) in p.iter_mut().zip(self.w_bar.data()) {
            *v *= w;
        }
        Ok(p)
    }

    pub(crate) fn from_matrix(&self, matrix: Vec<f64>) -> Result<Tensor> {
        let data = match self.layout {
            MatrixLayout::Direct => matrix,
            MatrixLayout::Kernel => transpose(&matrix, self.m_in(), self.m_out()),
        };
        Tensor::new(self.param_shape.clone(), data)
    }
}

pub(crate) fn to_matrix(param: &Tensor) -> Result<(Tensor, MatrixLayout)> {
    let (m_in, m_out, layout) = matrix_form(param.shape())?;
    let data = match layout {
        MatrixLayout::Direct => param.data().to_vec(),
        MatrixLayout::Kernel => transpose(param.data(), m_out, m_in),
    };
    Ok((Tensor::new([m_in, m_out], data)?, layout))
}

/// `w̄` copies `w*`; factor entries are i.i.d. `N(rank^{-1/2}, noise_std)`,
/// so `E[l_c · r_c]` is the all-ones matrix and every candidate starts near
/// `w*`. With `noise_std = 0` and rank 1 or 4 every candidate equals `w*`
/// exactly.
pub fn init_pse_from_map(
    w_star: &Tensor,
    candidates: usize,
    rank: usize,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<PsePosterior> {
    if candidates == 0 || rank == 0 {
        return Err(invalid!("ensemble needs C ≥ 1 and rank ≥ 1"));
    }
    if !w_star.is_finite() {
        return Err(invalid!("MAP weights contain non-finite values"));
    }
    let (w_bar, _) = to_matrix(w_star)?;
    let (m_in, m_out) = (w_bar.shape()[0], w_bar.shape()[1]);
    let init = InitSpec {
        mean: (rank as f64).powf(-0.5),
        std: noise_std,
    };
    let l = init.draw(&[candidates, m_in, rank], rng)?;
    let r_fac = init.draw(&[candidates, rank, m_out], rng)?;
    PsePosterior::new(w_bar, l, r_fac, w_star.shape().to_vec())
}

/// Candidate `c` in the original parameter shape.
pub fn sample_pse(p: &PsePosterior, c: usize) -> Result<Tensor> {
    p.from_matrix(p.candidate_matrix(c)?)
}

/// Uniform candidate indices for `b` exemplars.
pub fn draw_candidates(p: &PsePosterior, b: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..p.candidates())).collect()
}

/// One candidate per exemplar, `c_i ~ Uniform{0..C-1}`; returns the stacked
/// weights `[B, …]` and the drawn indices.
pub fn sample_pse_exemplar(
    p: &PsePosterior,
    b: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>)> {
    if b == 0 {
        return Err(invalid!("exemplar sampling needs B ≥ 1"));
    }
    let idx = draw_candidates(p, b, rng);
    let rows = idx
        .iter()
        .map(|&c| sample_pse(p, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&rows)?, idx))
}

/// Scalar whose gradient reproduces the ensemble complexity gradients:
/// `−(λ / 2C) Σ_c ‖(l_c r_c) ∘ w̄‖²`.
pub fn pse_complexity_proxy(p: &PsePosterior, prior: &IsotropicPrior) -> Result<f64> {
    let c = p.candidates();
    let mut total = 0.0;
    for k in 0..c {
        total += p.candidate_matrix(k)?.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(-prior.lambda() / (2.0 * c as f64) * total)
}

/// Ascent gradients of the ensemble complexity loss for `(w̄, l, r)`:
///
/// * `∇w̄  = −(λ/C) Σ_c P_c ∘ P_c ∘ w̄`
/// * `∇l_c = −(λ/C) (P_c ∘ w̄ ∘ w̄) r_cᵀ`
/// * `∇r_c = −(λ/C) l_cᵀ (P_c ∘ w̄ ∘ w̄)`
///
/// with `P_c = l_c r_c`.
pub fn complexity_grad_pse(
    p: &PsePosterior,
    prior: &IsotropicPrior,
) -> Result<(Tensor, Tensor, Tensor)> {
    use crate::tensor::kernels::{gemm_nt, gemm_tn};
    let (cands, m_in, m_out, r) = (p.candidates(), p.m_in(), p.m_out(), p.rank());
    let coef = -prior.lambda() / cands as f64;
    let wb = p.w_bar.data();
    let mut g_w = vec![0.0; m_in * m_out];
    let mut g_l = vec![0.0; p.l.len()];
    let mut g_r = vec![0.0; p.r_fac.len()];
    for c in 0..cands {
        let pert = p.perturbation(c)?;
        // inner = P_c ∘ w̄ ∘ w̄
        let inner: Vec<f64> = pert.iter().zip(wb).map(|(pv, w)| pv * w * w).collect();
        for ((g, pv), w) in g_w.iter_mut().zip(&pert).zip(wb) {
            *g += coef * pv * pv * w;
        }
        let lc = &p.l.data()[c * m_in * r..(c + 1) * m_in * r];
        let rc = &p.r_fac.data()[c * r * m_out..(c + 1) * r * m_out];
        let gl = &mut g_l[c * m_in * r..(c + 1) * m_in * r];
        gemm_nt(m_in, m_out, r, &inner, rc, gl);
        gl.iter_mut().for_each(|v| *v *= coef);
        let gr = &mut g_r[c * r * m_out..(c + 1) * r * m_out];
        gemm_tn(r, m_in, m_out, lc, &inner, gr);
        gr.iter_mut().for_each(|v| *v *= coef);
    }
    Ok((
        Tensor::new([m_in, m_out], g_w)?,
        Tensor::new(p.l.shape().to_vec(), g_l)?,
        Tensor::new(p.r_fac.shape().to_vec(), g_r)?,
    ))
}

/// Descent-gradient counterpart of [`edit_gradients_mfg`] for the ensemble.
pub fn edit_gradients_pse(
    grad_w_bar: &mut [f64],
    grad_l: &mut [f64],
    grad_r: &mut [f64],
    p: &PsePosterior,
    prior: &IsotropicPrior,
) -> Result<()> {
    if grad_w_bar.len() != p.w_bar.len() || grad_l.len() != p.l.len() || grad_r.len() != p.r_fac.len()
    {
        return Err(shape_err!("gradient shapes do not match the ensemble posterior"));
    }
    let (gw, gl, gr) = complexity_grad_pse(p, prior)?;
    for (dst, src) in [
        (grad_w_bar, gw.data()),
        (grad_l, gl.data()),
        (grad_r, gr.data()),
    ] {
        for (g, c) in dst.iter_mut().zip(src) {
            *g -= c;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn prior_parameterisations_agree() {
        let a = IsotropicPrior::from_lambda(2e-4, 1000).unwrap();
        assert!((a.sigma0_sq() - 5.0).abs() < 1e-12);
        let b = IsotropicPrior::from_variance(5.0, 1000).unwrap();
        assert_eq!(b.lambda(), 1.0 / (5.0 * 1000.0));
        assert!((b.lambda() - a.lambda()).abs() <= f64::EPSILON * a.lambda());
        assert!(IsotropicPrior::from_lambda(0.0, 10).is_err());
        assert!(IsotropicPrior::from_variance(1.0, 0).is_err());
    }

    #[test]
    fn mfg_init_copies_mean_and_draws_psi() {
        let w = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = init_mfg_from_map(&w, &InitSpec::default(), &mut rng()).unwrap();
        assert_eq!(p.mu(), &w);

        let big = Tensor::zeros([10_000]);
        let p = init_mfg_from_map(&big, &InitSpec::default(), &mut rng()).unwrap();
        let psi = p.psi().data();
        assert!(psi.iter().all(|&v| (-5.05..=-4.95).contains(&v)));
        let mean = p.psi().mean();
        let var = psi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (psi.len() - 1) as f64;
        assert!((mean + 5.0).abs() < 1e-3, "{mean}");
        assert!((var.sqrt() - 0.01).abs() < 5e-4, "{}", var.sqrt());

        let p = init_mfg_from_map(&w, &InitSpec::constant(-5.0), &mut rng()).unwrap();
        for s in p.std().data() {
            assert!((s - 6.737946999085467e-3).abs() < 1e-15);
        }
    }

    #[test]
    fn mfg_sampling_formula() {
        let p = MfgPosterior::new(
            Tensor::new([2], vec![1.0, 2.0]).unwrap(),
            Tensor::zeros([2]),
        )
        .unwrap();
        let eps = Tensor::new([2], vec![1.0, -1.0]).unwrap();
        assert_eq!(sample_mfg_with_noise(&p, &eps).unwrap().data(), &[2.0, 1.0]);
        let zero = Tensor::zeros([2]);
        assert_eq!(sample_mfg_with_noise(&p, &zero).unwrap(), *p.mu());
    }

    #[test]
    fn degenerate_std_gives_identical_exemplar_rows() {
        let mu = Tensor::new([2, 2], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let p = MfgPosterior::new(mu.clone(), Tensor::full([2, 2], -800.0)).unwrap();
        let s = sample_mfg_exemplar(&p, 5, &mut rng()).unwrap();
        for i in 0..5 {
            assert_eq!(s.index_outer(i).unwrap(), mu);
        }
    }

    #[test]
    fn kl_hand_values() {
        let prior = IsotropicPrior::from_variance(1.0, 10).unwrap();
        let p = MfgPosterior::new(Tensor::new([1], vec![1.0]).unwrap(), Tensor::zeros([1])).unwrap();
        assert!((kl_mfg(&p, &prior) - 0.5).abs() < 1e-15);

        let prior = IsotropicPrior::from_variance(2.5, 10).unwrap();
        let q = MfgPosterior::new(Tensor::zeros([4]), Tensor::full([4], 0.5 * 2.5f64.ln())).unwrap();
        assert!(kl_mfg(&q, &prior).abs() < 1e-14);
    }

    #[test]
    fn mfg_edit_example_and_fixed_point() {
        let prior = IsotropicPrior::from_lambda(2e-4, 1000).unwrap();
        let psi_star = -0.5 * (prior.lambda() * prior.n() as f64).ln();
        let p = MfgPosterior::new(Tensor::ones([1]), Tensor::full([1], psi_star)).unwrap();
        let (mut gm, mut gp) = (vec![0.0], vec![0.0]);
        edit_gradients_mfg(&mut gm, &mut gp, &p, &prior).unwrap();
        // descent +2e-4 ⇔ ascent −2e-4
        assert!((-gm[0] - (-2e-4)).abs() < 1e-18);
        assert!(gp[0].abs() < 1e-15);
        assert!(edit_gradients_mfg(&mut [0.0; 2], &mut gp, &p, &prior).is_err());
    }

    #[test]
    fn pse_init_and_sampling() {
        let w = Tensor::from_fn([3, 4], |i| i as f64 - 5.0);
        let p = init_pse_from_map(&w, 20, 1, 0.0, &mut rng()).unwrap();
        assert_eq!(p.candidates(), 20);
        assert_eq!(p.rank(), 1);
        for c in 0..20 {
            assert_eq!(sample_pse(&p, c).unwrap(), w);
        }
        assert!(sample_pse(&p, 20).is_err());

        let zero = init_pse_from_map(&Tensor::zeros([2, 3]), 3, 2, 0.05, &mut rng()).unwrap();
        for c in 0..3 {
            assert!(sample_pse(&zero, c).unwrap().data().iter().all(|&v| v == 0.0));
        }

        let p4 = init_pse_from_map(&Tensor::ones([100, 100]), 1, 4, 0.05, &mut rng()).unwrap();
        let mean = p4.perturbation(0).unwrap().iter().sum::<f64>() / 1e4;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn kernel_layout_roundtrips() {
        let k = Tensor::from_fn([4, 2, 3, 3], |i| i as f64);
        let p = init_pse_from_map(&k, 2, 1, 0.0, &mut rng()).unwrap();
        assert_eq!((p.m_in(), p.m_out()), (18, 4));
        assert_eq!(p.layout(), MatrixLayout::Kernel);
        assert_eq!(sample_pse(&p, 1).unwrap(), k);
        // w̄[i, o] is kernel[o, i]
        assert_eq!(p.w_bar().data()[4 + 1], k.data()[18 + 1]);
    }

    #[test]
    fn pse_edit_with_unit_perturbation_is_weight_decay() {
        let prior = IsotropicPrior::from_lambda(3e-4, 500).unwrap();
        let w = Tensor::from_fn([2, 3], |i| 0.5 * i as f64 - 1.0);
        let p = init_pse_from_map(&w, 4, 1, 0.0, &mut rng()).unwrap();
        let (gw, _, _) = complexity_grad_pse(&p, &prior).unwrap();
        for (g, x) in gw.data().iter().zip(w.data()) {
            assert!((g + prior.lambda() * x).abs() < 1e-18);
        }
        let z = init_pse_from_map(&Tensor::zeros([2, 3]), 4, 2, 0.1, &mut rng()).unwrap();
        let (a, b, c) = complexity_grad_pse(&z, &prior).unwrap();
        assert!(a.data().iter().chain(b.data()).chain(c.data()).all(|&v| v == 0.0));
    }
}
