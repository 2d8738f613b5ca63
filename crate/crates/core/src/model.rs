//! Layered classifiers whose parameters are point estimates or variational
//! posteriors, and their forward passes under the different sampling plans.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::variational::{
    self, draw_candidates, edit_gradients_mfg, edit_gradients_pse, init_mfg_from_map,
    init_pse_from_map, standard_normal, InitSpec, IsotropicPrior, MatrixLayout, MfgPosterior,
    PsePosterior,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Fixed per-channel input standardization `(x − mean) / std`.
    Standardize {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Per-channel scale and shift, the learnable half of a normalisation layer.
    Affine {
        channels: usize,
    },
    Flatten,
    GlobalAvgPool,
}

impl LayerKind {
    /// Shapes of the layer's parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerKind::Affine { channels } => vec![vec![channels], vec![channels]],
            LayerKind::Standardize { .. } | LayerKind::Flatten | LayerKind::GlobalAvgPool => vec![],
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            LayerKind::Dense { .. } | LayerKind::Conv { .. } => &["weight", "bias"],
            LayerKind::Affine { .. } => &["scale", "bias"],
            LayerKind::Standardize { .. } | LayerKind::Flatten | LayerKind::GlobalAvgPool => &[],
        }
    }
}

/// A layer parameter: a point estimate or one of the two posteriors.
#[derive(Clone, Debug, PartialEq)]
pub enum Param {
    Point(Tensor),
    Mfg(MfgPosterior),
    Pse(PsePosterior),
}

impl Param {
    pub fn shape(&self) -> &[usize] {
        match self {
            Param::Point(t) => t.shape(),
            Param::Mfg(p) => p.shape(),
            Param::Pse(p) => p.param_shape(),
        }
    }

    /// The tensors this parameter owns, in binding order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Param::Point(t) => vec![t],
            Param::Mfg(p) => vec![p.mu(), p.psi()],
            Param::Pse(p) => vec![p.w_bar(), p.l(), p.r_fac()],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Param::Point(t) => vec![t],
            Param::Mfg(p) => p.tensors_mut(),
            Param::Pse(p) => p.tensors_mut(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Param::Point(_) => "point",
            Param::Mfg(_) => "mfg",
            Param::Pse(_) => "pse",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
    pub params: Vec<Param>,
}

impl Layer {
    fn validate(&self) -> Result<()> {
        if let LayerKind::Standardize { mean, std } = &self.kind {
            if mean.is_empty() || mean.len() != std.len() {
                return Err(shape_err!("standardization needs matching non-empty mean and std"));
            }
            if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
                return Err(invalid!("standardization needs finite means and positive stds"));
            }
        }
        let shapes = self.kind.param_shapes();
        if shapes.len() != self.params.len() {
            return Err(shape_err!(
                "{:?} needs {} parameters, got {}",
                self.kind,
                shapes.len(),
                self.params.len()
            ));
        }
        for (s, p) in shapes.iter().zip(&self.params) {
            if p.shape() != s.as_slice() {
                return Err(shape_err!(
                    "{:?} parameter shape {:?}, expected {s:?}",
                    self.kind,
                    p.shape()
                ));
            }
        }
        Ok(())
    }
}

/// How variational parameters are drawn in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum DrawPlan<'a> {
    /// Point parameters and Gaussian means; ensemble layers are rejected.
    Deterministic,
    /// One draw for the whole batch. Ensemble layers use `candidate`, or a
    /// uniformly drawn candidate when `None`.
    Shared { candidate: Option<usize> },
    /// A dedicated draw per exemplar. Ensemble layers use the given
    /// candidate per exemplar, or uniform draws when `None`.
    Exemplar { candidates: Option<&'a [usize]> },
}

/// Architecture recipe used to build a fresh deterministic network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp { hidden: Vec<usize> },
    Convnet { channels: Vec<usize> },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp { hidden: vec![32, 32] }
    }
}

impl ModelSpec {
    pub fn build(
        &self,
        input_shape: &[usize],
        classes: usize,
        prior: IsotropicPrior,
        rng: &mut impl Rng,
    ) -> Result<BayesModel> {
        match self {
            ModelSpec::Mlp { hidden } => {
                let mut m = BayesModel::mlp(input_shape.iter().product(), hidden, classes, prior, rng)?;
                if input_shape.len() > 1 {
                    m.layers.insert(
                        0,
                        Layer {
                            kind: LayerKind::Flatten,
                            activation: Activation::None,
                            params: vec![],
                        },
                    );
                    m.input_shape = input_shape.to_vec();
                }
                Ok(m)
            }
            ModelSpec::Convnet { channels } => {
                if input_shape.len() != 3 || input_shape[1] != input_shape[2] {
                    return Err(shape_err!("convnet needs square [C, H, W] inputs, got {input_shape:?}"));
                }
                if channels.is_empty() {
                    return Err(invalid!("convnet needs at least one conv block"));
                }
                BayesModel::convnet(input_shape[0], input_shape[1], channels, classes, prior, rng)
            }
        }
    }
}

/// Which variational family [`BayesModel::to_variational`] installs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    Mfg(InitSpec),
    Pse {
        candidates: usize,
        rank: usize,
        noise_std: f64,
    },
}

/// Graph handles of every parameter tensor, aligned with
/// [`BayesModel::parameters`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of all bound tensors after backward, in parameter order.
    pub fn grads(&self, g: &Graph) -> Result<Vec<Vec<f64>>> {
        self.vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::Graph("parameter has no gradient; was backward run?".into()))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BayesModel {
    pub layers: Vec<Layer>,
    pub prior: IsotropicPrior,
    /// Per-example input shape (without the batch axis).
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

/// Resolved weight for one forward pass: shared by the batch or one per exemplar.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Mean,
    Shared,
    Exemplar,
}

#[derive(Clone, Copy)]
enum Weight {
    Shared(Var),
    PerExemplar(Var),
}

impl BayesModel {
    pub fn new(
        layers: Vec<Layer>,
        prior: IsotropicPrior,
        input_shape: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let m = BayesModel {
            layers,
            prior,
            input_shape,
            num_classes,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid!("a classifier needs at least two classes"));
        }
        self.layers.iter().try_for_each(Layer::validate)
    }

    /// ReLU multilayer perceptron with He-initialised weights.
    pub fn mlp(
        inputs: usize,
        hidden: &[usize],
        classes: usize,
        prior: IsotropicPrior,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = inputs;
        for (i, &h) in hidden.iter().chain(std::iter::once(&classes)).enumerate() {
            let kind = LayerKind::Dense {
                inputs: width,
                outputs: h,
            };
            let activation = if i < hidden.len() {
                Activation::Relu
            } else {
                Activation::None
            };
            layers.push(init_layer(kind, activation, rng)?);
            width = h;
        }
        Self::new(layers, prior, vec![inputs], classes)
    }

    /// Small convolutional classifier: `[conv3x3 → affine → relu]*`, global
    /// average pooling, dense head. Every conv after the first has stride 2.
    pub fn convnet(
        in_channels: usize,
        image_size: usize,
        channels: &[usize],
        classes: usize,
        prior: IsotropicPrior,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            let conv = LayerKind::Conv {
                in_channels: c_in,
                out_channels: c,
                kernel: 3,
                stride: if i == 0 { 1 } else { 2 },
                padding: 1,
            };
            layers.push(init_layer(conv, Activation::None, rng)?);
            layers.push(init_layer(LayerKind::Affine { channels: c }, Activation::Relu, rng)?);
            c_in = c;
        }
        layers.push(init_layer(LayerKind::GlobalAvgPool, Activation::None, rng)?);
        layers.push(init_layer(
            LayerKind::Dense {
                inputs: c_in,
                outputs: classes,
            },
            Activation::None,
            rng,
        )?);
        Self::new(layers, prior, vec![in_channels, image_size, image_size], classes)
    }

    /// Prepends a standardization layer using per-channel statistics of
    /// `x: [N, C, ...]` (features count as channels for flat inputs).
    pub fn standardize_inputs(&mut self, x: &Tensor) -> Result<()> {
        self.check_input(x.shape())?;
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner = x.len() / (n * c);
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, v) in x.data().iter().enumerate() {
            let ch = (i / inner) % c;
            mean[ch] += v;
            sq[ch] += v * v;
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                let var = (s / count - *m * *m).max(0.0);
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        self.layers.insert(
            0,
            Layer {
                kind: LayerKind::Standardize { mean, std },
                activation: Activation::None,
                params: vec![],
            },
        );
        self.validate()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().flat_map(Param::tensors))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut().flat_map(Param::tensors_mut))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn is_deterministic(&self) -> bool {
        self.params().all(|p| matches!(p, Param::Point(_)))
    }

    fn has_pse(&self) -> bool {
        self.params().any(|p| matches!(p, Param::Pse(_)))
    }

    /// Candidate count shared by all ensemble layers, if any.
    pub fn pse_candidates(&self) -> Option<usize> {
        self.params().find_map(|p| match p {
            Param::Pse(q) => Some(q.candidates()),
            _ => None,
        })
    }

    /// Replaces every point parameter with a posterior initialised from it.
    pub fn to_variational(&self, family: Family, rng: &mut impl Rng) -> Result<BayesModel> {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for p in &mut layer.params {
                let Param::Point(w) = p else {
                    return Err(invalid!(
                        "expected a deterministic start point, found a {} parameter",
                        p.family()
                    ));
                };
                *p = match family {
                    Family::Mfg(init) => Param::Mfg(init_mfg_from_map(w, &init, rng)?),
                    Family::Pse {
                        candidates,
                        rank,
                        noise_std,
                    } => Param::Pse(init_pse_from_map(w, candidates, rank, noise_std, rng)?),
                };
            }
        }
        Ok(out)
    }

    /// Registers every parameter tensor as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.parameters().into_iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }

    /// Registers every parameter tensor as a constant (inference only).
    pub fn bind_constants(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .parameters()
                .into_iter()
                .map(|t| g.constant(t.clone()))
                .collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(shape_err!(
                "model expects inputs [B, {:?}], got {shape:?}",
                self.input_shape
            ));
        }
        Ok(shape[0])
    }

    /// Records a forward pass and returns the logits `[B, K]`.
    ///
    /// Noise is consumed from `rng` in a fixed order: ensemble candidates
    /// first (once per pass), then for each layer in order an optional
    /// dropout mask followed by the Gaussian noise of each parameter.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        plan: DrawPlan<'_>,
        dropout: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let batch = self.check_input(g.shape(x))?;
        if bound.vars.len() != self.parameters().len() {
            return Err(invalid!("bound parameters do not belong to this model"));
        }
        if let Some(rate) = dropout {
            if !(0.0..1.0).contains(&rate) {
                return Err(invalid!("dropout rate {rate} outside [0, 1)"));
            }
        }
        let candidates: Option<Vec<usize>> = match (self.has_pse(), plan) {
            (false, _) => None,
            (true, DrawPlan::Deterministic) => {
                return Err(invalid!("ensemble posteriors have no deterministic forward pass"))
            }
            (true, DrawPlan::Shared { candidate }) => {
                let c_max = self.pse_candidates().unwrap_or(1);
                let c = candidate.unwrap_or_else(|| rng.random_range(0..c_max));
                Some(vec![c])
            }
            (true, DrawPlan::Exemplar { candidates }) => match candidates {
                Some(idx) if idx.len() != batch => {
                    return Err(invalid!("{} candidate indices for batch {batch}", idx.len()))
                }
                Some(idx) => Some(idx.to_vec()),
                None => {
                    let first = self.params().find_map(|p| match p {
                        Param::Pse(q) => Some(q),
                        _ => None,
                    });
                    Some(draw_candidates(first.expect("has_pse"), batch, rng))
                }
            },
        };

        let mode = match plan {
            DrawPlan::Deterministic => Mode::Mean,
            DrawPlan::Shared { .. } => Mode::Shared,
            DrawPlan::Exemplar { .. } => Mode::Exemplar,
        };
        let mut h = x;
        let mut cursor = 0;
        for layer in &self.layers {
            if let (Some(rate), LayerKind::Dense { .. }) = (dropout, &layer.kind) {
                h = apply_dropout(g, h, rate, rng)?;
            }
            let mut weights = Vec::with_capacity(layer.params.len());
            for p in &layer.params {
                let n = p.tensors().len();
                let vars = &bound.vars[cursor..cursor + n];
                cursor += n;
                weights.push(materialize(
                    g,
                    p,
                    vars,
                    mode,
                    batch,
                    candidates.as_deref(),
                    rng,
                )?);
            }
            h = layer_forward(g, &layer.kind, &weights, h, batch)?;
            if layer.activation == Activation::Relu {
                h = g.relu(h)?;
            }
        }
        let out = g.shape(h);
        if out != [batch, self.num_classes] {
            return Err(shape_err!(
                "network produced {out:?}, expected [{batch}, {}]",
                self.num_classes
            ));
        }
        Ok(h)
    }

    /// Class probabilities `[B, K]` for one forward pass, without recording
    /// gradients.
    pub fn predict_probs(
        &self,
        x: &Tensor,
        plan: DrawPlan<'_>,
        dropout: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_constants(&mut g);
        let xv = g.constant(x.clone());
        let logits = self.forward(&mut g, &bound, xv, plan, dropout, rng)?;
        let p = g.softmax(logits, 1)?;
        Ok(g.value(p).clone())
    }

    /// Folds the complexity loss into descent gradients (aligned with
    /// [`BayesModel::parameters`]): vanilla weight decay for point
    /// parameters, the analytic posterior edits otherwise.
    pub fn edit_gradients(&self, grads: &mut [Vec<f64>]) -> Result<()> {
        let mut cursor = 0;
        for p in self.params() {
            match p {
                Param::Point(w) => {
                    variational::weight_decay(&mut grads[cursor], w, self.prior.lambda())?;
                    cursor += 1;
                }
                Param::Mfg(q) => {
                    let (gm, rest) = grads[cursor..].split_at_mut(1);
                    edit_gradients_mfg(&mut gm[0], &mut rest[0], q, &self.prior)?;
                    cursor += 2;
                }
                Param::Pse(q) => {
                    let (gw, rest) = grads[cursor..].split_at_mut(1);
                    let (gl, gr) = rest.split_at_mut(1);
                    edit_gradients_pse(&mut gw[0], &mut gl[0], &mut gr[0], q, &self.prior)?;
                    cursor += 3;
                }
            }
        }
        if cursor != grads.len() {
            return Err(shape_err!("{} gradient blocks for {cursor} parameters", grads.len()));
        }
        Ok(())
    }
}

fn init_layer(kind: LayerKind, activation: Activation, rng: &mut impl Rng) -> Result<Layer> {
    let params = match kind {
        LayerKind::Dense { inputs, outputs } => {
            vec![he_normal(&[inputs, outputs], inputs, rng)?, Tensor::zeros([outputs])]
        }
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => vec![
            he_normal(
                &[out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                rng,
            )?,
            Tensor::zeros([out_channels]),
        ],
        LayerKind::Affine { channels } => vec![Tensor::ones([channels]), Tensor::zeros([channels])],
        LayerKind::Standardize { .. } | LayerKind::Flatten | LayerKind::GlobalAvgPool => vec![],
    };
    Ok(Layer {
        kind,
        activation,
        params: params.into_iter().map(Param::Point).collect(),
    })
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| invalid!("bad init distribution: {e}"))?;
    Ok(Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng)))
}

fn apply_dropout(g: &mut Graph, h: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
    let keep = 1.0 - rate;
    let mask = Tensor::from_fn(g.shape(h).to_vec(), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = g.constant(mask);
    g.mul(h, m)
}

fn materialize(
    g: &mut Graph,
    p: &Param,
    vars: &[Var],
    mode: Mode,
    batch: usize,
    candidates: Option<&[usize]>,
    rng: &mut impl Rng,
) -> Result<Weight> {
    match p {
        Param::Point(_) => Ok(Weight::Shared(vars[0])),
        Param::Mfg(q) => {
            let (mu, psi) = (vars[0], vars[1]);
            if mode == Mode::Mean {
                Ok(Weight::Shared(mu))
            } else if mode == Mode::Exemplar {
                let mut shape = vec![batch];
                shape.extend_from_slice(q.shape());
                let eps = g.constant(standard_normal(&shape, rng));
                let std = g.exp(psi)?;
                let std_b = g.expand(std, batch)?;
                let noise = g.mul(std_b, eps)?;
                let mu_b = g.expand(mu, batch)?;
                Ok(Weight::PerExemplar(g.add(mu_b, noise)?))
            } else {
                let eps = g.constant(standard_normal(q.shape(), rng));
                let std = g.exp(psi)?;
                let noise = g.mul(std, eps)?;
                Ok(Weight::Shared(g.add(mu, noise)?))
            }
        }
        Param::Pse(q) => {
            let idx = candidates.ok_or_else(|| invalid!("ensemble layer without candidates"))?;
            let (w_bar, l, r) = (vars[0], vars[1], vars[2]);
            let n = idx.len();
            let lc = g.index_select(l, idx)?;
            let rc = g.index_select(r, idx)?;
            let pert = g.batched_matmul(lc, rc)?;
            let wb = g.expand(w_bar, n)?;
            let mut w = g.mul(pert, wb)?;
            if q.layout() == MatrixLayout::Kernel {
                w = g.transpose(w)?;
            }
            let mut shape = vec![n];
            shape.extend_from_slice(q.param_shape());
            if mode == Mode::Exemplar {
                Ok(Weight::PerExemplar(g.reshape(w, shape)?))
            } else {
                Ok(Weight::Shared(g.reshape(w, q.param_shape().to_vec())?))
            }
        }
    }
}

fn layer_forward(g: &mut Graph, kind: &LayerKind, w: &[Weight], x: Var, batch: usize) -> Result<Var> {
    match *kind {
        LayerKind::Dense { inputs, outputs } => {
            let y = match w[0] {
                Weight::Shared(wv) => g.matmul(x, wv)?,
                Weight::PerExemplar(wv) => {
                    let xb = g.reshape(x, vec![batch, 1, inputs])?;
                    let yb = g.batched_matmul(xb, wv)?;
                    g.reshape(yb, vec![batch, outputs])?
                }
            };
            add_bias(g, y, w[1])
        }
        LayerKind::Conv { stride, padding, .. } => {
            let y = match w[0] {
                Weight::Shared(wv) => g.conv2d(x, wv, 1, stride, padding)?,
                Weight::PerExemplar(wv) => g.exemplar_conv2d(x, wv, stride, padding)?,
            };
            add_bias(g, y, w[1])
        }
        LayerKind::Affine { .. } => match (w[0], w[1]) {
            (Weight::Shared(s), Weight::Shared(b)) => g.affine(x, s, b),
            (s, b) => {
                let s = per_exemplar_var(g, s, batch)?;
                let b = per_exemplar_var(g, b, batch)?;
                g.exemplar_affine(x, s, b)
            }
        },
        LayerKind::Standardize { ref mean, ref std } => {
            let scale = g.constant(Tensor::new([std.len()], std.iter().map(|s| 1.0 / s).collect())?);
            let shift = g.constant(Tensor::new(
                [mean.len()],
                mean.iter().zip(std).map(|(m, s)| -m / s).collect(),
            )?);
            g.affine(x, scale, shift)
        }
        LayerKind::Flatten => {
            let rest: usize = g.shape(x)[1..].iter().product();
            g.reshape(x, vec![batch, rest])
        }
        LayerKind::GlobalAvgPool => {
            let s = g.shape(x).to_vec();
            if s.len() != 4 {
                return Err(shape_err!("global average pooling expects [B, C, H, W], got {s:?}"));
            }
            let flat = g.reshape(x, vec![s[0], s[1], s[2] * s[3]])?;
            g.mean_axis(flat, 2)
        }
    }
}

fn add_bias(g: &mut Graph, y: Var, b: Weight) -> Result<Var> {
    match b {
        Weight::Shared(bv) => g.bias_add(y, bv),
        Weight::PerExemplar(bv) => g.exemplar_bias_add(y, bv),
    }
}

fn per_exemplar_var(g: &mut Graph, w: Weight, batch: usize) -> Result<Var> {
    match w {
        Weight::Shared(v) => g.expand(v, batch),
        Weight::PerExemplar(v) => Ok(v),
    }
}
