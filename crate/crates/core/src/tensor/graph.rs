use crate::error::{invalid, shape_err, Error, Result};

use super::kernels::{self, axis_extents, ConvGeom};
use super::{macs, Tensor};

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchedMatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Expand(Var, usize),
    IndexSelect(Var, Vec<usize>),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Affine {
        x: Var,
        scale: Option<Var>,
        bias: Option<Var>,
        per_exemplar: bool,
    },
    GatherRows(Var, Vec<usize>),
    ClampMax(Var, f64),
    RowEntropy(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchedMatMul(..) => "batched_matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Expand(..) => "expand",
            Op::IndexSelect(..) => "index_select",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Affine { .. } => "affine",
            Op::GatherRows(..) => "gather_rows",
            Op::ClampMax(..) => "clamp_max",
            Op::RowEntropy(_) => "row_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of primitive ops recorded during one forward pass.
///
/// Nodes are stored in recording order, which is a topological order.
/// [`Graph::backward`] walks them in exact reverse order and may be called
/// once; a fresh graph is built for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf that tracks gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient of a leaf as a tensor shaped like the leaf itself.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let value = &self.nodes[v.0].value;
        value
            .grad()
            .map(|g| Tensor::new(value.shape().to_vec(), g.to_vec()).expect("grad length"))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded primitives, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.backward_done {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        let name = op.name();
        let value = Tensor::new(shape, data)?;
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        macs::add((m * k * n) as u64);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err!("batched_matmul of {sa:?} and {sb:?}"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            kernels::gemm_nn(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        macs::add((bs * m * k * n) as u64);
        self.push(vec![bs, m, n], out, Op::BatchedMatMul(a, b), &[a, b])
    }

    /// Grouped 2-d cross-correlation with zero padding.
    ///
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, groups: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), groups, stride, pad)?;
        let out = geom.forward(self.data(x), self.data(w));
        macs::add(geom.macs());
        self.push(geom.out_shape().to_vec(), out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Convolution with a dedicated kernel per exemplar.
    ///
    /// `x: [B, Cin, H, W]`, `w: [B, Cout, Cin, kh, kw]`. The batch is folded
    /// into the channel axis and run as a single `groups = B` convolution.
    pub fn exemplar_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 5 || sx[0] != sw[0] {
            return Err(shape_err!("exemplar_conv2d of {sx:?} and {sw:?}"));
        }
        let b = sx[0];
        let xg = self.reshape(x, vec![1, b * sx[1], sx[2], sx[3]])?;
        let wg = self.reshape(w, vec![b * sw[1], sw[2], sw[3], sw[4]])?;
        let y = self.conv2d(xg, wg, b, stride, pad)?;
        let sy = self.shape(y).to_vec();
        self.reshape(y, vec![b, sw[1], sy[2], sy[3]])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(shape_err!("transpose needs ≥ 2 dims, got {s:?}"));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s.len() - 2;
        let mut out_shape = s.clone();
        out_shape[batch] = c;
        out_shape[batch + 1] = r;
        let out = transpose_last2(self.data(a), r, c);
        self.push(out_shape, out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let data = self.data(a).to_vec();
        self.push(shape, data, Op::Reshape(a), &[a])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what} of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// Tiles `a` along a new leading axis of length `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(invalid!("expand to zero copies"));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(a));
        self.push(shape, out, Op::Expand(a, n), &[a])
    }

    /// Gathers rows along the leading axis.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(shape_err!("index_select needs ≥ 2 dims, got {s:?}"));
        }
        if indices.is_empty() {
            return Err(invalid!("index_select with no indices"));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.data(a);
        let mut out = Vec::with_capacity(inner * indices.len());
        for &i in indices {
            if i >= s[0] {
                return Err(invalid!("index {i} out of range for leading dim {}", s[0]));
            }
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        self.push(shape, out, Op::IndexSelect(a, indices.to_vec()), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x.exp()).collect();
        self.push(self.shape(a).to_vec(), out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x <= 0.0) {
            return Err(invalid!("log of non-positive value {bad}"));
        }
        let out = self.data(a).iter().map(|x| x.ln()).collect();
        self.push(self.shape(a).to_vec(), out, Op::Log(a), &[a])
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(shape_err!("axis {axis} out of range for {:?}", self.shape(a)));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let out = kernels::softmax(self.data(a), self.shape(a), axis);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a, axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let out = kernels::log_softmax(self.data(a), self.shape(a), axis);
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a, axis), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        self.push(vec![1], vec![s / n], Op::Mean(a), &[a])
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        self.check_axis(a, axis)?;
        let s = self.shape(a);
        let (outer, dim, inner) = axis_extents(s, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let row = &src[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut shape: Vec<usize> = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((shape, out))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis(a, axis)?;
        self.push(shape, out, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut out) = self.reduce_axis(a, axis)?;
        let dim = self.shape(a)[axis] as f64;
        out.iter_mut().for_each(|v| *v /= dim);
        self.push(shape, out, Op::MeanAxis(a, axis), &[a])
    }

    fn affine_impl(
        &mut self,
        x: Var,
        scale: Option<Var>,
        bias: Option<Var>,
        per_exemplar: bool,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err!("affine input needs [B, C, ...], got {sx:?}"));
        }
        let expected: Vec<usize> = if per_exemplar {
            vec![sx[0], sx[1]]
        } else {
            vec![sx[1]]
        };
        for p in scale.iter().chain(bias.iter()) {
            if self.shape(*p) != expected.as_slice() {
                return Err(shape_err!(
                    "affine parameter {:?} does not match {expected:?} for input {sx:?}",
                    self.shape(*p)
                ));
            }
        }
        let (b, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let xd = self.data(x);
        let sd = scale.map(|v| self.data(v));
        let bd = bias.map(|v| self.data(v));
        let mut out = vec![0.0; xd.len()];
        for n in 0..b {
            for ch in 0..c {
                let p = if per_exemplar { n * c + ch } else { ch };
                let s = sd.map_or(1.0, |d| d[p]);
                let o = bd.map_or(0.0, |d| d[p]);
                let base = (n * c + ch) * inner;
                for i in base..base + inner {
                    out[i] = if sd.is_some() { s * xd[i] + o } else { xd[i] + o };
                }
            }
        }
        if scale.is_some() {
            macs::add(xd.len() as u64);
        }
        let mut inputs = vec![x];
        inputs.extend(scale);
        inputs.extend(bias);
        self.push(
            sx,
            out,
            Op::Affine {
                x,
                scale,
                bias,
                per_exemplar,
            },
            &inputs,
        )
    }

    /// `y[b,c,…] = scale[c]·x[b,c,…] + bias[c]`.
    pub fn affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        self.affine_impl(x, Some(scale), Some(bias), false)
    }

    /// `y[b,c,…] = scale[b,c]·x[b,c,…] + bias[b,c]`, one parameter set per
    /// exemplar (no broadcasting over the batch axis).
    pub fn exemplar_affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        self.affine_impl(x, Some(scale), Some(bias), true)
    }

    /// Adds a per-channel bias `[C]` to `x: [B, C, …]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.affine_impl(x, None, Some(bias), false)
    }

    /// Adds a per-exemplar bias `[B, C]` to `x: [B, C, …]`.
    pub fn exemplar_bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.affine_impl(x, None, Some(bias), true)
    }

    /// `y[b] = x[b, idx[b]]` for `x: [B, K]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(shape_err!("gather_rows of {s:?} with {} indices", idx.len()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(invalid!("label {bad} out of range for {} classes", s[1]));
        }
        let xd = self.data(x);
        let out = idx.iter().enumerate().map(|(b, &k)| xd[b * s[1] + k]).collect();
        self.push(vec![s[0]], out, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Elementwise `min(x, c)`; the gradient is zero wherever `x ≥ c`.
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.min(c)).collect();
        self.push(self.shape(x).to_vec(), out, Op::ClampMax(x, c), &[x])
    }

    /// Shannon entropy (nats) of every row of a `[B, K]` probability table,
    /// with `0 · ln 0 = 0`.
    pub fn row_entropy(&mut self, p: Var) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("row_entropy expects [B, K], got {s:?}"));
        }
        let pd = self.data(p);
        if let Some(bad) = pd.iter().find(|&&v| v < 0.0) {
            return Err(invalid!("negative probability {bad}"));
        }
        let out = pd
            .chunks(s[1])
            .map(|row| -row.iter().map(|&v| xlogx(v)).sum::<f64>())
            .collect();
        self.push(vec![s[0]], out, Op::RowEntropy(p), &[p])
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, filling the grad slot of every
    /// gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward called twice on the same graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| kernels::gemm_nt(m, n, k, g, db, ga));
                acc(*b, &mut |gb| kernels::gemm_tn(k, m, n, da, g, gb));
            }
            Op::BatchedMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for t in 0..bs {
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            &db[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..bs {
                        kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &da[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                        );
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let (dx_data, dw_data) = (self.data(*x), self.data(*w));
                acc(*x, &mut |gx| geom.backward(dx_data, dw_data, g, Some(gx), None));
                acc(*w, &mut |gw| geom.backward(dx_data, dw_data, g, None, Some(gw)));
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_last2(g, r, c);
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(db) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(da) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (o, gv) in ga.iter_mut().zip(g) {
                    *o += gv * c;
                }
            }),
            Op::Expand(a, n) => acc(*a, &mut |ga| {
                let inner = ga.len();
                for t in 0..*n {
                    add_into(ga, &g[t * inner..(t + 1) * inner]);
                }
            }),
            Op::IndexSelect(a, idx) => acc(*a, &mut |ga| {
                let inner = g.len() / idx.len();
                for (t, &src) in idx.iter().enumerate() {
                    add_into(
                        &mut ga[src * inner..(src + 1) * inner],
                        &g[t * inner..(t + 1) * inner],
                    );
                }
            }),
            Op::Relu(a) => {
                let da = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(da) {
                        if *x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += gv * yv;
                }
            }),
            Op::Log(a) => {
                let da = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(da) {
                        *o += gv / x;
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, dim, inner) = axis_extents(node.value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * dim + k) * inner + i;
                            let dot: f64 = (0..dim).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..dim {
                                ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, dim, inner) = axis_extents(node.value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * dim + k) * inner + i;
                            let total: f64 = (0..dim).map(|k| g[idx(k)]).sum();
                            for k in 0..dim {
                                ga[idx(k)] += g[idx(k)] - y[idx(k)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let n = ga.len() as f64;
                ga.iter_mut().for_each(|o| *o += g[0] / n);
            }),
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, dim, inner) = axis_extents(self.shape(*a), *axis);
                let factor = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / dim as f64
                } else {
                    1.0
                };
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for k in 0..dim {
                            let dst = &mut ga[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                            for (d, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += gv * factor;
                            }
                        }
                    }
                });
            }
            Op::Affine {
                x,
                scale,
                bias,
                per_exemplar,
            } => {
                let sx = self.shape(*x);
                let (b, c) = (sx[0], sx[1]);
                let inner: usize = sx[2..].iter().product();
                let xd = self.data(*x);
                let param = |n: usize, ch: usize| if *per_exemplar { n * c + ch } else { ch };
                let sd = scale.map(|v| self.data(v));
                acc(*x, &mut |gx| {
                    for n in 0..b {
                        for ch in 0..c {
                            let s = sd.map_or(1.0, |d| d[param(n, ch)]);
                            let base = (n * c + ch) * inner;
                            for i in base..base + inner {
                                gx[i] += g[i] * s;
                            }
                        }
                    }
                });
                if let Some(sv) = scale {
                    acc(*sv, &mut |gs| {
                        for n in 0..b {
                            for ch in 0..c {
                                let base = (n * c + ch) * inner;
                                let dot: f64 =
                                    (base..base + inner).map(|i| g[i] * xd[i]).sum();
                                gs[param(n, ch)] += dot;
                            }
                        }
                    });
                }
                if let Some(bv) = bias {
                    acc(*bv, &mut |gb| {
                        for n in 0..b {
                            for ch in 0..c {
                                let base = (n * c + ch) * inner;
                                gb[param(n, ch)] += g[base..base + inner].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::GatherRows(x, idx) => {
                let k = self.shape(*x)[1];
                acc(*x, &mut |gx| {
                    for (b, &j) in idx.iter().enumerate() {
                        gx[b * k + j] += g[b];
                    }
                });
            }
            Op::ClampMax(x, c) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for ((o, gv), v) in gx.iter_mut().zip(g).zip(xd) {
                        if *v < *c {
                            *o += gv;
                        }
                    }
                });
            }
            Op::RowEntropy(p) => {
                let k = self.shape(*p)[1];
                let pd = self.data(*p);
                acc(*p, &mut |gp| {
                    for (j, (o, v)) in gp.iter_mut().zip(pd).enumerate() {
                        *o -= g[j / k] * (v.max(f64::MIN_POSITIVE).ln() + 1.0);
                    }
                });
            }
        }
    }
}

pub(crate) fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Transposes the trailing `[r, c]` block of every matrix in `data`.
fn transpose_last2(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}
