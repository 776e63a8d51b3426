use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization used by [`Tape::variance`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N - 1.
    Sample,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, dims: ConvDims },
    Relu { x: Var },
    Sum { x: Var },
    Square { x: Var },
    ChannelScale { x: Var, gates: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, weight: Var, bias: Var },
    SelectRows { x: Var, rows: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    MeanSquaredError { pred: Var, targets: Vec<S> },
    LinComb { xs: Vec<Var>, coeffs: Vec<S> },
    Variance { xs: Vec<Var>, kind: VarianceKind },
    Covariance { x: Var, centered: Vec<S> },
    SquaredDistance { a: Var, b: Var },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
            Op::Relu { x } | Op::Sum { x } | Op::Square { x } | Op::GlobalAvgPool { x } => vec![*x],
            Op::ChannelScale { x, gates } => vec![*x, *gates],
            Op::Linear { x, weight, bias } => vec![*x, *weight, *bias],
            Op::SelectRows { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::MeanSquaredError { pred, .. } => vec![*pred],
            Op::LinComb { xs, .. } | Op::Variance { xs, .. } => xs.clone(),
            Op::Covariance { x, .. } => vec![*x],
            Op::SquaredDistance { a, b } => vec![*a, *b],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Ordered record of evaluated primitives.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction and a single reverse sweep visits each node once.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn tensor(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value.values()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, values: Vec<S>, op: Op<S>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].value.requires_grad());
        let value = Tensor::new(shape, values)
            .expect("op produced consistent shape")
            .with_grad(requires_grad);
        self.push(value, op)
    }

    fn scalar_node(&mut self, value: S, op: Op<S>) -> Var {
        self.derived(Vec::new(), vec![value], op)
    }

    fn require_scalar(&self, op: &'static str, v: Var) -> Result<()> {
        if self.nodes[v.0].value.is_scalar() {
            Ok(())
        } else {
            Err(Error::shape(op, "expected a scalar input", self.shape(v), &[1]))
        }
    }

    /// Valid (no padding), stride-1 cross-correlation.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (is, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if is.len() != 4 || ks.len() != 4 {
            return Err(Error::shape("conv2d", "input and kernel must be 4-d", is, ks));
        }
        if is[1] != ks[1] {
            return Err(Error::shape("conv2d", "input channels differ from kernel channels", is, ks));
        }
        if ks[2] > is[2] || ks[3] > is[3] {
            return Err(Error::shape("conv2d", "kernel larger than input", is, ks));
        }
        if bs != [ks[0]] {
            return Err(Error::shape("conv2d", "bias length must equal output channels", bs, ks));
        }
        let dims = ConvDims {
            batch: is[0],
            in_ch: is[1],
            height: is[2],
            width: is[3],
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
        };
        let out = kernels::conv2d_forward(&dims, self.value(input), self.value(kernel), self.value(bias));
        let shape = vec![dims.batch, dims.out_ch, dims.out_h(), dims.out_w()];
        Ok(self.derived(shape, out, Op::Conv2d { input, kernel, bias, dims }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so divergence stays visible downstream.
        let out = self.value(x).iter().map(|&v| if v <= S::zero() { S::zero() } else { v }).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Relu { x })
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        self.scalar_node(total, Op::Sum { x })
    }

    /// Elementwise square.
    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Square { x })
    }

    /// Multiplies channel `c` of a `[B,C,H,W]` tensor by `gates[c]`.
    pub fn channel_scale(&mut self, x: Var, gates: Var) -> Result<Var> {
        let (xs, gs) = (self.shape(x), self.shape(gates));
        if xs.len() != 4 || gs.len() != 1 || gs[0] != xs[1] {
            return Err(Error::shape("channel_scale", "gate count must equal channel count", xs, gs));
        }
        let plane = xs[2] * xs[3];
        let channels = xs[1];
        let shape = xs.to_vec();
        let g = self.value(gates);
        let out = self
            .value(x)
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, p)| {
                let gate = g[i % channels];
                p.iter().map(move |&v| v * gate)
            })
            .collect();
        Ok(self.derived(shape, out, Op::ChannelScale { x, gates }))
    }

    /// Spatial mean: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", "input must be 4-d", xs, &[]));
        }
        let shape = vec![xs[0], xs[1]];
        let plane = xs[2] * xs[3];
        let inv = S::one() / S::of(plane as f64);
        let out = self.value(x).chunks(plane).map(|p| p.iter().copied().sum::<S>() * inv).collect();
        Ok(self.derived(shape, out, Op::GlobalAvgPool { x }))
    }

    /// `x[B,F] * weight[K,F]^T + bias[K]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", "inner dimensions must agree", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("linear", "bias length must equal output features", bs, ws));
        }
        let (batch, feat, classes) = (xs[0], xs[1], ws[0]);
        let out = kernels::linear_forward(batch, feat, classes, self.value(x), self.value(weight), self.value(bias));
        Ok(self.derived(vec![batch, classes], out, Op::Linear { x, weight, bias }))
    }

    /// Gathers rows along the leading dimension.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= xs[0]) {
            return Err(Error::shape("select_rows", "row index out of range", xs, &[rows.len()]));
        }
        let row_len: usize = xs[1..].iter().product();
        let mut shape = xs.to_vec();
        shape[0] = rows.len();
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&src[r * row_len..(r + 1) * row_len]);
        }
        Ok(self.derived(shape, out, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", "one label per row required", ls, &[labels.len()]));
        }
        let classes = ls[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let loss = kernels::cross_entropy(self.value(logits), classes, labels);
        let probs = kernels::softmax_rows(self.value(logits), classes);
        Ok(self.scalar_node(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over all entries of `(pred - onehot(label))^2`.
    pub fn mse_loss(&mut self, pred: Var, labels: &[usize]) -> Result<Var> {
        let ps = self.shape(pred);
        if ps.len() != 2 || ps[0] != labels.len() {
            return Err(Error::shape("mse_loss", "one label per row required", ps, &[labels.len()]));
        }
        let classes = ps[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut targets = vec![S::zero(); labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            targets[i * classes + l] = S::one();
        }
        let n = S::of(targets.len() as f64);
        let loss = self
            .value(pred)
            .iter()
            .zip(&targets)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<S>()
            / n;
        Ok(self.scalar_node(loss, Op::MeanSquaredError { pred, targets }))
    }

    /// `sum_i coeffs[i] * xs[i]` over equally shaped inputs.
    pub fn lin_comb(&mut self, xs: &[Var], coeffs: &[S]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::TooFewInputs { op: "lin_comb", min: 1, got: 0 });
        }
        if xs.len() != coeffs.len() {
            return Err(Error::shape("lin_comb", "one coefficient per input", &[xs.len()], &[coeffs.len()]));
        }
        let shape = self.shape(xs[0]).to_vec();
        for &x in &xs[1..] {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::shape("lin_comb", "inputs must share a shape", &shape, self.shape(x)));
            }
        }
        let mut out = vec![S::zero(); self.value(xs[0]).len()];
        for (&x, &c) in xs.iter().zip(coeffs) {
            for (o, &v) in out.iter_mut().zip(self.value(x)) {
                *o += c * v;
            }
        }
        Ok(self.derived(shape, out, Op::LinComb { xs: xs.to_vec(), coeffs: coeffs.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[a, b], &[S::one(), S::one()])
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        self.lin_comb(&[x], &[factor])
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::TooFewInputs { op: "mean", min: 1, got: 0 });
        }
        for &x in xs {
            self.require_scalar("mean", x)?;
        }
        let w = S::one() / S::of(xs.len() as f64);
        self.lin_comb(xs, &vec![w; xs.len()])
    }

    /// Variance of scalar nodes.
    pub fn variance(&mut self, xs: &[Var], kind: VarianceKind) -> Result<Var> {
        let min = match kind {
            VarianceKind::Population => 1,
            VarianceKind::Sample => 2,
        };
        if xs.len() < min {
            return Err(Error::TooFewInputs { op: "variance", min, got: xs.len() });
        }
        for &x in xs {
            self.require_scalar("variance", x)?;
        }
        let vals: Vec<S> = xs.iter().map(|&x| self.scalar(x)).collect();
        let value = variance_value(&vals, kind);
        Ok(self.scalar_node(value, Op::Variance { xs: xs.to_vec(), kind }))
    }

    /// Unbiased column covariance of an `[n, d]` matrix, `n >= 2`.
    pub fn covariance(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[0] < 2 {
            return Err(Error::shape("covariance", "need a 2-d input with at least 2 rows", xs, &[]));
        }
        let (n, d) = (xs[0], xs[1]);
        let (cov, centered) = kernels::covariance(self.value(x), n, d);
        Ok(self.derived(vec![d, d], cov, Op::Covariance { x, centered }))
    }

    /// `sum (a - b)^2` over equally shaped inputs.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("squared_distance", "shapes differ", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.scalar_node(value, Op::SquaredDistance { a, b }))
    }

    /// Accumulates `d root / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_impl(root, None)
    }

    /// Like [`Tape::backward`], but only propagates along paths that reach `targets`.
    ///
    /// Leaves outside `targets` are left untouched, which skips e.g. kernel
    /// gradients when only gate gradients are wanted.
    pub fn backward_wrt(&mut self, root: Var, targets: &[Var]) -> Result<()> {
        self.backward_impl(root, Some(targets))
    }

    fn backward_impl(&mut self, root: Var, targets: Option<&[Var]>) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        let n = root.0 + 1;
        let mut needed = vec![false; n];
        match targets {
            None => {
                for (i, node) in self.nodes[..n].iter().enumerate() {
                    needed[i] = node.value.requires_grad();
                }
            }
            Some(targets) => {
                for t in targets.iter().filter(|t| t.0 < n) {
                    needed[t.0] = self.nodes[t.0].value.requires_grad();
                }
                for i in 0..n {
                    if !needed[i] && !matches!(self.nodes[i].op, Op::Leaf) {
                        needed[i] = self.nodes[i].op.inputs().iter().any(|v| needed[v.0]);
                    }
                }
            }
        }

        let mut adj: Vec<Option<Vec<S>>> = vec![None; n];
        if needed[root.0] {
            adj[root.0] = Some(vec![S::one()]);
        }
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let delta = adj[i].take();
                self.nodes[i].value.accumulate_grad(delta.as_deref());
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &needed, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], needed: &[bool], adj: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, dims } => {
                let mut di = needed[input.0].then(|| take_or_zeros(adj, *input, self.value(*input).len()));
                let mut dk = needed[kernel.0].then(|| take_or_zeros(adj, *kernel, self.value(*kernel).len()));
                let mut db = needed[bias.0].then(|| take_or_zeros(adj, *bias, self.value(*bias).len()));
                kernels::conv2d_backward(
                    dims,
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    di.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put(adj, *input, di);
                put(adj, *kernel, dk);
                put(adj, *bias, db);
            }
            Op::Relu { x } => {
                if needed[x.0] {
                    let xv = self.value(*x);
                    add_into(adj, *x, xv.len(), |k| if xv[k] > S::zero() { g[k] } else { S::zero() });
                }
            }
            Op::Sum { x } => {
                if needed[x.0] {
                    let len = self.value(*x).len();
                    add_into(adj, *x, len, |_| g[0]);
                }
            }
            Op::Square { x } => {
                if needed[x.0] {
                    let xv = self.value(*x);
                    let two = S::of(2.0);
                    add_into(adj, *x, xv.len(), |k| two * xv[k] * g[k]);
                }
            }
            Op::ChannelScale { x, gates } => {
                let shape = node.value.shape();
                let (channels, plane) = (shape[1], shape[2] * shape[3]);
                let gv = self.value(*gates);
                if needed[x.0] {
                    add_into(adj, *x, g.len(), |k| g[k] * gv[(k / plane) % channels]);
                }
                if needed[gates.0] {
                    let xv = self.value(*x);
                    let mut dg = take_or_zeros(adj, *gates, channels);
                    for (p, (gp, xp)) in g.chunks(plane).zip(xv.chunks(plane)).enumerate() {
                        dg[p % channels] += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<S>();
                    }
                    adj[gates.0] = Some(dg);
                }
            }
            Op::GlobalAvgPool { x } => {
                if needed[x.0] {
                    let xs = self.shape(*x);
                    let plane = xs[2] * xs[3];
                    let inv = S::one() / S::of(plane as f64);
                    add_into(adj, *x, g.len() * plane, |k| g[k / plane] * inv);
                }
            }
            Op::Linear { x, weight, bias } => {
                let ws = self.shape(*weight);
                let (classes, feat) = (ws[0], ws[1]);
                let batch = g.len() / classes;
                if needed[x.0] {
                    let mut dx = take_or_zeros(adj, *x, batch * feat);
                    S::gemm(
                        batch,
                        classes,
                        feat,
                        S::one(),
                        g,
                        (classes as isize, 1),
                        self.value(*weight),
                        (feat as isize, 1),
                        S::one(),
                        &mut dx,
                        (feat as isize, 1),
                    );
                    adj[x.0] = Some(dx);
                }
                if needed[weight.0] {
                    let mut dw = take_or_zeros(adj, *weight, classes * feat);
                    S::gemm(
                        classes,
                        batch,
                        feat,
                        S::one(),
                        g,
                        (1, classes as isize),
                        self.value(*x),
                        (feat as isize, 1),
                        S::one(),
                        &mut dw,
                        (feat as isize, 1),
                    );
                    adj[weight.0] = Some(dw);
                }
                if needed[bias.0] {
                    let mut db = take_or_zeros(adj, *bias, classes);
                    for row in g.chunks(classes) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    adj[bias.0] = Some(db);
                }
            }
            Op::SelectRows { x, rows } => {
                if needed[x.0] {
                    let len = self.value(*x).len();
                    let row_len = len / self.shape(*x)[0];
                    let mut dx = take_or_zeros(adj, *x, len);
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, &v) in dx[r * row_len..(r + 1) * row_len].iter_mut().zip(&g[k * row_len..(k + 1) * row_len]) {
                            *d += v;
                        }
                    }
                    adj[x.0] = Some(dx);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if needed[logits.0] {
                    let classes = self.shape(*logits)[1];
                    let scale = g[0] / S::of(labels.len() as f64);
                    add_into(adj, *logits, probs.len(), |k| {
                        let hit = if labels[k / classes] == k % classes { S::one() } else { S::zero() };
                        (probs[k] - hit) * scale
                    });
                }
            }
            Op::MeanSquaredError { pred, targets } => {
                if needed[pred.0] {
                    let pv = self.value(*pred);
                    let scale = S::of(2.0) * g[0] / S::of(targets.len() as f64);
                    add_into(adj, *pred, pv.len(), |k| (pv[k] - targets[k]) * scale);
                }
            }
            Op::LinComb { xs, coeffs } => {
                for (&x, &c) in xs.iter().zip(coeffs) {
                    if needed[x.0] {
                        add_into(adj, x, g.len(), |k| c * g[k]);
                    }
                }
            }
            Op::Variance { xs, kind } => {
                let vals: Vec<S> = xs.iter().map(|&x| self.scalar(x)).collect();
                let mean = vals.iter().copied().sum::<S>() / S::of(vals.len() as f64);
                let denom = match kind {
                    VarianceKind::Population => vals.len(),
                    VarianceKind::Sample => vals.len() - 1,
                };
                let factor = S::of(2.0) / S::of(denom as f64) * g[0];
                for (&x, &v) in xs.iter().zip(&vals) {
                    if needed[x.0] {
                        add_into(adj, x, 1, |_| factor * (v - mean));
                    }
                }
            }
            Op::Covariance { x, centered } => {
                if needed[x.0] {
                    let xs = self.shape(*x);
                    let (n, d) = (xs[0], xs[1]);
                    let mut dx = take_or_zeros(adj, *x, n * d);
                    kernels::covariance_backward(centered, n, d, g, &mut dx);
                    adj[x.0] = Some(dx);
                }
            }
            Op::SquaredDistance { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let two = S::of(2.0) * g[0];
                if needed[a.0] {
                    add_into(adj, *a, av.len(), |k| two * (av[k] - bv[k]));
                }
                if needed[b.0] {
                    add_into(adj, *b, bv.len(), |k| two * (bv[k] - av[k]));
                }
            }
        }
    }
}

pub(crate) fn variance_value<S: Scalar>(vals: &[S], kind: VarianceKind) -> S {
    let n = S::of(vals.len() as f64);
    let mean = vals.iter().copied().sum::<S>() / n;
    let ss = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>();
    match kind {
        VarianceKind::Population => ss / n,
        VarianceKind::Sample => ss / (n - S::one()),
    }
}

fn take_or_zeros<S: Scalar>(adj: &mut [Option<Vec<S>>], v: Var, len: usize) -> Vec<S> {
    adj[v.0].take().unwrap_or_else(|| vec![S::zero(); len])
}

fn put<S>(adj: &mut [Option<Vec<S>>], v: Var, grad: Option<Vec<S>>) {
    if grad.is_some() {
        adj[v.0] = grad;
    }
}

fn add_into<S: Scalar>(adj: &mut [Option<Vec<S>>], v: Var, len: usize, f: impl Fn(usize) -> S) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (k, a) in acc.iter_mut().enumerate() {
                *a += f(k);
            }
        }
        slot => *slot = Some((0..len).map(f).collect()),
    }
}
