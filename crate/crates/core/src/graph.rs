//! Reverse-mode differentiation over a recorded forward pass.
//!
//! A [`Graph`] is built op by op; each node caches its forward value. A dual
//! graph additionally caches a second forward pass on a baseline input, which
//! the DeepLIFT rescale backward needs.

use crate::error::{CoreError, Result};
use crate::ops::{self, BatchStats, BnMode, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward semantics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardMode {
    Standard,
    /// ReLU backward also zeroes negative upstream gradients.
    GuidedRelu,
    /// Nonlinearities use the secant multiplier `Δy/Δx`; falls back to the
    /// local derivative when `|Δx| <= eps`.
    DeepLiftRescale {
        eps: f64,
    },
}

impl BackwardMode {
    pub const DEFAULT_DEEPLIFT_EPS: f64 = 1e-7;

    pub fn deeplift() -> Self {
        BackwardMode::DeepLiftRescale {
            eps: Self::DEFAULT_DEEPLIFT_EPS,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            BackwardMode::Standard => "standard",
            BackwardMode::GuidedRelu => "guided-relu",
            BackwardMode::DeepLiftRescale { .. } => "deeplift-rescale",
        }
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Input,
    Param(String),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeom,
    },
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Relu(NodeId),
    ResizeNearest {
        input: NodeId,
        target: (usize, usize),
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Affine {
        input: NodeId,
        scale: S,
    },
    MulConst {
        input: NodeId,
        factor: Tensor<S>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    PixelReadout {
        input: NodeId,
        row: usize,
        col: usize,
        weights: Vec<S>,
    },
    MaskedMse {
        pred: NodeId,
        target: Tensor<S>,
        mask: Vec<bool>,
        count: usize,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu(_) => "relu",
            Op::ResizeNearest { .. } => "resize_nearest",
            Op::Concat { .. } => "concat_channels",
            Op::Affine { .. } => "affine",
            Op::MulConst { .. } => "mul_const",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::PixelReadout { .. } => "pixel_readout",
            Op::MaskedMse { .. } => "masked_mse",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    baseline: Option<Tensor<S>>,
    requires_grad: bool,
    batch_stats: Option<BatchStats<S>>,
}

#[derive(Clone, Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    dual: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            dual: false,
        }
    }

    /// A graph that carries a baseline forward cache alongside the primal one.
    pub fn new_dual() -> Self {
        Graph {
            nodes: Vec::new(),
            dual: true,
        }
    }

    pub fn is_dual(&self) -> bool {
        self.dual
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn baseline_value(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.0].baseline.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Batch statistics recorded by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<&BatchStats<S>> {
        self.nodes[id.0].batch_stats.as_ref()
    }

    fn push(
        &mut self,
        op: Op<S>,
        value: Tensor<S>,
        baseline: Option<Tensor<S>>,
        requires_grad: bool,
    ) -> NodeId {
        debug_assert_eq!(self.dual, baseline.is_some());
        self.nodes.push(Node {
            op,
            value,
            baseline,
            requires_grad,
            batch_stats: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    fn base(&self, id: NodeId) -> &Tensor<S> {
        self.nodes[id.0]
            .baseline
            .as_ref()
            .expect("dual graph node without baseline")
    }

    /// Input leaf. In a dual graph the baseline equals the value.
    pub fn input(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        let baseline = self.dual.then(|| value.clone());
        self.push(Op::Input, value, baseline, requires_grad)
    }

    /// Input leaf with a distinct baseline value; only valid on a dual graph.
    pub fn input_dual(
        &mut self,
        value: Tensor<S>,
        baseline: Tensor<S>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        if !self.dual {
            return Err(CoreError::MissingBaseline);
        }
        value.expect_same_shape(&baseline)?;
        Ok(self.push(Op::Input, value, Some(baseline), requires_grad))
    }

    pub fn param(
        &mut self,
        name: impl Into<String>,
        value: Tensor<S>,
        requires_grad: bool,
    ) -> NodeId {
        let baseline = self.dual.then(|| value.clone());
        self.push(Op::Param(name.into()), value, baseline, requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let geom = ops::conv_geom(self.value(input), self.value(kernel), stride, padding)?;
        let like = self.value(input);
        let shape = out_shape(like, [geom.n, geom.c_out, geom.oh, geom.ow]);
        let k = self.value(kernel).data();
        let value = Tensor::new(shape.clone(), ops::conv2d_raw(like.data(), k, &geom))?;
        let baseline = if self.dual {
            Some(Tensor::new(
                shape,
                ops::conv2d_raw(self.base(input).data(), self.base(kernel).data(), &geom),
            )?)
        } else {
            None
        };
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            value,
            baseline,
            rg,
        ))
    }

    /// Batch norm over `scale`/`shift` parameter nodes.
    ///
    /// Eval mode normalizes with the given running statistics; train mode
    /// with batch statistics, which are recorded on the node.
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        running_mean: &[S],
        running_var: &[S],
        mode: BnMode,
        eps: S,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let dims = ops::check_bn(
            x,
            self.value(scale),
            self.value(shift),
            running_mean,
            running_var,
            eps,
        )?;
        if mode == BnMode::Train && self.dual {
            return Err(CoreError::UnsupportedInMode {
                op: "batchnorm2d(train)",
                mode: "dual-forward",
            });
        }
        let (mean, var, stats) = match mode {
            BnMode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
            BnMode::Train => {
                let st = ops::batch_stats(x.data(), dims);
                (st.mean.clone(), st.var.clone(), Some(st))
            }
        };
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let value = Tensor::new(
            x.shape().to_vec(),
            ops::bn_apply(x.data(), dims, sc, sh, &mean, &var, eps),
        )?;
        let baseline = if self.dual {
            let bx = self.base(input);
            Some(Tensor::new(
                bx.shape().to_vec(),
                ops::bn_apply(
                    bx.data(),
                    dims,
                    self.base(scale).data(),
                    self.base(shift).data(),
                    &mean,
                    &var,
                    eps,
                ),
            )?)
        } else {
            None
        };
        let inv_std = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let rg = self.rg(&[input, scale, shift]);
        let id = self.push(
            Op::BatchNorm {
                input,
                scale,
                shift,
                mean,
                inv_std,
                train: mode == BnMode::Train,
            },
            value,
            baseline,
            rg,
        );
        self.nodes[id.0].batch_stats = stats;
        Ok(id)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = ops::relu(self.value(input));
        let baseline = self.dual.then(|| ops::relu(self.base(input)));
        let rg = self.rg(&[input]);
        self.push(Op::Relu(input), value, baseline, rg)
    }

    pub fn resize_nearest(&mut self, input: NodeId, target: (usize, usize)) -> Result<NodeId> {
        let value = ops::resize_nearest(self.value(input), target)?;
        let baseline = if self.dual {
            Some(ops::resize_nearest(self.base(input), target)?)
        } else {
            None
        };
        let rg = self.rg(&[input]);
        Ok(self.push(Op::ResizeNearest { input, target }, value, baseline, rg))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        let baseline = if self.dual {
            Some(ops::concat_channels(self.base(a), self.base(b))?)
        } else {
            None
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Concat { a, b }, value, baseline, rg))
    }

    /// `y = scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, input: NodeId, scale: S, shift: S) -> NodeId {
        let f = |v: S| scale * v + shift;
        let value = self.value(input).map(f);
        let baseline = self.dual.then(|| self.base(input).map(f));
        let rg = self.rg(&[input]);
        self.push(Op::Affine { input, scale }, value, baseline, rg)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, input: NodeId, factor: Tensor<S>) -> Result<NodeId> {
        let value = self.value(input).mul(&factor)?;
        let baseline = if self.dual {
            Some(self.base(input).mul(&factor)?)
        } else {
            None
        };
        let rg = self.rg(&[input]);
        Ok(self.push(Op::MulConst { input, factor }, value, baseline, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let baseline = if self.dual {
            Some(self.base(a).add(self.base(b))?)
        } else {
            None
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, baseline, rg))
    }

    /// Elementwise product of two nodes (not supported by DeepLIFT backward).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        let baseline = if self.dual {
            Some(self.base(a).mul(self.base(b))?)
        } else {
            None
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, baseline, rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).sum());
        let baseline = self.dual.then(|| Tensor::scalar(self.base(input).sum()));
        let rg = self.rg(&[input]);
        self.push(Op::Sum(input), value, baseline, rg)
    }

    /// Scalar `Σ_n weights[n] · input[n, 0, row, col]` over a `N×1×H×W` node.
    pub fn pixel_readout(
        &mut self,
        input: NodeId,
        row: usize,
        col: usize,
        weights: Vec<S>,
    ) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).nchw()?;
        if c != 1 {
            return Err(CoreError::shape(format!(
                "pixel readout expects one channel, got {c}"
            )));
        }
        if row >= h || col >= w {
            return Err(CoreError::invalid(format!(
                "pixel ({row}, {col}) outside {h}×{w} grid"
            )));
        }
        if weights.len() != n {
            return Err(CoreError::shape(format!(
                "pixel readout over batch {n} got {} weights",
                weights.len()
            )));
        }
        let read = |t: &Tensor<S>| {
            let mut acc = S::zero();
            for (b, &wt) in weights.iter().enumerate() {
                acc += wt * t.data()[(b * h + row) * w + col];
            }
            Tensor::scalar(acc)
        };
        let value = read(self.value(input));
        let baseline = self.dual.then(|| read(self.base(input)));
        let rg = self.rg(&[input]);
        Ok(self.push(
            Op::PixelReadout {
                input,
                row,
                col,
                weights,
            },
            value,
            baseline,
            rg,
        ))
    }

    /// Mean squared error over cells where `mask` is set, across the batch.
    ///
    /// `mask` has one entry per spatial cell and is broadcast over `N` and `C`.
    pub fn masked_mse(&mut self, pred: NodeId, target: Tensor<S>, mask: &[bool]) -> Result<NodeId> {
        let p = self.value(pred);
        p.expect_same_shape(&target)?;
        let [n, c, h, w] = p.nchw()?;
        if mask.len() != h * w {
            return Err(CoreError::shape(format!(
                "mask has {} cells, prediction grid is {h}×{w}",
                mask.len()
            )));
        }
        let ocean = mask.iter().filter(|&&m| m).count();
        if ocean == 0 {
            return Err(CoreError::AllLand);
        }
        let count = ocean * n * c;
        let mut acc = S::zero();
        for (plane_p, plane_t) in p
            .data()
            .chunks_exact(h * w)
            .zip(target.data().chunks_exact(h * w))
        {
            for ((&a, &b), &m) in plane_p.iter().zip(plane_t).zip(mask) {
                if m {
                    let d = a - b;
                    acc += d * d;
                }
            }
        }
        let value = Tensor::scalar(acc / S::from_usize_lossy(count));
        let baseline = self.dual.then(|| value.clone());
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Op::MaskedMse {
                pred,
                target,
                mask: mask.to_vec(),
                count,
            },
            value,
            baseline,
            rg,
        ))
    }

    /// Reverse pass from a scalar `seed`, retaining gradients for leaf nodes.
    pub fn backward(&self, seed: NodeId, mode: BackwardMode) -> Result<Gradients<S>> {
        let seed_shape = self.shape(seed);
        if seed_shape.iter().product::<usize>() != 1 {
            return Err(CoreError::NonScalarSeed(seed_shape.to_vec()));
        }
        if let BackwardMode::DeepLiftRescale { eps } = mode {
            if !self.dual {
                return Err(CoreError::MissingBaseline);
            }
            if !(eps > 0.0) {
                return Err(CoreError::invalid("DeepLIFT threshold must be > 0"));
            }
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(Tensor::full(seed_shape.to_vec(), S::one()));
        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let is_leaf = matches!(node.op, Op::Input | Op::Param(_));
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, mode, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node<S>,
        g: &Tensor<S>,
        mode: BackwardMode,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let want = |id: NodeId| self.nodes[id.0].requires_grad;
        let deeplift = matches!(mode, BackwardMode::DeepLiftRescale { .. });
        let unsupported = |op: &'static str| CoreError::UnsupportedInMode {
            op,
            mode: mode.name(),
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                if want(*input) {
                    let k = self.value(*kernel).data();
                    let gi = ops::conv2d_backward_input(g.data(), k, geom);
                    accumulate(grads, *input, self.value(*input).shape(), gi);
                }
                if want(*kernel) {
                    if deeplift {
                        return Err(unsupported("conv2d kernel multiplier"));
                    }
                    let gk = ops::conv2d_backward_kernel(g.data(), self.value(*input).data(), geom);
                    accumulate(grads, *kernel, self.value(*kernel).shape(), gk);
                }
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                mean,
                inv_std,
                train,
            } => {
                if deeplift && (*train || want(*scale) || want(*shift)) {
                    return Err(unsupported("batchnorm2d parameter/train multiplier"));
                }
                let x = self.value(*input);
                let [n, c, h, w] = x.nchw()?;
                let plane = h * w;
                let gamma = self.value(*scale).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for ch in 0..c {
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for (&gv, &xv) in g.data()[off..off + plane]
                            .iter()
                            .zip(&x.data()[off..off + plane])
                        {
                            dbeta[ch] += gv;
                            dgamma[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if want(*input) {
                    let mut gi = vec![S::zero(); x.len()];
                    let m = S::from_usize_lossy(n * plane);
                    for ch in 0..c {
                        let a = gamma[ch] * inv_std[ch];
                        for b in 0..n {
                            let off = (b * c + ch) * plane;
                            let xs = &x.data()[off..off + plane];
                            for (j, (d, &gv)) in gi[off..off + plane]
                                .iter_mut()
                                .zip(&g.data()[off..off + plane])
                                .enumerate()
                            {
                                *d = if *train {
                                    let xhat = (xs[j] - mean[ch]) * inv_std[ch];
                                    a * (gv - dbeta[ch] / m - xhat * dgamma[ch] / m)
                                } else {
                                    a * gv
                                };
                            }
                        }
                    }
                    accumulate(grads, *input, x.shape(), gi);
                }
                if want(*scale) {
                    accumulate(grads, *scale, &[c], dgamma);
                }
                if want(*shift) {
                    accumulate(grads, *shift, &[c], dbeta);
                }
            }
            Op::Relu(input) => {
                if want(*input) {
                    let x = self.value(*input);
                    let gi: Vec<S> = match mode {
                        BackwardMode::Standard => x
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&xv, &gv)| if xv > S::zero() { gv } else { S::zero() })
                            .collect(),
                        BackwardMode::GuidedRelu => x
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&xv, &gv)| {
                                if xv > S::zero() && gv > S::zero() {
                                    gv
                                } else {
                                    S::zero()
                                }
                            })
                            .collect(),
                        BackwardMode::DeepLiftRescale { eps } => {
                            let eps = S::from_f64_lossy(eps);
                            let xb = self.base(*input);
                            let y = &node.value;
                            let yb = node.baseline.as_ref().expect("dual node");
                            x.data()
                                .iter()
                                .zip(xb.data())
                                .zip(y.data().iter().zip(yb.data()))
                                .zip(g.data())
                                .map(|(((&xv, &xbv), (&yv, &ybv)), &gv)| {
                                    let dx = xv - xbv;
                                    let mult = if dx.abs() > eps {
                                        (yv - ybv) / dx
                                    } else if xv > S::zero() {
                                        S::one()
                                    } else {
                                        S::zero()
                                    };
                                    gv * mult
                                })
                                .collect()
                        }
                    };
                    accumulate(grads, *input, x.shape(), gi);
                }
            }
            Op::ResizeNearest { input, target } => {
                if want(*input) {
                    let x = self.value(*input);
                    let gi = ops::resize_nearest_backward(g.data(), x.nchw()?, target.0, target.1);
                    accumulate(grads, *input, x.shape(), gi);
                }
            }
            Op::Concat { a, b } => {
                let da = self.value(*a).nchw()?;
                let db = self.value(*b).nchw()?;
                let plane = da[2] * da[3];
                let (ca, cb) = (da[1], db[1]);
                let mut ga = Vec::with_capacity(da.iter().product());
                let mut gb = Vec::with_capacity(db.iter().product());
                for chunk in g.data().chunks_exact((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                if want(*a) {
                    accumulate(grads, *a, self.value(*a).shape(), ga);
                }
                if want(*b) {
                    accumulate(grads, *b, self.value(*b).shape(), gb);
                }
            }
            Op::Affine { input, scale } => {
                if want(*input) {
                    let gi = g.data().iter().map(|&v| v * *scale).collect();
                    accumulate(grads, *input, self.value(*input).shape(), gi);
                }
            }
            Op::MulConst { input, factor } => {
                if want(*input) {
                    let gi = g
                        .data()
                        .iter()
                        .zip(factor.data())
                        .map(|(&a, &b)| a * b)
                        .collect();
                    accumulate(grads, *input, self.value(*input).shape(), gi);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if want(id) {
                        accumulate(grads, id, g.shape(), g.data().to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if deeplift {
                    return Err(unsupported("mul"));
                }
                let (va, vb) = (self.value(*a), self.value(*b));
                if want(*a) {
                    let ga = g
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(grads, *a, va.shape(), ga);
                }
                if want(*b) {
                    let gb = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(grads, *b, vb.shape(), gb);
                }
            }
            Op::Sum(input) => {
                if want(*input) {
                    let x = self.value(*input);
                    accumulate(grads, *input, x.shape(), vec![g.data()[0]; x.len()]);
                }
            }
            Op::PixelReadout {
                input,
                row,
                col,
                weights,
            } => {
                if want(*input) {
                    let x = self.value(*input);
                    let [_, _, h, w] = x.nchw()?;
                    let mut gi = vec![S::zero(); x.len()];
                    for (b, &wt) in weights.iter().enumerate() {
                        gi[(b * h + row) * w + col] = wt * g.data()[0];
                    }
                    accumulate(grads, *input, x.shape(), gi);
                }
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                if deeplift {
                    return Err(unsupported("masked_mse"));
                }
                if want(*pred) {
                    let p = self.value(*pred);
                    let scale = S::from_f64_lossy(2.0) * g.data()[0] / S::from_usize_lossy(*count);
                    let plane = mask.len();
                    let gi = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .enumerate()
                        .map(|(j, (&a, &b))| {
                            if mask[j % plane] {
                                scale * (a - b)
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    accumulate(grads, *pred, p.shape(), gi);
                }
            }
        }
        Ok(())
    }

    /// Name of a parameter leaf.
    pub fn param_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id.0].op {
            Op::Param(name) => Some(name),
            _ => None,
        }
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}

fn out_shape<S: Scalar>(like: &Tensor<S>, nchw: [usize; 4]) -> Vec<usize> {
    if like.rank() == 3 {
        nchw[1..].to_vec()
    } else {
        nchw.to_vec()
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, shape: &[usize], g: Vec<S>) {
    match &mut grads[id.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape")),
    }
}

/// Gradients (or DeepLIFT multipliers) for the leaves of a graph.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
