//! Random instances of every differentiable graph op.

use rand::Rng;

use climprobe::ops::BnMode;
use climprobe::{Graph, NodeId, Result, Scalar, Tensor};

use super::gradcheck::{check, weighted_sum, Probe};
use super::{away_from_zero, rng, uniform};

pub const OPS: [&str; 13] = [
    "conv2d",
    "batchnorm2d eval",
    "batchnorm2d train",
    "relu",
    "resize_nearest",
    "concat_channels",
    "affine",
    "mul_const",
    "add",
    "mul",
    "sum",
    "pixel_readout",
    "masked_mse",
];

fn c<S: Scalar>(t: &Tensor<f64>) -> Tensor<S> {
    t.cast()
}

fn both<P: Probe>(p: &P, xs: &[Tensor<f64>]) -> (f64, f64) {
    (check::<f32, _>(p, xs), check::<f64, _>(p, xs))
}

/// 32- and 64-bit relative errors of instance `seed` of `op`.
pub fn instance_errors(op: &str, seed: u64) -> (f64, f64) {
    match op {
        "conv2d" => {
            let (p, xs) = conv_case(seed);
            both(&p, &xs)
        }
        "batchnorm2d eval" => {
            let (p, xs) = bn_case(seed, BnMode::Eval);
            both(&p, &xs)
        }
        "batchnorm2d train" => {
            let (p, xs) = bn_case(seed, BnMode::Train);
            both(&p, &xs)
        }
        "relu" => {
            let mut r = rng(300 + seed);
            let shape = vec![
                1,
                r.random_range(1..4),
                r.random_range(1..6),
                r.random_range(1..6),
            ];
            both(&Relu, &[away_from_zero(&mut r, shape, 0.01, 2.0)])
        }
        "resize_nearest" => {
            let mut r = rng(400 + seed);
            let (h, w) = (r.random_range(1..6), r.random_range(1..6));
            let target = (r.random_range(1..11), r.random_range(1..11));
            both(
                &Resize(target),
                &[uniform(&mut r, vec![2, 2, h, w], -1.0, 1.0)],
            )
        }
        "concat_channels" => {
            let mut r = rng(500 + seed);
            let (n, h, w) = (
                r.random_range(1..3),
                r.random_range(1..5),
                r.random_range(1..5),
            );
            let (ca, cb) = (r.random_range(1..4), r.random_range(1..4));
            let a = uniform(&mut r, vec![n, ca, h, w], -1.0, 1.0);
            let b = uniform(&mut r, vec![n, cb, h, w], -1.0, 1.0);
            both(&Concat, &[a, b])
        }
        "affine" => {
            let mut r = rng(600 + seed);
            let (a, b) = (r.random_range(-3.0..3.0), r.random_range(-1.0..1.0));
            both(
                &Affine(a, b),
                &[uniform(&mut r, vec![1, 2, 3, 4], -1.0, 1.0)],
            )
        }
        "mul_const" => {
            let mut r = rng(700 + seed);
            let shape = vec![r.random_range(1..3), 2, r.random_range(1..5), 3];
            let f = uniform(&mut r, shape.clone(), -2.0, 2.0);
            both(&MulConst(f), &[uniform(&mut r, shape, -1.0, 1.0)])
        }
        "add" => both(&Add, &pair(seed)),
        "mul" => both(&Mul, &pair(seed)),
        "sum" => {
            let mut r = rng(900 + seed);
            let n = r.random_range(1..4);
            both(&Sum, &[uniform(&mut r, vec![n, 3, 2], -1.0, 1.0)])
        }
        "pixel_readout" => {
            let mut r = rng(1000 + seed);
            let (n, h, w) = (
                r.random_range(1..4),
                r.random_range(1..5),
                r.random_range(1..5),
            );
            let p = Readout {
                row: r.random_range(0..h),
                col: r.random_range(0..w),
                weights: (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
            };
            both(&p, &[uniform(&mut r, vec![n, 1, h, w], -1.0, 1.0)])
        }
        "masked_mse" => {
            let mut r = rng(1100 + seed);
            let (n, h, w) = (
                r.random_range(1..3),
                r.random_range(1..5),
                r.random_range(2..5),
            );
            let mut mask: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.7)).collect();
            mask[0] = true;
            let shape = vec![n, 1, h, w];
            let target = uniform(&mut r, shape.clone(), -1.0, 1.0);
            both(&Mse { target, mask }, &[uniform(&mut r, shape, -1.0, 1.0)])
        }
        other => panic!("unknown op {other}"),
    }
}

/// Worst 32- and 64-bit errors over `instances` random cases.
pub fn worst_errors(op: &str, instances: u64) -> (f64, f64) {
    (0..instances)
        .map(|s| instance_errors(op, s))
        .fold((0.0f64, 0.0f64), |(a, b), (x, y)| (a.max(x), b.max(y)))
}

struct Conv {
    stride: usize,
    padding: usize,
}

impl Probe for Conv {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        let y = g.conv2d(xs[0], xs[1], self.stride, self.padding)?;
        weighted_sum(g, y)
    }
}

fn conv_case(seed: u64) -> (Conv, Vec<Tensor<f64>>) {
    let mut r = rng(100 + seed);
    let (n, cin, cout) = (
        r.random_range(1..3),
        r.random_range(1..4),
        r.random_range(1..4),
    );
    let k = [1, 3, 5][r.random_range(0..3)];
    let stride = r.random_range(1..3);
    let padding = r.random_range(0..=k / 2);
    let (h, w) = (r.random_range(k..k + 5), r.random_range(k..k + 5));
    let x = uniform(&mut r, vec![n, cin, h, w], -1.0, 1.0);
    let kern = uniform(&mut r, vec![cout, cin, k, k], -1.0, 1.0);
    (Conv { stride, padding }, vec![x, kern])
}

struct Bn {
    mean: Tensor<f64>,
    var: Tensor<f64>,
    mode: BnMode,
}

impl Probe for Bn {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        let mean: Tensor<S> = c(&self.mean);
        let var: Tensor<S> = c(&self.var);
        let y = g.batchnorm2d(
            xs[0],
            xs[1],
            xs[2],
            mean.data(),
            var.data(),
            self.mode,
            S::from_f64_lossy(1e-5),
        )?;
        weighted_sum(g, y)
    }
}

fn bn_case(seed: u64, mode: BnMode) -> (Bn, Vec<Tensor<f64>>) {
    let mut r = rng(200 + seed);
    let (n, ch) = (r.random_range(1..3), r.random_range(1..4));
    let (h, w) = (r.random_range(2..5), r.random_range(2..5));
    let x = uniform(&mut r, vec![n, ch, h, w], -2.0, 2.0);
    let scale = uniform(&mut r, vec![ch], 0.5, 1.5);
    let shift = uniform(&mut r, vec![ch], -0.5, 0.5);
    let mean = uniform(&mut r, vec![ch], -0.5, 0.5);
    let var = uniform(&mut r, vec![ch], 0.5, 2.0);
    (Bn { mean, var, mode }, vec![x, scale, shift])
}

struct Relu;

impl Probe for Relu {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        let y = g.relu(xs[0]);
        weighted_sum(g, y)
    }
}

struct Resize((usize, usize));

impl Probe for Resize {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        let y = g.resize_nearest(xs[0], self.0)?;
        weighted_sum(g, y)
    }
}

struct Concat;

impl Probe for Concat {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        let y = g.concat_channels(xs[0], xs[1])?;
        weighted_sum(g, y)
    }
}

struct Affine(f64, f64);

impl Probe for Affine {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        let y = g.affine(xs[0], S::from_f64_lossy(self.0), S::from_f64_lossy(self.1));
        weighted_sum(g, y)
    }
}

struct MulConst(Tensor<f64>);

impl Probe for MulConst {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        let y = g.mul_const(xs[0], c(&self.0))?;
        weighted_sum(g, y)
    }
}

struct Add;

impl Probe for Add {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        let y = g.add(xs[0], xs[1])?;
        weighted_sum(g, y)
    }
}

struct Mul;

impl Probe for Mul {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        let y = g.mul(xs[0], xs[1])?;
        weighted_sum(g, y)
    }
}

fn pair(seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(800 + seed);
    let shape = vec![
        1,
        r.random_range(1..4),
        r.random_range(1..5),
        r.random_range(1..5),
    ];
    vec![
        uniform(&mut r, shape.clone(), -1.0, 1.0),
        uniform(&mut r, shape, -1.0, 1.0),
    ]
}

struct Sum;

impl Probe for Sum {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        Ok(g.sum(xs[0]))
    }
}

struct Readout {
    row: usize,
    col: usize,
    weights: Vec<f64>,
}

impl Probe for Readout {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        let w = self.weights.iter().map(|&v| S::from_f64_lossy(v)).collect();
        g.pixel_readout(xs[0], self.row, self.col, w)
    }
}

struct Mse {
    target: Tensor<f64>,
    mask: Vec<bool>,
}

impl Probe for Mse {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId> {
        g.masked_mse(xs[0], c(&self.target), &self.mask)
    }
}
