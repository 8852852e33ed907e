//! Central finite differences in f64 against analytic reverse-mode gradients.

use climprobe::{BackwardMode, Graph, NodeId, Result, Scalar, Tensor};

/// A scalar function of several tensors, buildable at any precision.
pub trait Probe {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<NodeId>;
}

/// Reduce `node` to a scalar with fixed pseudo-random weights so every
/// output element carries a distinct upstream gradient.
pub fn weighted_sum<S: Scalar>(g: &mut Graph<S>, node: NodeId) -> Result<NodeId> {
    let shape = g.shape(node).to_vec();
    let w = Tensor::from_fn(shape, |i| {
        let h = (i as u64)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17);
        S::from_f64_lossy((h % 2001) as f64 / 1000.0 - 1.0)
    });
    let m = g.mul_const(node, w)?;
    Ok(g.sum(m))
}

fn eval<S: Scalar, P: Probe>(probe: &P, xs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<S>::new();
    let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.cast(), false)).collect();
    let out = probe.build(&mut g, &ids)?;
    Ok(g.value(out).data()[0].as_f64())
}

pub fn analytic<S: Scalar, P: Probe>(probe: &P, xs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::<S>::new();
    let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.cast(), true)).collect();
    let out = probe.build(&mut g, &ids)?;
    let grads = g.backward(out, BackwardMode::Standard)?;
    Ok(ids
        .iter()
        .zip(xs)
        .map(|(&id, x)| {
            grads
                .get(id)
                .map(|t| t.cast())
                .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
        })
        .collect())
}

/// Central differences of the f64 evaluation of `probe` with step `h`.
pub fn numeric<P: Probe>(probe: &P, xs: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(xs.len());
    let mut work = xs.to_vec();
    for k in 0..xs.len() {
        let mut grad = Vec::with_capacity(xs[k].len());
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval::<f64, _>(probe, &work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval::<f64, _>(probe, &work)?;
            work[k].data_mut()[i] = orig;
            grad.push((up - down) / (2.0 * h));
        }
        out.push(Tensor::new(xs[k].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// `max |a − n| / max(max |n|, floor)` over every input.
pub fn max_relative_error(a: &[Tensor<f64>], n: &[Tensor<f64>], floor: f64) -> f64 {
    let scale = n
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(floor);
    a.iter()
        .zip(n)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f64, f64::max)
        / scale
}

/// Relative error of `S`-precision analytic gradients against f64 differences.
pub fn check<S: Scalar, P: Probe>(probe: &P, xs: &[Tensor<f64>]) -> f64 {
    let a = analytic::<S, _>(probe, xs).expect("analytic gradient");
    let n = numeric(probe, xs, 1e-5).expect("numeric gradient");
    max_relative_error(&a, &n, 1e-3)
}
