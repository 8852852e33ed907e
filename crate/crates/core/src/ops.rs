//! Forward operators and their vector-Jacobian kernels.
//!
//! All image tensors are `C×H×W` or `N×C×H×W`; results keep the rank of the input.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output positions `o` for which `o*stride + k - padding` lands in `[0, len)`.
#[inline]
fn valid_range(
    k: usize,
    stride: usize,
    padding: usize,
    len: usize,
    out_len: usize,
) -> (usize, usize) {
    // o*stride >= padding - k
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    // o*stride <= len - 1 + padding - k
    let hi_num = len + padding;
    if hi_num <= k {
        return (0, 0);
    }
    let hi = ((hi_num - 1 - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geom<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let [n, c_in, h, w] = input.nchw()?;
    let (c_out, kc, kh, kw) = match *kernel.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => {
            return Err(CoreError::shape(format!(
                "conv kernel must be C_out×C_in×k×k, got {s:?}"
            )))
        }
    };
    if kh != kw || kh == 0 {
        return Err(CoreError::shape(format!(
            "conv kernel must be square with k >= 1, got {kh}×{kw}"
        )));
    }
    if stride == 0 {
        return Err(CoreError::invalid("conv stride must be >= 1"));
    }
    if kc != c_in {
        return Err(CoreError::shape(format!(
            "conv input has {c_in} channels but kernel expects {kc}"
        )));
    }
    let oh = conv_out_len(h, kh, stride, padding);
    let ow = conv_out_len(w, kw, stride, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            padding,
            oh,
            ow,
        }),
        _ => Err(CoreError::shape(format!(
            "kernel {kh} with padding {padding} does not fit a {h}×{w} input"
        ))),
    }
}

fn with_rank<S: Scalar>(like: &Tensor<S>, nchw: [usize; 4], data: Vec<S>) -> Tensor<S> {
    let shape = if like.rank() == 3 {
        vec![nchw[1], nchw[2], nchw[3]]
    } else {
        nchw.to_vec()
    };
    Tensor::new(shape, data).expect("kernel output shape")
}

/// Bias-free 2-D convolution with zero padding.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let g = conv_geom(input, kernel, stride, padding)?;
    let out = conv2d_raw(input.data(), kernel.data(), &g);
    Ok(with_rank(input, [g.n, g.c_out, g.oh, g.ow], out))
}

pub(crate) fn conv2d_raw<S: Scalar>(x: &[S], k: &[S], g: &ConvGeom) -> Vec<S> {
    let ConvGeom {
        n,
        c_in,
        h,
        w,
        c_out,
        k: ks,
        stride,
        padding,
        oh,
        ow,
    } = *g;
    let mut out = vec![S::zero(); n * c_out * oh * ow];
    let plane_in = h * w;
    let plane_out = oh * ow;
    for b in 0..n {
        for co in 0..c_out {
            let o_plane = &mut out[(b * c_out + co) * plane_out..][..plane_out];
            for ci in 0..c_in {
                let i_plane = &x[(b * c_in + ci) * plane_in..][..plane_in];
                let kbase = (co * c_in + ci) * ks * ks;
                for ky in 0..ks {
                    let (oy0, oy1) = valid_range(ky, stride, padding, h, oh);
                    for kx in 0..ks {
                        let wv = k[kbase + ky * ks + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(kx, stride, padding, w, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let o_row = &mut o_plane[oy * ow + ox0..oy * ow + ox1];
                            let ix0 = ox0 * stride + kx - padding;
                            let i_row = &i_plane[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let src = &i_row[ix0..ix0 + o_row.len()];
                                for (o, &v) in o_row.iter_mut().zip(src) {
                                    *o += wv * v;
                                }
                            } else {
                                for (j, o) in o_row.iter_mut().enumerate() {
                                    *o += wv * i_row[ix0 + j * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv2d_backward_input<S: Scalar>(gout: &[S], k: &[S], g: &ConvGeom) -> Vec<S> {
    let ConvGeom {
        n,
        c_in,
        h,
        w,
        c_out,
        k: ks,
        stride,
        padding,
        oh,
        ow,
    } = *g;
    let plane_in = h * w;
    let plane_out = oh * ow;
    let mut gin = vec![S::zero(); n * c_in * plane_in];
    for b in 0..n {
        for ci in 0..c_in {
            let gi_plane = &mut gin[(b * c_in + ci) * plane_in..][..plane_in];
            for co in 0..c_out {
                let go_plane = &gout[(b * c_out + co) * plane_out..][..plane_out];
                let kbase = (co * c_in + ci) * ks * ks;
                for ky in 0..ks {
                    let (oy0, oy1) = valid_range(ky, stride, padding, h, oh);
                    for kx in 0..ks {
                        let wv = k[kbase + ky * ks + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(kx, stride, padding, w, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let go_row = &go_plane[oy * ow + ox0..oy * ow + ox1];
                            let ix0 = ox0 * stride + kx - padding;
                            let gi_row = &mut gi_plane[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let dst = &mut gi_row[ix0..ix0 + go_row.len()];
                                for (d, &v) in dst.iter_mut().zip(go_row) {
                                    *d += wv * v;
                                }
                            } else {
                                for (j, &v) in go_row.iter().enumerate() {
                                    gi_row[ix0 + j * stride] += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of a convolution with respect to its kernel.
pub(crate) fn conv2d_backward_kernel<S: Scalar>(gout: &[S], x: &[S], g: &ConvGeom) -> Vec<S> {
    let ConvGeom {
        n,
        c_in,
        h,
        w,
        c_out,
        k: ks,
        stride,
        padding,
        oh,
        ow,
    } = *g;
    let plane_in = h * w;
    let plane_out = oh * ow;
    let mut gk = vec![S::zero(); c_out * c_in * ks * ks];
    for co in 0..c_out {
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * ks * ks;
            for ky in 0..ks {
                let (oy0, oy1) = valid_range(ky, stride, padding, h, oh);
                for kx in 0..ks {
                    let (ox0, ox1) = valid_range(kx, stride, padding, w, ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = S::zero();
                    for b in 0..n {
                        let go_plane = &gout[(b * c_out + co) * plane_out..][..plane_out];
                        let i_plane = &x[(b * c_in + ci) * plane_in..][..plane_in];
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let go_row = &go_plane[oy * ow + ox0..oy * ow + ox1];
                            let ix0 = ox0 * stride + kx - padding;
                            let i_row = &i_plane[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let src = &i_row[ix0..ix0 + go_row.len()];
                                for (&a, &v) in go_row.iter().zip(src) {
                                    acc += a * v;
                                }
                            } else {
                                for (j, &a) in go_row.iter().enumerate() {
                                    acc += a * i_row[ix0 + j * stride];
                                }
                            }
                        }
                    }
                    gk[kbase + ky * ks + kx] = acc;
                }
            }
        }
    }
    gk
}

/// Whether batch normalization uses running or batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel statistics produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance over `N·H·W`.
    pub var: Vec<S>,
    pub count: usize,
}

pub(crate) fn check_bn<S: Scalar>(
    input: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    mean: &[S],
    var: &[S],
    eps: S,
) -> Result<[usize; 4]> {
    let dims = input.nchw()?;
    let c = dims[1];
    if scale.len() != c || shift.len() != c || mean.len() != c || var.len() != c {
        return Err(CoreError::shape(format!(
            "batch norm over {c} channels got scale {}, shift {}, mean {}, var {}",
            scale.len(),
            shift.len(),
            mean.len(),
            var.len()
        )));
    }
    if !(eps > S::zero()) {
        return Err(CoreError::invalid("batch norm eps must be > 0"));
    }
    if var.iter().any(|&v| v < S::zero()) {
        return Err(CoreError::invalid("batch norm variance must be >= 0"));
    }
    if mean.iter().chain(var).any(|v| !v.is_finite()) {
        return Err(CoreError::invalid("batch norm statistics must be finite"));
    }
    Ok(dims)
}

pub(crate) fn batch_stats<S: Scalar>(x: &[S], dims: [usize; 4]) -> BatchStats<S> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let count = n * plane;
    let inv = S::one() / S::from_usize_lossy(count);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for ch in 0..c {
        let mut acc = S::zero();
        for b in 0..n {
            acc += x[(b * c + ch) * plane..][..plane]
                .iter()
                .copied()
                .sum::<S>();
        }
        let mu = acc * inv;
        let mut sq = S::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * plane..][..plane] {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq * inv;
    }
    BatchStats { mean, var, count }
}

/// `y = scale·(x − mean)/√(var + eps) + shift` per channel, with stats supplied.
pub(crate) fn bn_apply<S: Scalar>(
    x: &[S],
    dims: [usize; 4],
    scale: &[S],
    shift: &[S],
    mean: &[S],
    var: &[S],
    eps: S,
) -> Vec<S> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![S::zero(); x.len()];
    for ch in 0..c {
        let inv_std = S::one() / (var[ch] + eps).sqrt();
        let a = scale[ch] * inv_std;
        let b = shift[ch] - mean[ch] * a;
        for bi in 0..n {
            let off = (bi * c + ch) * plane;
            for (o, &v) in out[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *o = a * v + b;
            }
        }
    }
    out
}

/// Batch normalization with learnable per-channel `scale` and `shift`.
///
/// In eval mode the supplied running statistics are used. In train mode the
/// batch statistics are used and returned so the caller can fold them into
/// its running averages.
pub fn batchnorm2d<S: Scalar>(
    input: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    running_mean: &[S],
    running_var: &[S],
    mode: BnMode,
    eps: S,
) -> Result<(Tensor<S>, Option<BatchStats<S>>)> {
    let dims = check_bn(input, scale, shift, running_mean, running_var, eps)?;
    let (mean, var, stats) = match mode {
        BnMode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        BnMode::Train => {
            let st = batch_stats(input.data(), dims);
            (st.mean.clone(), st.var.clone(), Some(st))
        }
    };
    let out = bn_apply(
        input.data(),
        dims,
        scale.data(),
        shift.data(),
        &mean,
        &var,
        eps,
    );
    Ok((with_rank(input, dims, out), stats))
}

/// Fold batch statistics into running averages: `r ← (1 − m)·r + m·batch`,
/// using the unbiased batch variance.
pub fn update_running_stats<S: Scalar>(
    running_mean: &mut [S],
    running_var: &mut [S],
    stats: &BatchStats<S>,
    momentum: S,
) {
    let keep = S::one() - momentum;
    let unbias = if stats.count > 1 {
        S::from_usize_lossy(stats.count) / S::from_usize_lossy(stats.count - 1)
    } else {
        S::one()
    };
    for c in 0..running_mean.len() {
        running_mean[c] = keep * running_mean[c] + momentum * stats.mean[c];
        running_var[c] = keep * running_var[c] + momentum * stats.var[c] * unbias;
    }
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Source index of nearest-neighbour resampling: `floor(i·src/dst)`.
#[inline]
pub fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    i * src / dst
}

pub fn resize_nearest<S: Scalar>(input: &Tensor<S>, target: (usize, usize)) -> Result<Tensor<S>> {
    let dims = input.nchw()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(CoreError::invalid("resize target must be at least 1×1"));
    }
    let out = resize_nearest_raw(input.data(), dims, th, tw);
    Ok(with_rank(input, [dims[0], dims[1], th, tw], out))
}

pub(crate) fn resize_nearest_raw<S: Scalar>(
    x: &[S],
    dims: [usize; 4],
    th: usize,
    tw: usize,
) -> Vec<S> {
    let [n, c, h, w] = dims;
    let cols: Vec<usize> = (0..tw).map(|j| nearest_source(j, w, tw)).collect();
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in x.chunks_exact(h * w).take(n * c) {
        for i in 0..th {
            let row = &plane[nearest_source(i, h, th) * w..][..w];
            out.extend(cols.iter().map(|&j| row[j]));
        }
    }
    out
}

pub(crate) fn resize_nearest_backward<S: Scalar>(
    gout: &[S],
    dims: [usize; 4],
    th: usize,
    tw: usize,
) -> Vec<S> {
    let [n, c, h, w] = dims;
    let cols: Vec<usize> = (0..tw).map(|j| nearest_source(j, w, tw)).collect();
    let mut gin = vec![S::zero(); n * c * h * w];
    for (p, gplane) in gout.chunks_exact(th * tw).enumerate() {
        let dst = &mut gin[p * h * w..][..h * w];
        for i in 0..th {
            let row = &mut dst[nearest_source(i, h, th) * w..][..w];
            for (&j, &g) in cols.iter().zip(&gplane[i * tw..(i + 1) * tw]) {
                row[j] += g;
            }
        }
    }
    gin
}

pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let da = a.nchw()?;
    let db = b.nchw()?;
    if da[0] != db[0] || da[2] != db[2] || da[3] != db[3] || a.rank() != b.rank() {
        return Err(CoreError::shape(format!(
            "concat needs matching batch/spatial dims, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = concat_raw(a.data(), b.data(), da, db[1]);
    Ok(with_rank(a, [da[0], da[1] + db[1], da[2], da[3]], out))
}

pub(crate) fn concat_raw<S: Scalar>(a: &[S], b: &[S], da: [usize; 4], cb: usize) -> Vec<S> {
    let [n, ca, h, w] = da;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for bi in 0..n {
        out.extend_from_slice(&a[bi * ca * plane..(bi + 1) * ca * plane]);
        out.extend_from_slice(&b[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_counts_window() {
        let x = Tensor::<f32>::full(vec![1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_output_extent_formula() {
        assert_eq!(conv_out_len(70, 5, 2, 2), Some(35));
        assert_eq!(conv_out_len(125, 5, 2, 2), Some(63));
        assert_eq!(conv_out_len(35, 3, 2, 1), Some(18));
        assert_eq!(conv_out_len(63, 3, 2, 1), Some(32));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![2, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        let err = conv2d(&x, &k, 1, 1).unwrap_err();
        assert!(matches!(err, CoreError::Shape(_)), "{err}");
    }

    #[test]
    fn strided_conv_matches_direct_sum() {
        let x = Tensor::<f64>::from_fn(vec![2, 7, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let k = Tensor::<f64>::from_fn(vec![3, 2, 3, 3], |i| ((i * 13) % 7) as f64 - 3.0);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 4, 3]);
        for co in 0..3 {
            for oy in 0..4 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                    continue;
                                }
                                acc += x.data()[ci * 42 + iy as usize * 6 + ix as usize]
                                    * k.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    assert_eq!(y.data()[(co * 4 + oy) * 3 + ox], acc);
                }
            }
        }
    }

    #[test]
    fn eval_bn_with_unit_stats_is_identity() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 3], |i| i as f64 - 4.0);
        let scale = Tensor::full(vec![2], 1.0);
        let shift = Tensor::zeros(vec![2]);
        let (y, stats) = batchnorm2d(
            &x,
            &scale,
            &shift,
            &[0.0; 2],
            &[1.0; 2],
            BnMode::Eval,
            0.0 + 1e-300,
        )
        .unwrap();
        assert!(stats.is_none());
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_rejects_bad_stats() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 2]);
        let one = Tensor::full(vec![1], 1.0);
        let zero = Tensor::zeros(vec![1]);
        assert!(batchnorm2d(&x, &one, &zero, &[0.0], &[-1.0], BnMode::Eval, 1e-5).is_err());
        assert!(batchnorm2d(&x, &one, &zero, &[0.0], &[1.0], BnMode::Eval, 0.0).is_err());
    }

    #[test]
    fn train_bn_normalizes_batch() {
        let x = Tensor::<f64>::from_fn(vec![3, 1, 2, 2], |i| (i * i) as f64);
        let (y, stats) = batchnorm2d(
            &x,
            &Tensor::full(vec![1], 1.0),
            &Tensor::zeros(vec![1]),
            &[0.0],
            &[1.0],
            BnMode::Train,
            1e-12,
        )
        .unwrap();
        let st = stats.unwrap();
        assert_eq!(st.count, 12);
        let mean: f64 = y.data().iter().sum::<f64>() / 12.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn nearest_doubling_and_identity() {
        let x = Tensor::<f32>::from_fn(vec![1, 2, 3], |i| i as f32);
        let y = resize_nearest(&x, (4, 6)).unwrap();
        assert_eq!(
            y.data(),
            &[
                0., 0., 1., 1., 2., 2., 0., 0., 1., 1., 2., 2., 3., 3., 4., 4., 5., 5., 3., 3., 4.,
                4., 5., 5.
            ]
        );
        assert_eq!(resize_nearest(&x, (2, 3)).unwrap(), x);
    }

    #[test]
    fn nearest_non_integer_ratio_corner() {
        assert_eq!(nearest_source(69, 36, 70), 35);
        assert_eq!(nearest_source(124, 64, 125), 63);
        let x = Tensor::<f32>::from_fn(vec![1, 36, 64], |i| i as f32);
        let y = resize_nearest(&x, (70, 125)).unwrap();
        assert_eq!(y.data()[69 * 125 + 124], (35 * 64 + 63) as f32);
    }

    #[test]
    fn concat_stacks_channels() {
        let a = Tensor::<f32>::zeros(vec![144, 2, 2]);
        let b = Tensor::<f32>::full(vec![16, 2, 2], 1.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[160, 2, 2]);
        assert_eq!(c.data()[144 * 4], 1.0);
        let bad = Tensor::<f32>::zeros(vec![16, 3, 2]);
        assert!(concat_channels(&a, &bad).is_err());
    }
}
