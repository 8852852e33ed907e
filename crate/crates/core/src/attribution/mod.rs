//! Pixel-wise feature attribution: gradient saliency, guided backprop,
//! integrated gradients, DeepLIFT (rescale) and DeepLiftShap.

mod heatmap;

pub use heatmap::{BaselineDescriptor, Heatmap, HeatmapMeta, Method, PixelTarget};

use serde::{Deserialize, Serialize};

use crate::data::{FieldSeries, SampleWindow};
use crate::emulator::{ModelParams, NormStats};
use crate::error::{CoreError, Result};
use crate::graph::{BackwardMode, Graph, NodeId};
use crate::ops::BnMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A differentiable model mapping `N×months×H×W` windows to `N×1×H×W` fields.
pub trait Explainable<S: Scalar> {
    /// `[months, H, W]` of one input window.
    fn window_shape(&self) -> [usize; 3];

    /// Input standardization applied inside [`Explainable::record`], if any.
    fn norm_stats(&self) -> Option<NormStats> {
        None
    }

    /// Record the eval-mode forward pass on `g` and return the output node.
    fn record(&self, g: &mut Graph<S>, input: NodeId) -> Result<NodeId>;
}

impl<S: Scalar> Explainable<S> for ModelParams<S> {
    fn window_shape(&self) -> [usize; 3] {
        let a = self.arch();
        [a.input_months, a.grid.0, a.grid.1]
    }

    fn norm_stats(&self) -> Option<NormStats> {
        ModelParams::norm_stats(self)
    }

    fn record(&self, g: &mut Graph<S>, input: NodeId) -> Result<NodeId> {
        Ok(self.forward_graph(g, input, BnMode::Eval, false)?.output)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineKind<S> {
    Zero,
    Constant(f64),
    /// Explicit `months×H×W` reference windows.
    Windows(Vec<Tensor<S>>),
}

/// Reference input `x′`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSpec<S> {
    pub kind: BaselineKind<S>,
    /// Values are in standardized units; converted with the model's norm stats.
    pub standardized: bool,
}

impl<S: Scalar> Default for BaselineSpec<S> {
    fn default() -> Self {
        BaselineSpec::zero()
    }
}

impl<S: Scalar> BaselineSpec<S> {
    /// Zero in standardized units, i.e. the climatological mean when norm stats are active.
    pub fn zero() -> Self {
        BaselineSpec {
            kind: BaselineKind::Zero,
            standardized: true,
        }
    }

    pub fn raw_zero() -> Self {
        BaselineSpec {
            kind: BaselineKind::Zero,
            standardized: false,
        }
    }

    pub fn constant(value: f64, standardized: bool) -> Self {
        BaselineSpec {
            kind: BaselineKind::Constant(value),
            standardized,
        }
    }

    pub fn windows(windows: Vec<Tensor<S>>, standardized: bool) -> Self {
        BaselineSpec {
            kind: BaselineKind::Windows(windows),
            standardized,
        }
    }

    pub fn len(&self) -> usize {
        match &self.kind {
            BaselineKind::Windows(w) => w.len(),
            _ => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn describe(&self, norm: Option<NormStats>) -> BaselineDescriptor {
        let (kind, value) = match &self.kind {
            BaselineKind::Zero => ("zero", None),
            BaselineKind::Constant(c) => ("constant", Some(*c)),
            BaselineKind::Windows(_) => ("windows", None),
        };
        BaselineDescriptor {
            kind: kind.to_string(),
            value,
            count: self.len(),
            standardized: self.standardized && norm.is_some(),
        }
    }

    /// Baseline windows in raw (model input) units.
    pub fn resolve(&self, shape: [usize; 3], norm: Option<NormStats>) -> Result<Vec<Tensor<S>>> {
        let to_raw = |v: f64| match (self.standardized, norm) {
            (true, Some(n)) => v * n.std + n.mean,
            _ => v,
        };
        match &self.kind {
            BaselineKind::Zero => Ok(vec![Tensor::full(
                shape.to_vec(),
                S::from_f64_lossy(to_raw(0.0)),
            )]),
            BaselineKind::Constant(c) => Ok(vec![Tensor::full(
                shape.to_vec(),
                S::from_f64_lossy(to_raw(*c)),
            )]),
            BaselineKind::Windows(ws) => {
                if ws.is_empty() {
                    return Err(CoreError::invalid("baseline set is empty"));
                }
                ws.iter()
                    .map(|w| {
                        if w.shape() != shape {
                            return Err(CoreError::shape(format!(
                                "baseline window {:?} does not match input {:?}",
                                w.shape(),
                                shape
                            )));
                        }
                        Ok(if self.standardized && norm.is_some() {
                            w.map(|v| S::from_f64_lossy(to_raw(v.as_f64())))
                        } else {
                            w.clone()
                        })
                    })
                    .collect()
            }
        }
    }

    fn single(&self, shape: [usize; 3], norm: Option<NormStats>) -> Result<Tensor<S>> {
        let mut all = self.resolve(shape, norm)?;
        if all.len() != 1 {
            return Err(CoreError::invalid(format!(
                "method needs a single baseline, got {}",
                all.len()
            )));
        }
        Ok(all.pop().expect("one baseline"))
    }
}

/// Serializable baseline selection, shared by the command line and the service.
///
/// Text forms: `zero`, `raw-zero`, `const:<v>`, `raw-const:<v>`, `windows:<k>`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineChoice {
    #[default]
    Zero,
    RawZero,
    Constant {
        value: f64,
    },
    RawConstant {
        value: f64,
    },
    /// `count` evenly spaced windows of a pool, in raw units.
    Windows {
        count: usize,
    },
}

impl BaselineChoice {
    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            a.and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| CoreError::invalid(format!("baseline `{s}` needs a numeric value")))
        };
        Ok(match name {
            "zero" if arg.is_none() => BaselineChoice::Zero,
            "raw-zero" | "raw_zero" if arg.is_none() => BaselineChoice::RawZero,
            "const" | "constant" => BaselineChoice::Constant { value: num(arg)? },
            "raw-const" | "raw_const" => BaselineChoice::RawConstant { value: num(arg)? },
            "windows" => BaselineChoice::Windows {
                count: arg
                    .and_then(|v| v.trim().parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(|| {
                        CoreError::invalid(format!("baseline `{s}` needs a window count >= 1"))
                    })?,
            },
            _ => {
                return Err(CoreError::invalid(format!(
                    "unknown baseline `{s}` (zero, raw-zero, const:<v>, raw-const:<v>, windows:<k>)"
                )))
            }
        })
    }

    /// Concrete baseline; `pool` supplies the windows for `windows:<k>`.
    pub fn resolve<S: Scalar>(
        &self,
        series: &FieldSeries,
        pool: &[SampleWindow],
    ) -> Result<BaselineSpec<S>> {
        Ok(match *self {
            BaselineChoice::Zero => BaselineSpec::zero(),
            BaselineChoice::RawZero => BaselineSpec::raw_zero(),
            BaselineChoice::Constant { value } => BaselineSpec::constant(value, true),
            BaselineChoice::RawConstant { value } => BaselineSpec::constant(value, false),
            BaselineChoice::Windows { count } => {
                if count == 0 || count > pool.len() {
                    return Err(CoreError::invalid(format!(
                        "baseline needs {count} windows, pool has {}",
                        pool.len()
                    )));
                }
                let ws = (0..count)
                    .map(|i| pool[i * pool.len() / count].input::<S>(series))
                    .collect::<Result<Vec<_>>>()?;
                BaselineSpec::windows(ws, false)
            }
        })
    }
}

impl std::fmt::Display for BaselineChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BaselineChoice::Zero => f.write_str("zero"),
            BaselineChoice::RawZero => f.write_str("raw-zero"),
            BaselineChoice::Constant { value } => write!(f, "const:{value}"),
            BaselineChoice::RawConstant { value } => write!(f, "raw-const:{value}"),
            BaselineChoice::Windows { count } => write!(f, "windows:{count}"),
        }
    }
}

fn check_window<S: Scalar>(model: &impl Explainable<S>, window: &Tensor<S>) -> Result<[usize; 3]> {
    let shape = model.window_shape();
    if window.shape() != shape {
        return Err(CoreError::shape(format!(
            "window {:?} does not match model input {:?}",
            window.shape(),
            shape
        )));
    }
    Ok(shape)
}

fn check_targets(targets: &[PixelTarget], shape: [usize; 3]) -> Result<()> {
    if targets.is_empty() {
        return Err(CoreError::invalid("no attribution targets"));
    }
    targets
        .iter()
        .try_for_each(|t| t.check((shape[1], shape[2])))
}

fn batched<S: Scalar>(window: &Tensor<S>) -> Result<Tensor<S>> {
    let mut shape = vec![1];
    shape.extend_from_slice(window.shape());
    window.clone().reshape(shape)
}

/// Scalar node holding the (un-masked) output at `target`, plus its value.
pub fn target_scalar<S: Scalar>(
    model: &impl Explainable<S>,
    g: &mut Graph<S>,
    window: &Tensor<S>,
    target: PixelTarget,
    requires_grad: bool,
) -> Result<(NodeId, NodeId)> {
    let shape = check_window(model, window)?;
    check_targets(&[target], shape)?;
    let x = g.input(batched(window)?, requires_grad);
    let out = model.record(g, x)?;
    let s = g.pixel_readout(out, target.row, target.col, vec![S::one()])?;
    Ok((x, s))
}

/// Gradients (or guided gradients) for several targets from one forward pass.
fn gradient_maps<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    targets: &[PixelTarget],
    method: Method,
    mode: BackwardMode,
) -> Result<Vec<Heatmap<S>>> {
    let shape = check_window(model, window)?;
    check_targets(targets, shape)?;
    let mut g = Graph::new();
    let x = g.input(batched(window)?, true);
    let out = model.record(&mut g, x)?;
    targets
        .iter()
        .map(|&t| {
            let s = g.pixel_readout(out, t.row, t.col, vec![S::one()])?;
            let mut grads = g.backward(s, mode)?;
            let values = grads
                .take(x)
                .unwrap_or_else(|| Tensor::zeros(vec![1, shape[0], shape[1], shape[2]]))
                .reshape(shape.to_vec())?;
            Ok(Heatmap {
                values,
                method,
                target: t,
                sample: None,
                baseline: None,
                output: g.value(s).data()[0].as_f64(),
                baseline_output: None,
            })
        })
        .collect()
}

pub fn grad_saliency<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    target: PixelTarget,
) -> Result<Heatmap<S>> {
    Ok(gradient_maps(
        model,
        window,
        &[target],
        Method::Gradient,
        BackwardMode::Standard,
    )?
    .remove(0))
}

pub fn guided_backprop<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    target: PixelTarget,
) -> Result<Heatmap<S>> {
    Ok(gradient_maps(
        model,
        window,
        &[target],
        Method::GuidedBackprop,
        BackwardMode::GuidedRelu,
    )?
    .remove(0))
}

/// Trapezoid weights over `α_k = k/m`, `k = 0..=m`.
pub fn trapezoid_weights(m: usize) -> Vec<f64> {
    (0..=m)
        .map(|k| {
            if k == 0 || k == m {
                0.5 / m as f64
            } else {
                1.0 / m as f64
            }
        })
        .collect()
}

/// Upper bound on path points evaluated in one batched forward pass.
fn ig_chunk(window_len: usize) -> usize {
    ((1usize << 21) / window_len.max(1)).max(1)
}

fn ig_maps<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    targets: &[PixelTarget],
    baseline: &BaselineSpec<S>,
    steps: usize,
) -> Result<Vec<Heatmap<S>>> {
    if steps == 0 {
        return Err(CoreError::invalid("IG needs at least one step"));
    }
    let shape = check_window(model, window)?;
    check_targets(targets, shape)?;
    let norm = model.norm_stats();
    let base = baseline.single(shape, norm)?;
    let diff = window.sub(&base)?;
    let weights = trapezoid_weights(steps);
    let n = window.len();
    let mut acc = vec![vec![0.0f64; n]; targets.len()];
    let mut f_x = vec![0.0; targets.len()];
    let mut f_b = vec![0.0; targets.len()];
    let alphas: Vec<usize> = (0..=steps).collect();
    for chunk in alphas.chunks(ig_chunk(n)) {
        let mut data = Vec::with_capacity(chunk.len() * n);
        for &k in chunk {
            let a = S::from_f64_lossy(k as f64 / steps as f64);
            data.extend(
                base.data()
                    .iter()
                    .zip(diff.data())
                    .map(|(&b, &d)| b + a * d),
            );
        }
        let mut g = Graph::new();
        let x = g.input(
            Tensor::new(vec![chunk.len(), shape[0], shape[1], shape[2]], data)?,
            true,
        );
        let out = model.record(&mut g, x)?;
        let w: Vec<S> = chunk
            .iter()
            .map(|&k| S::from_f64_lossy(weights[k]))
            .collect();
        let (h, wd) = (shape[1], shape[2]);
        for (ti, t) in targets.iter().enumerate() {
            let o = g.value(out).data();
            for (b, &k) in chunk.iter().enumerate() {
                let v = o[(b * h + t.row) * wd + t.col].as_f64();
                if k == 0 {
                    f_b[ti] = v;
                }
                if k == steps {
                    f_x[ti] = v;
                }
            }
            let s = g.pixel_readout(out, t.row, t.col, w.clone())?;
            let grads = g.backward(s, BackwardMode::Standard)?;
            if let Some(gx) = grads.get(x) {
                for slice in gx.data().chunks_exact(n) {
                    for (a, &v) in acc[ti].iter_mut().zip(slice) {
                        *a += v.as_f64();
                    }
                }
            }
        }
    }
    let desc = baseline.describe(norm);
    targets
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let values = acc[ti]
                .iter()
                .zip(diff.data())
                .map(|(&a, &d)| S::from_f64_lossy(a * d.as_f64()))
                .collect();
            Ok(Heatmap {
                values: Tensor::new(shape.to_vec(), values)?,
                method: Method::IntegratedGradients { steps },
                target: t,
                sample: None,
                baseline: Some(desc.clone()),
                output: f_x[ti],
                baseline_output: Some(f_b[ti]),
            })
        })
        .collect()
}

pub fn integrated_gradients<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    target: PixelTarget,
    baseline: &BaselineSpec<S>,
    steps: usize,
) -> Result<Heatmap<S>> {
    Ok(ig_maps(model, window, &[target], baseline, steps)?.remove(0))
}

/// DeepLIFT contributions against one raw baseline window, for every target.
fn deeplift_raw<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    base: &Tensor<S>,
    targets: &[PixelTarget],
    shape: [usize; 3],
) -> Result<Vec<(Tensor<S>, f64, f64)>> {
    let diff = window.sub(base)?;
    let mut g = Graph::new_dual();
    let x = g.input_dual(batched(window)?, batched(base)?, true)?;
    let out = model.record(&mut g, x)?;
    targets
        .iter()
        .map(|t| {
            let s = g.pixel_readout(out, t.row, t.col, vec![S::one()])?;
            let mut grads = g.backward(s, BackwardMode::deeplift())?;
            let mult = grads
                .take(x)
                .unwrap_or_else(|| Tensor::zeros(vec![1, shape[0], shape[1], shape[2]]))
                .reshape(shape.to_vec())?;
            let fx = g.value(s).data()[0].as_f64();
            let fb = g.baseline_value(s).expect("dual graph").data()[0].as_f64();
            Ok((mult.mul(&diff)?, fx, fb))
        })
        .collect()
}

fn deeplift_maps<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    targets: &[PixelTarget],
    baseline: &BaselineSpec<S>,
    shap: bool,
) -> Result<Vec<Heatmap<S>>> {
    let shape = check_window(model, window)?;
    check_targets(targets, shape)?;
    let norm = model.norm_stats();
    let bases = if shap {
        baseline.resolve(shape, norm)?
    } else {
        vec![baseline.single(shape, norm)?]
    };
    let desc = baseline.describe(norm);
    let method = if shap {
        Method::DeepLiftShap
    } else {
        Method::DeepLift
    };
    let mut per_base = bases
        .iter()
        .map(|b| deeplift_raw(model, window, b, targets, shape))
        .collect::<Result<Vec<_>>>()?;
    if per_base.len() == 1 {
        return Ok(per_base
            .pop()
            .expect("one baseline")
            .into_iter()
            .zip(targets)
            .map(|((values, fx, fb), &t)| Heatmap {
                values,
                method,
                target: t,
                sample: None,
                baseline: Some(desc.clone()),
                output: fx,
                baseline_output: Some(fb),
            })
            .collect());
    }
    let nb = per_base.len() as f64;
    (0..targets.len())
        .map(|ti| {
            let mut acc = vec![0.0f64; window.len()];
            let mut fb = 0.0;
            for maps in &per_base {
                for (a, &v) in acc.iter_mut().zip(maps[ti].0.data()) {
                    *a += v.as_f64();
                }
                fb += maps[ti].2;
            }
            let values = acc.into_iter().map(|a| S::from_f64_lossy(a / nb)).collect();
            Ok(Heatmap {
                values: Tensor::new(shape.to_vec(), values)?,
                method,
                target: targets[ti],
                sample: None,
                baseline: Some(desc.clone()),
                output: per_base[0][ti].1,
                baseline_output: Some(fb / nb),
            })
        })
        .collect()
}

pub fn deeplift<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    target: PixelTarget,
    baseline: &BaselineSpec<S>,
) -> Result<Heatmap<S>> {
    Ok(deeplift_maps(model, window, &[target], baseline, false)?.remove(0))
}

/// Mean of per-baseline DeepLIFT maps; a single baseline reproduces [`deeplift`] exactly.
pub fn deeplift_shap<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    target: PixelTarget,
    baselines: &BaselineSpec<S>,
) -> Result<Heatmap<S>> {
    Ok(deeplift_maps(model, window, &[target], baselines, true)?.remove(0))
}

/// Heatmaps for several targets of the same window, sharing the forward pass.
pub fn explain_targets<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    targets: &[PixelTarget],
    method: Method,
    baseline: &BaselineSpec<S>,
) -> Result<Vec<Heatmap<S>>> {
    match method {
        Method::Gradient => gradient_maps(model, window, targets, method, BackwardMode::Standard),
        Method::GuidedBackprop => {
            gradient_maps(model, window, targets, method, BackwardMode::GuidedRelu)
        }
        Method::IntegratedGradients { steps } => ig_maps(model, window, targets, baseline, steps),
        Method::DeepLift => deeplift_maps(model, window, targets, baseline, false),
        Method::DeepLiftShap => deeplift_maps(model, window, targets, baseline, true),
    }
}

pub fn explain<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    target: PixelTarget,
    method: Method,
    baseline: &BaselineSpec<S>,
) -> Result<Heatmap<S>> {
    Ok(explain_targets(model, window, &[target], method, baseline)?.remove(0))
}

/// Pearson correlation between attributions and single-cell occlusion effects.
///
/// For each of `cells` (flat window indices) the input is moved to the baseline
/// and the output drop `f(x) − f(x with cell at baseline)` is compared to the
/// heatmap at that cell. Reported as a diagnostic of sign semantics only.
pub fn perturbation_agreement<S: Scalar>(
    model: &impl Explainable<S>,
    window: &Tensor<S>,
    heatmap: &Heatmap<S>,
    baseline: &BaselineSpec<S>,
    cells: &[usize],
) -> Result<Option<f64>> {
    let shape = check_window(model, window)?;
    let base = baseline.single(shape, model.norm_stats())?;
    let t = heatmap.target;
    let mut batch = Vec::with_capacity((cells.len() + 1) * window.len());
    batch.extend_from_slice(window.data());
    for &c in cells {
        let mut w = window.data().to_vec();
        w[c] = base.data()[c];
        batch.extend(w);
    }
    let mut g = Graph::new();
    let x = g.input(
        Tensor::new(vec![cells.len() + 1, shape[0], shape[1], shape[2]], batch)?,
        false,
    );
    let out = model.record(&mut g, x)?;
    let o = g.value(out).data();
    let plane = shape[1] * shape[2];
    let at = |b: usize| o[b * plane + t.row * shape[2] + t.col].as_f64();
    let effects: Vec<f64> = (1..=cells.len()).map(|b| at(0) - at(b)).collect();
    let attr: Vec<f64> = cells
        .iter()
        .map(|&c| heatmap.values.data()[c].as_f64())
        .collect();
    Ok(crate::stats::pearson(&attr, &effects))
}
