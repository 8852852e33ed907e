use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::{Activation, ArchConfig, BlockConfig, ParamKind, Plan, Stage};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::BnMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary land/ocean grid; `true` marks an ocean (predicted) cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandMask {
    height: usize,
    width: usize,
    ocean: Vec<bool>,
}

impl LandMask {
    pub fn new(height: usize, width: usize, ocean: Vec<bool>) -> Result<Self> {
        if ocean.len() != height * width {
            return Err(CoreError::shape(format!(
                "mask of {} cells for a {height}×{width} grid",
                ocean.len()
            )));
        }
        if !ocean.iter().any(|&o| o) {
            return Err(CoreError::AllLand);
        }
        Ok(LandMask {
            height,
            width,
            ocean,
        })
    }

    pub fn all_ocean(height: usize, width: usize) -> Self {
        LandMask {
            height,
            width,
            ocean: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.ocean
    }

    pub fn is_ocean(&self, row: usize, col: usize) -> bool {
        self.ocean[row * self.width + col]
    }

    pub fn ocean_count(&self) -> usize {
        self.ocean.iter().filter(|&&o| o).count()
    }
}

/// Zero every land cell of each `H×W` plane of `pred`.
///
/// A mask with no ocean cell cannot be constructed, so the all-land case
/// is exercised through [`apply_mask_cells`].
pub fn apply_mask<S: Scalar>(pred: &Tensor<S>, mask: &LandMask) -> Result<Tensor<S>> {
    apply_mask_cells(pred, mask.height, mask.width, &mask.ocean)
}

pub fn apply_mask_cells<S: Scalar>(
    pred: &Tensor<S>,
    h: usize,
    w: usize,
    ocean: &[bool],
) -> Result<Tensor<S>> {
    let shape = pred.shape();
    if shape.len() < 2 || shape[shape.len() - 2] != h || shape[shape.len() - 1] != w {
        return Err(CoreError::shape(format!(
            "prediction {:?} does not match {h}×{w} mask",
            shape
        )));
    }
    let mut out = pred.clone();
    for plane in out.data_mut().chunks_exact_mut(h * w) {
        for (v, &o) in plane.iter_mut().zip(ocean) {
            if !o {
                *v = S::zero();
            }
        }
    }
    Ok(out)
}

/// Global input standardization `(x − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Parameters of a DenseNet emulator, keyed by stable path.
#[derive(Clone, Debug)]
pub struct ModelParams<S> {
    arch: ArchConfig,
    tensors: BTreeMap<String, Tensor<S>>,
    kinds: BTreeMap<String, ParamKind>,
    norm: Option<NormStats>,
}

/// Handles into a recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: NodeId,
    pub output: NodeId,
    /// Output node of each stage, in [`Plan::stages`] order (input excluded).
    pub stages: Vec<(String, NodeId)>,
    pub params: Vec<(String, NodeId)>,
    /// Batch-norm nodes keyed by their parameter prefix.
    pub batch_norms: Vec<(String, NodeId)>,
}

pub fn build_model<S: Scalar>(config: &ArchConfig, seed: u64) -> Result<ModelParams<S>> {
    let plan = config.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    let mut kinds = BTreeMap::new();
    for spec in &plan.params {
        let t = match spec.kind {
            ParamKind::ConvKernel => {
                let fan_in: usize = spec.shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(spec.shape.clone(), |_| {
                    S::from_f64_lossy(normal.sample(&mut rng))
                })
            }
            ParamKind::BnScale | ParamKind::BnRunningVar => {
                Tensor::full(spec.shape.clone(), S::one())
            }
            ParamKind::BnShift | ParamKind::BnRunningMean => Tensor::zeros(spec.shape.clone()),
        };
        tensors.insert(spec.path.clone(), t);
        kinds.insert(spec.path.clone(), spec.kind);
    }
    Ok(ModelParams {
        arch: config.clone(),
        tensors,
        kinds,
        norm: None,
    })
}

impl<S: Scalar> ModelParams<S> {
    /// Reassemble a model from named tensors, checking every shape against `arch`.
    pub fn from_tensors(
        arch: ArchConfig,
        mut tensors: BTreeMap<String, Tensor<S>>,
        norm: Option<NormStats>,
    ) -> Result<Self> {
        let plan = arch.plan()?;
        let mut ordered = BTreeMap::new();
        let mut kinds = BTreeMap::new();
        for spec in &plan.params {
            let t = tensors.remove(&spec.path).ok_or_else(|| {
                CoreError::PayloadMismatch(format!("missing tensor `{}`", spec.path))
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(CoreError::PayloadMismatch(format!(
                    "tensor `{}` has shape {:?}, architecture needs {:?}",
                    spec.path,
                    t.shape(),
                    spec.shape
                )));
            }
            ordered.insert(spec.path.clone(), t);
            kinds.insert(spec.path.clone(), spec.kind);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(CoreError::PayloadMismatch(format!(
                "unexpected tensor `{extra}`"
            )));
        }
        Ok(ModelParams {
            arch,
            tensors: ordered,
            kinds,
            norm,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn norm_stats(&self) -> Option<NormStats> {
        self.norm
    }

    pub fn set_norm_stats(&mut self, norm: Option<NormStats>) {
        self.norm = norm;
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.tensors
    }

    pub fn tensor(&self, path: &str) -> Option<&Tensor<S>> {
        self.tensors.get(path)
    }

    pub fn tensor_mut(&mut self, path: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(path)
    }

    pub fn kind(&self, path: &str) -> Option<ParamKind> {
        self.kinds.get(path).copied()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            kinds: self.kinds.clone(),
            norm: self.norm,
        }
    }

    /// Same parameters with a different nonlinearity.
    pub fn with_activation(&self, activation: Activation) -> Self {
        let mut m = self.clone();
        m.arch.activation = activation;
        m
    }

    fn get(&self, path: &str) -> &Tensor<S> {
        &self.tensors[path]
    }

    /// Record the forward pass for `input` (a `N×months×H×W` node).
    ///
    /// With `track_params` every parameter leaf requires a gradient.
    pub fn forward_graph(
        &self,
        g: &mut Graph<S>,
        input: NodeId,
        mode: BnMode,
        track_params: bool,
    ) -> Result<ForwardTrace> {
        let arch = &self.arch;
        let [_, months, h, w] = g.value(input).nchw()?;
        if months != arch.input_months || (h, w) != arch.grid {
            return Err(CoreError::shape(format!(
                "window {months}×{h}×{w} does not match architecture {}×{}×{}",
                arch.input_months, arch.grid.0, arch.grid.1
            )));
        }
        let mut b = Builder {
            model: self,
            g,
            mode,
            track: track_params,
            params: Vec::new(),
            bns: Vec::new(),
        };
        let mut x = input;
        if let Some(n) = self.norm {
            let inv = 1.0 / n.std;
            x =
                b.g.affine(x, S::from_f64_lossy(inv), S::from_f64_lossy(-n.mean * inv));
        }
        let mut stages = Vec::new();
        x = b.conv(x, "stem.conv", arch.stem.stride, arch.stem.padding)?;
        stages.push(("stem".to_string(), x));
        for (i, block) in arch.blocks.iter().enumerate() {
            let name = format!("blocks.{i}");
            match *block {
                BlockConfig::Dense { layers, .. } => {
                    for l in 0..layers {
                        let p = format!("{name}.layer{l}");
                        let a = b.bn_act(x, &format!("{p}.bn"))?;
                        let y = b.conv(a, &format!("{p}.conv"), 1, 1)?;
                        x = b.g.concat_channels(x, y)?;
                    }
                }
                BlockConfig::Down {
                    stride, padding, ..
                } => {
                    let a = b.bn_act(x, &format!("{name}.bn1"))?;
                    let c = b.conv(a, &format!("{name}.compress"), 1, 0)?;
                    let a = b.bn_act(c, &format!("{name}.bn2"))?;
                    x = b.conv(a, &format!("{name}.conv"), stride, padding)?;
                }
                BlockConfig::Up { target, .. } => {
                    let a = b.bn_act(x, &format!("{name}.bn1"))?;
                    let c = b.conv(a, &format!("{name}.compress"), 1, 0)?;
                    let a = b.bn_act(c, &format!("{name}.bn2"))?;
                    let r = b.g.resize_nearest(a, target)?;
                    x = b.conv(r, &format!("{name}.conv"), 1, 1)?;
                }
            }
            stages.push((name, x));
        }
        let a = b.bn_act(x, "head.bn1")?;
        let r = b.g.resize_nearest(a, arch.grid)?;
        stages.push(("head".to_string(), r));
        let c = b.conv(r, "head.conv1", 1, 1)?;
        let a = b.bn_act(c, "head.bn2")?;
        let out = b.conv(a, "head.conv2", 1, 1)?;
        stages.push(("output".to_string(), out));
        Ok(ForwardTrace {
            input,
            output: out,
            stages,
            params: b.params,
            batch_norms: b.bns,
        })
    }

    /// Un-masked eval-mode prediction `1×H×W` for a `months×H×W` window.
    pub fn forward(&self, window: &Tensor<S>) -> Result<Tensor<S>> {
        if window.rank() != 3 {
            return Err(CoreError::shape(format!(
                "forward expects a months×H×W window, got {:?}",
                window.shape()
            )));
        }
        let mut g = Graph::new();
        let x = g.input(window.clone(), false);
        let trace = self.forward_graph(&mut g, x, BnMode::Eval, false)?;
        let (_, h, w) = (0, self.arch.grid.0, self.arch.grid.1);
        g.value(trace.output).clone().reshape(vec![1, h, w])
    }

    /// Eval-mode predictions for a stack of windows, `N×1×H×W`.
    pub fn forward_batch(&self, windows: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let x = g.input(windows.clone(), false);
        let trace = self.forward_graph(&mut g, x, BnMode::Eval, false)?;
        Ok(g.value(trace.output).clone())
    }

    pub fn count_params(&self) -> Result<ParamCounts> {
        count_params(&self.arch)
    }
}

struct Builder<'a, S: Scalar> {
    model: &'a ModelParams<S>,
    g: &'a mut Graph<S>,
    mode: BnMode,
    track: bool,
    params: Vec<(String, NodeId)>,
    bns: Vec<(String, NodeId)>,
}

impl<S: Scalar> Builder<'_, S> {
    fn leaf(&mut self, path: &str) -> NodeId {
        let id = self.g.param(path, self.model.get(path).clone(), self.track);
        self.params.push((path.to_string(), id));
        id
    }

    fn conv(&mut self, x: NodeId, path: &str, stride: usize, padding: usize) -> Result<NodeId> {
        let k = self.leaf(path);
        self.g.conv2d(x, k, stride, padding)
    }

    fn bn_act(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let scale = self.leaf(&format!("{prefix}.scale"));
        let shift = self.leaf(&format!("{prefix}.shift"));
        let m = self.model;
        let mean = m.get(&format!("{prefix}.running_mean")).data().to_vec();
        let var = m.get(&format!("{prefix}.running_var")).data().to_vec();
        let eps = S::from_f64_lossy(m.arch.bn_eps);
        let y = self
            .g
            .batchnorm2d(x, scale, shift, &mean, &var, self.mode, eps)?;
        self.bns.push((prefix.to_string(), y));
        Ok(match m.arch.activation {
            Activation::Relu => self.g.relu(y),
            Activation::Identity => y,
        })
    }
}

/// Learnable parameter counts per stage; running statistics are excluded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub stages: Vec<Stage>,
    pub total: usize,
}

impl ParamCounts {
    pub fn stage(&self, name: &str) -> Option<usize> {
        self.stages
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.params)
    }
}

pub fn count_params(arch: &ArchConfig) -> Result<ParamCounts> {
    let plan: Plan = arch.plan()?;
    let total = plan.total_params();
    Ok(ParamCounts {
        stages: plan.stages,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_kernel_shape() {
        let m = build_model::<f32>(&ArchConfig::canonical(), 0).unwrap();
        assert_eq!(m.tensor("stem.conv").unwrap().shape(), &[144, 36, 5, 5]);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = build_model::<f32>(&ArchConfig::desk(), 3).unwrap();
        let b = build_model::<f32>(&ArchConfig::desk(), 3).unwrap();
        let c = build_model::<f32>(&ArchConfig::desk(), 4).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        assert_ne!(a.tensors(), c.tensors());
    }

    #[test]
    fn desk_forward_shape() {
        let m = build_model::<f32>(&ArchConfig::desk(), 1).unwrap();
        let x = Tensor::from_fn(vec![12, 24, 40], |i| ((i % 17) as f32 - 8.0) * 0.1);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 24, 40]);
        assert!(y.all_finite());
        assert!(m.forward(&Tensor::zeros(vec![11, 24, 40])).is_err());
        assert!(m.forward(&Tensor::zeros(vec![12, 24, 41])).is_err());
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let mut m = build_model::<f64>(&ArchConfig::desk(), 1).unwrap();
        m.tensor_mut("head.conv2").unwrap().data_mut().fill(0.0);
        let y = m.forward(&Tensor::zeros(vec![12, 24, 40])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_stage_shapes_follow_plan() {
        let arch = ArchConfig::desk();
        let m = build_model::<f64>(&arch, 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2, 12, 24, 40]), false);
        let trace = m.forward_graph(&mut g, x, BnMode::Eval, false).unwrap();
        let plan = arch.plan().unwrap();
        for ((name, id), stage) in trace.stages.iter().zip(&plan.stages[1..]) {
            assert_eq!(name, &stage.name);
            let s = g.shape(*id);
            assert_eq!(&s[1..], &stage.shape[..], "{name}");
        }
    }

    #[test]
    fn masking_rules() {
        let pred = Tensor::<f32>::new(vec![1, 1, 3], vec![3.7, 1.0, -2.0]).unwrap();
        let ocean = LandMask::all_ocean(1, 3);
        assert_eq!(apply_mask(&pred, &ocean).unwrap(), pred);
        let mixed = LandMask::new(1, 3, vec![false, true, true]).unwrap();
        let once = apply_mask(&pred, &mixed).unwrap();
        assert_eq!(once.data(), &[0.0, 1.0, -2.0]);
        assert_eq!(apply_mask(&once, &mixed).unwrap(), once);
        let land = apply_mask_cells(&pred, 1, 3, &[false; 3]).unwrap();
        assert!(land.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            LandMask::new(1, 3, vec![false; 3]),
            Err(CoreError::AllLand)
        ));
        assert!(apply_mask(&Tensor::<f32>::zeros(vec![1, 2, 3]), &mixed).is_err());
    }
}
