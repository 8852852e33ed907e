//! Masked-MSE objective, Adam optimization, training and evaluation loops,
//! and the checkpoint container.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::data::{FieldSeries, SampleWindow};
use crate::emulator::{apply_mask, LandMask, ModelParams, NormStats};
use crate::error::{CoreError, Result};
use crate::graph::{BackwardMode, Graph};
use crate::ops::{update_running_stats, BnMode};
use crate::scalar::Scalar;
use crate::stats::pairwise_sum;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lead: usize,
    /// Restrict the loss to ocean cells.
    pub mask_loss: bool,
    /// Fit global input mean/std on the training windows.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 16,
            epochs: 10,
            seed: 0,
            lead: 1,
            mask_loss: true,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) {
            return Err(CoreError::invalid("learning rate must be > 0"));
        }
        if !(self.adam.weight_decay >= 0.0) {
            return Err(CoreError::invalid("weight decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::invalid("batch size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Windows over one series, with the mask used for loss and post-processing.
#[derive(Clone, Copy, Debug)]
pub struct SampleSet<'a> {
    pub series: &'a FieldSeries,
    pub windows: &'a [SampleWindow],
    pub mask: &'a LandMask,
}

impl<'a> SampleSet<'a> {
    pub fn new(series: &'a FieldSeries, windows: &'a [SampleWindow], mask: &'a LandMask) -> Self {
        SampleSet {
            series,
            windows,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Stacked `B×months×H×W` inputs and `B×1×H×W` targets for `idx`.
    pub fn batch<S: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let xs = idx
            .iter()
            .map(|&i| self.windows[i].input(self.series))
            .collect::<Result<Vec<_>>>()?;
        let ys = idx
            .iter()
            .map(|&i| self.windows[i].target(self.series))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
    }

    pub fn subset(&self, windows: &'a [SampleWindow]) -> SampleSet<'a> {
        SampleSet {
            series: self.series,
            windows,
            mask: self.mask,
        }
    }
}

/// Mean squared error over the cells where `ocean` is set, across all planes.
pub fn masked_mse_cells<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    ocean: &[bool],
) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let plane = ocean.len();
    if plane == 0 || pred.len() % plane != 0 {
        return Err(CoreError::shape(format!(
            "mask of {plane} cells does not tile a {:?} prediction",
            pred.shape()
        )));
    }
    let ocean_n = ocean.iter().filter(|&&o| o).count();
    if ocean_n == 0 {
        return Err(CoreError::AllLand);
    }
    let sq: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .filter(|(i, _)| ocean[i % plane])
        .map(|(_, (&a, &b))| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .collect();
    Ok(pairwise_sum(&sq) / (ocean_n * (pred.len() / plane)) as f64)
}

pub fn masked_mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, mask: &LandMask) -> Result<f64> {
    masked_mse_cells(pred, target, mask.cells())
}

/// Masked prediction minus target; zero on land.
pub fn error_map<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    mask: &LandMask,
) -> Result<Tensor<S>> {
    let masked = apply_mask(pred, mask)?;
    apply_mask(&masked.sub(target)?, mask)
}

/// Global mean/std over ocean cells of every month any training window reads.
pub fn fit_norm_stats(set: &SampleSet<'_>) -> Result<NormStats> {
    if set.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut used = vec![false; set.series.months()];
    for w in set.windows {
        for m in w.first_input_month()..w.anchor {
            used[m] = true;
        }
    }
    let ocean = set.mask.cells();
    let vals: Vec<f64> = used
        .iter()
        .enumerate()
        .filter(|(_, &u)| u)
        .flat_map(|(m, _)| {
            set.series
                .frame(m)
                .iter()
                .zip(ocean)
                .filter(|(_, &o)| o)
                .map(|(&v, _)| v as f64)
        })
        .collect();
    let n = vals.len() as f64;
    let mean = pairwise_sum(&vals) / n;
    let sq: Vec<f64> = vals.iter().map(|v| (v - mean) * (v - mean)).collect();
    let std = (pairwise_sum(&sq) / n).sqrt();
    Ok(NormStats {
        mean,
        std: if std > 0.0 { std } else { 1.0 },
    })
}

/// Result of [`train`]: the best-validation parameters and per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub model: ModelParams<S>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

fn loss_mask(set: &SampleSet<'_>, cfg: &TrainConfig) -> Vec<bool> {
    if cfg.mask_loss {
        set.mask.cells().to_vec()
    } else {
        vec![true; set.mask.cells().len()]
    }
}

/// One optimizer step on a batch; returns the pre-step loss.
pub fn train_step<S: Scalar>(
    model: &mut ModelParams<S>,
    inputs: Tensor<S>,
    targets: Tensor<S>,
    mask: &[bool],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(inputs, false);
    let trace = model.forward_graph(&mut g, x, BnMode::Train, true)?;
    let loss = g.masked_mse(trace.output, targets, mask)?;
    let loss_value = g.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(CoreError::Divergence { epoch: 0, batch: 0 });
    }
    let mut grads = g.backward(loss, BackwardMode::Standard)?;
    let mut named = BTreeMap::new();
    for (path, id) in &trace.params {
        if let Some(t) = grads.take(*id) {
            named.insert(path.clone(), t);
        }
    }
    let momentum = S::from_f64_lossy(model.arch().bn_momentum);
    for (prefix, id) in &trace.batch_norms {
        if let Some(st) = g.batch_stats(*id) {
            let st = st.clone();
            let mean_path = format!("{prefix}.running_mean");
            let var_path = format!("{prefix}.running_var");
            let mut mean = model.tensor(&mean_path).expect("bn mean").clone();
            let mut var = model.tensor(&var_path).expect("bn var").clone();
            update_running_stats(mean.data_mut(), var.data_mut(), &st, momentum);
            *model.tensor_mut(&mean_path).expect("bn mean") = mean;
            *model.tensor_mut(&var_path).expect("bn var") = var;
        }
    }
    adam_step(model, &named, state, cfg)?;
    Ok(loss_value)
}

/// Mean eval-mode masked MSE over a sample set, in fixed batches.
pub fn evaluate<S: Scalar>(model: &ModelParams<S>, set: &SampleSet<'_>) -> Result<f64> {
    evaluate_with(model, set, set.mask.cells(), 16)
}

fn evaluate_with<S: Scalar>(
    model: &ModelParams<S>,
    set: &SampleSet<'_>,
    mask: &[bool],
    batch: usize,
) -> Result<f64> {
    if set.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut per_batch = Vec::new();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = set.batch::<S>(chunk)?;
        let pred = model.forward_batch(&x)?;
        let (h, w) = model.arch().grid;
        let pred = crate::emulator::apply_mask_cells(&pred, h, w, mask)?;
        per_batch.push(masked_mse_cells(&pred, &y, mask)? * chunk.len() as f64);
    }
    Ok(pairwise_sum(&per_batch) / set.len() as f64)
}

/// Train `model` on `train_set`, tracking validation loss on `val_set`.
///
/// The returned model carries the parameters of the epoch with the lowest
/// validation loss (training loss when no validation set is given).
pub fn train<S: Scalar>(
    mut model: ModelParams<S>,
    train_set: &SampleSet<'_>,
    val_set: Option<&SampleSet<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if cfg.standardize && model.norm_stats().is_none() {
        model.set_norm_stats(Some(fit_norm_stats(train_set)?));
    }
    let mask = loss_mask(train_set, cfg);
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams<S>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(epoch as u64),
        );
        order.shuffle(&mut rng);
        let mut weighted = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch::<S>(chunk)?;
            let loss = match train_step(&mut model, x, y, &mask, &mut state, &cfg.adam) {
                Err(CoreError::Divergence { .. }) => {
                    return Err(CoreError::Divergence { epoch, batch: b })
                }
                other => other?,
            };
            weighted.push(loss * chunk.len() as f64);
        }
        let train_loss = pairwise_sum(&weighted) / train_set.len() as f64;
        let val_loss = match val_set {
            Some(v) if !v.is_empty() => Some(evaluate_with(
                &model,
                v,
                &loss_mask(v, cfg),
                cfg.batch_size,
            )?),
            _ => None,
        };
        if !train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(CoreError::Divergence {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model, None),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_samples, moving_average_12, SynthConfig};
    use crate::emulator::{build_model, ArchConfig};

    #[test]
    fn mse_definition_and_masking() {
        let t = Tensor::<f64>::zeros(vec![1, 1, 3]);
        let p = Tensor::new(vec![1, 1, 3], vec![1.0, 3.0, 1e6]).unwrap();
        assert_eq!(masked_mse_cells(&p, &p, &[true; 3]).unwrap(), 0.0);
        assert_eq!(masked_mse_cells(&p, &t, &[true, true, false]).unwrap(), 5.0);
        assert!(matches!(
            masked_mse_cells(&p, &t, &[false; 3]),
            Err(CoreError::AllLand)
        ));
    }

    fn tiny_arch() -> ArchConfig {
        let mut a = ArchConfig::desk();
        a.grid = (8, 12);
        a.input_months = 4;
        a.stem.out_channels = 6;
        a.blocks = vec![
            crate::emulator::BlockConfig::Dense {
                growth: 2,
                layers: 1,
            },
            crate::emulator::BlockConfig::Down {
                compress: 4,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            crate::emulator::BlockConfig::Up {
                compress: 4,
                target: (4, 6),
            },
        ];
        a.head.mid_channels = 4;
        a
    }

    fn tiny_series() -> FieldSeries {
        let raw = generate_synthetic(&SynthConfig {
            grid: (8, 12),
            months: 80,
            seed: 3,
            spinup: 20,
            ..SynthConfig::default()
        })
        .unwrap();
        moving_average_12(&raw).unwrap()
    }

    #[test]
    fn one_small_step_decreases_batch_loss() {
        let series = tiny_series();
        let mask = series.mask_or_ocean();
        let windows = make_samples(&series, 1, 4).unwrap();
        let set = SampleSet::new(&series, &windows[..4], &mask);
        let mut model = build_model::<f64>(&tiny_arch(), 1).unwrap();
        model.set_norm_stats(Some(fit_norm_stats(&set).unwrap()));
        let cfg = AdamConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let idx = [0, 1, 2, 3];
        let mut state = AdamState::new();
        let (x, y) = set.batch::<f64>(&idx).unwrap();
        let before = train_step(
            &mut model,
            x.clone(),
            y.clone(),
            mask.cells(),
            &mut state,
            &cfg,
        )
        .unwrap();
        let mut probe = model.clone();
        let after =
            train_step(&mut probe, x, y, mask.cells(), &mut AdamState::new(), &cfg).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let series = tiny_series();
        let mask = series.mask_or_ocean();
        let windows = make_samples(&series, 1, 4).unwrap();
        let set = SampleSet::new(&series, &windows[..8], &mask);
        let model = build_model::<f32>(&tiny_arch(), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            standardize: false,
            ..TrainConfig::default()
        };
        let out = train(model.clone(), &set, None, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model.tensors(), model.tensors());
    }

    #[test]
    fn training_is_deterministic() {
        let series = tiny_series();
        let mask = series.mask_or_ocean();
        let windows = make_samples(&series, 1, 4).unwrap();
        let set = SampleSet::new(&series, &windows[..20], &mask);
        let val = SampleSet::new(&series, &windows[30..36], &mask);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = train(
            build_model::<f32>(&tiny_arch(), 5).unwrap(),
            &set,
            Some(&val),
            &cfg,
        )
        .unwrap();
        let b = train(
            build_model::<f32>(&tiny_arch(), 5).unwrap(),
            &set,
            Some(&val),
            &cfg,
        )
        .unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.tensors(), b.model.tensors());
        assert!(a.history.iter().all(|r| r.val_loss.is_some()));
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
