//! The synthetic desk benchmark: a purely local (no teleconnection) field
//! series and the training recipe used for the diagnostic reproductions.

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, make_samples, moving_average_12, split_dataset, FieldSeries, SampleWindow,
    SplitPolicy, SynthConfig,
};
use crate::emulator::{build_model, ArchConfig};
use crate::error::Result;
use crate::trainer::{train, AdamConfig, SampleSet, TrainConfig, TrainOutcome};

pub const BENCHMARK_LEADS: [usize; 3] = [1, 6, 9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskBenchmark {
    pub synth: SynthConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub train_n: usize,
    pub val_n: usize,
    pub policy: SplitPolicy,
    pub model_seed: u64,
}

impl Default for DeskBenchmark {
    fn default() -> Self {
        let arch = ArchConfig::desk();
        DeskBenchmark {
            synth: SynthConfig {
                grid: arch.grid,
                months: 2400,
                seed: 7,
                persistence: 0.9,
                radius: 1.0,
                noise: 0.3,
                noise_radius: 2.5,
                ..SynthConfig::default()
            },
            train: TrainConfig {
                adam: AdamConfig {
                    lr: 2e-3,
                    weight_decay: 1e-2,
                    ..AdamConfig::default()
                },
                batch_size: 8,
                epochs: 6,
                seed: 11,
                ..TrainConfig::default()
            },
            arch,
            train_n: 1024,
            val_n: 96,
            policy: SplitPolicy::Contiguous,
            model_seed: 11,
        }
    }
}

impl DeskBenchmark {
    /// Generated series after the 12-month moving average.
    pub fn series(&self) -> Result<FieldSeries> {
        moving_average_12(&generate_synthetic(&self.synth)?)
    }

    pub fn splits(
        &self,
        series: &FieldSeries,
        lead: usize,
    ) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>)> {
        let samples = make_samples(series, lead, self.arch.input_months)?;
        split_dataset(&samples, self.train_n, self.val_n, self.policy)
    }

    pub fn train_lead(&self, series: &FieldSeries, lead: usize) -> Result<TrainOutcome<f32>> {
        let (tr, va) = self.splits(series, lead)?;
        let mask = series.mask_or_ocean();
        let cfg = TrainConfig {
            lead,
            ..self.train.clone()
        };
        let model = build_model::<f32>(&self.arch, self.model_seed)?;
        train(
            model,
            &SampleSet::new(series, &tr, &mask),
            Some(&SampleSet::new(series, &va, &mask)),
            &cfg,
        )
    }
}
