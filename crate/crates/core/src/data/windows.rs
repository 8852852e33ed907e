use serde::{Deserialize, Serialize};

use super::series::FieldSeries;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SMOOTHING_WINDOW: usize = 12;

/// Trailing equal-weight 12-month mean over ocean cells; `T' = T − 11`.
///
/// Output month `t` averages input months `t..t+12`, so it is aligned with
/// the last month of its window.
pub fn moving_average_12(series: &FieldSeries) -> Result<FieldSeries> {
    let t = series.months();
    if t < SMOOTHING_WINDOW {
        return Err(CoreError::SeriesTooShort {
            required: SMOOTHING_WINDOW,
            got: t,
        });
    }
    let (h, w) = series.grid();
    let n = h * w;
    let out_t = t - SMOOTHING_WINDOW + 1;
    let mut out = vec![0f32; out_t * n];
    for cell in 0..n {
        if !series.is_ocean(cell / w, cell % w) {
            continue;
        }
        for o in 0..out_t {
            let mut acc = 0f64;
            for m in o..o + SMOOTHING_WINDOW {
                acc += series.values()[m * n + cell] as f64;
            }
            out[o * n + cell] = (acc / SMOOTHING_WINDOW as f64) as f32;
        }
    }
    let mut s = FieldSeries::new(out_t, h, w, out, series.mask.clone())?;
    s.name = series.name.clone();
    s.provenance = format!("{}|moving_average_12", series.provenance);
    s.smoothed = true;
    Ok(s)
}

/// `months` consecutive input frames ending just before `anchor`, and the
/// target frame `anchor + lead − 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleWindow {
    pub anchor: usize,
    pub lead: usize,
    pub months: usize,
}

impl SampleWindow {
    pub fn first_input_month(&self) -> usize {
        self.anchor - self.months
    }

    pub fn target_month(&self) -> usize {
        self.anchor + self.lead - 1
    }

    pub fn input<S: Scalar>(&self, series: &FieldSeries) -> Result<Tensor<S>> {
        series.frames(self.first_input_month(), self.months)
    }

    pub fn target<S: Scalar>(&self, series: &FieldSeries) -> Result<Tensor<S>> {
        series.frames(self.target_month(), 1)
    }
}

/// Every window of `months` inputs with a target `lead` months ahead, ordered by anchor.
pub fn make_samples(series: &FieldSeries, lead: usize, months: usize) -> Result<Vec<SampleWindow>> {
    if lead == 0 || months == 0 {
        return Err(CoreError::invalid("lead and input months must be >= 1"));
    }
    let t = series.months();
    let required = months + lead;
    if t < required {
        return Err(CoreError::SeriesTooShort { required, got: t });
    }
    Ok((months..=t - lead)
        .map(|anchor| SampleWindow {
            anchor,
            lead,
            months,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPolicy {
    /// Training windows first, then a guard gap, then validation windows;
    /// no source month is shared between the splits.
    #[default]
    Contiguous,
    /// Validation windows spread evenly through the first `train + val`
    /// windows; source months may overlap.
    Interleaved,
}

/// Number of windows skipped between a contiguous train and validation split.
pub fn guard_gap(months: usize, lead: usize) -> usize {
    months + lead - 1
}

pub fn split_dataset(
    samples: &[SampleWindow],
    train_n: usize,
    val_n: usize,
    policy: SplitPolicy,
) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>)> {
    let gap = match (policy, samples.first()) {
        (SplitPolicy::Contiguous, Some(s)) if val_n > 0 => guard_gap(s.months, s.lead),
        _ => 0,
    };
    let needed = train_n + val_n + gap;
    if needed > samples.len() {
        return Err(CoreError::InsufficientSamples {
            needed,
            available: samples.len(),
        });
    }
    match policy {
        SplitPolicy::Contiguous => {
            let train = samples[..train_n].to_vec();
            let start = train_n + gap;
            let val = samples[start..start + val_n].to_vec();
            Ok((train, val))
        }
        SplitPolicy::Interleaved => {
            let total = train_n + val_n;
            let mut train = Vec::with_capacity(train_n);
            let mut val = Vec::with_capacity(val_n);
            for (i, s) in samples[..total].iter().enumerate() {
                if (i + 1) * val_n / total > i * val_n / total {
                    val.push(*s);
                } else {
                    train.push(*s);
                }
            }
            Ok((train, val))
        }
    }
}
