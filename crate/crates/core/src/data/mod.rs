//! Field-series storage, smoothing, sample windowing and synthetic generation.

mod index;
mod series;
mod synth;
mod windows;

pub use index::{DatasetIndex, LeadSplit};
pub use series::{read_series, write_series, FieldSeries, FSR_MAGIC};
pub use synth::{generate_synthetic, MaskSpec, Rect, SynthConfig, Teleconnection};
pub use windows::{
    guard_gap, make_samples, moving_average_12, split_dataset, SampleWindow, SplitPolicy,
    SMOOTHING_WINDOW,
};
