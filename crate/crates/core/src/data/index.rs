use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::series::{read_series, FieldSeries};
use super::windows::{make_samples, split_dataset, SampleWindow, SplitPolicy};
use crate::error::{CoreError, Result};

/// Train/validation windows for one lead time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadSplit {
    pub lead: usize,
    pub train: Vec<SampleWindow>,
    pub val: Vec<SampleWindow>,
}

/// Prepared dataset: a smoothed series file plus fixed windows per lead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    /// Path of the smoothed series, relative to the index file when not absolute.
    pub series: String,
    pub input_months: usize,
    pub policy: SplitPolicy,
    pub train_n: usize,
    pub val_n: usize,
    pub leads: Vec<LeadSplit>,
}

impl DatasetIndex {
    pub const VERSION: u32 = 1;

    /// Window `series` for every lead and split each into train/val.
    pub fn build(
        series: &FieldSeries,
        series_path: impl Into<String>,
        input_months: usize,
        leads: &[usize],
        train_n: usize,
        val_n: usize,
        policy: SplitPolicy,
    ) -> Result<Self> {
        if leads.is_empty() {
            return Err(CoreError::invalid("no lead times requested"));
        }
        let leads = leads
            .iter()
            .map(|&lead| {
                let samples = make_samples(series, lead, input_months)?;
                let (train, val) = split_dataset(&samples, train_n, val_n, policy)?;
                Ok(LeadSplit { lead, train, val })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetIndex {
            format_version: Self::VERSION,
            series: series_path.into(),
            input_months,
            policy,
            train_n,
            val_n,
            leads,
        })
    }

    pub fn lead(&self, lead: usize) -> Result<&LeadSplit> {
        self.leads
            .iter()
            .find(|l| l.lead == lead)
            .ok_or_else(|| CoreError::invalid(format!("lead {lead} not in dataset index")))
    }

    pub fn lead_values(&self) -> Vec<usize> {
        self.leads.iter().map(|l| l.lead).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let idx: DatasetIndex = serde_json::from_slice(&fs::read(path)?)?;
        if idx.format_version != Self::VERSION {
            return Err(CoreError::UnsupportedVersion {
                found: idx.format_version,
                supported: Self::VERSION,
            });
        }
        Ok(idx)
    }

    /// Location of the series file as seen from `index_path`.
    pub fn series_path(&self, index_path: impl AsRef<Path>) -> PathBuf {
        let p = Path::new(&self.series);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            index_path
                .as_ref()
                .parent()
                .unwrap_or(Path::new(""))
                .join(p)
        }
    }

    pub fn load_series(&self, index_path: impl AsRef<Path>) -> Result<FieldSeries> {
        read_series(self.series_path(index_path))
    }
}
