use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{write_series, FieldSeries};
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output pixel being explained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelTarget {
    pub row: usize,
    pub col: usize,
    /// Lead time of the model being probed.
    pub lead: usize,
    /// Informational; land targets are explained like any other.
    #[serde(default)]
    pub ocean: Option<bool>,
}

impl PixelTarget {
    pub fn new(row: usize, col: usize) -> Self {
        PixelTarget {
            row,
            col,
            lead: 1,
            ocean: None,
        }
    }

    pub fn with_lead(mut self, lead: usize) -> Self {
        self.lead = lead;
        self
    }

    pub fn check(&self, grid: (usize, usize)) -> Result<()> {
        if self.row >= grid.0 || self.col >= grid.1 {
            return Err(CoreError::invalid(format!(
                "pixel ({}, {}) outside {}×{} grid",
                self.row, self.col, grid.0, grid.1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gradient,
    GuidedBackprop,
    IntegratedGradients { steps: usize },
    DeepLift,
    DeepLiftShap,
}

impl Method {
    pub const DEFAULT_IG_STEPS: usize = 64;

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::GuidedBackprop => "guided",
            Method::IntegratedGradients { .. } => "ig",
            Method::DeepLift => "deeplift",
            Method::DeepLiftShap => "deepliftshap",
        }
    }

    /// Parse a method name; `ig` accepts an optional `:steps` suffix.
    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let m = match name {
            "gradient" | "saliency" | "grad" => Method::Gradient,
            "guided" | "gbp" | "guided_backprop" | "guided-backprop" => Method::GuidedBackprop,
            "ig" | "integrated_gradients" | "integrated-gradients" => {
                let steps = match arg {
                    Some(a) => a
                        .parse()
                        .map_err(|_| CoreError::invalid(format!("bad IG step count `{a}`")))?,
                    None => Self::DEFAULT_IG_STEPS,
                };
                if steps == 0 {
                    return Err(CoreError::invalid("IG needs at least one step"));
                }
                return Ok(Method::IntegratedGradients { steps });
            }
            "deeplift" | "dlft" => Method::DeepLift,
            "deepliftshap" | "deeplift_shap" | "deeplift-shap" | "shap" => Method::DeepLiftShap,
            _ => {
                return Err(CoreError::invalid(format!(
                    "unknown attribution method `{s}`"
                )))
            }
        };
        if arg.is_some() {
            return Err(CoreError::invalid(format!(
                "method `{name}` takes no argument"
            )));
        }
        Ok(m)
    }

    pub fn all() -> [Method; 5] {
        [
            Method::Gradient,
            Method::GuidedBackprop,
            Method::IntegratedGradients {
                steps: Self::DEFAULT_IG_STEPS,
            },
            Method::DeepLift,
            Method::DeepLiftShap,
        ]
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::IntegratedGradients { steps } if *steps != Self::DEFAULT_IG_STEPS => {
                write!(f, "ig:{steps}")
            }
            m => f.write_str(m.tag()),
        }
    }
}

/// Serializable summary of the baseline a heatmap was measured against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineDescriptor {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub count: usize,
    /// Whether the baseline was given in standardized units and norm stats were active.
    pub standardized: bool,
}

/// Attribution of one output pixel over the full input window.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<S> {
    /// `months×H×W`.
    pub values: Tensor<S>,
    pub method: Method,
    pub target: PixelTarget,
    pub sample: Option<usize>,
    pub baseline: Option<BaselineDescriptor>,
    /// Model output at the target for the explained window.
    pub output: f64,
    /// Model output at the target for the baseline (mean over baselines for sets).
    pub baseline_output: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub method: Method,
    pub method_tag: String,
    pub target: PixelTarget,
    pub sample: Option<usize>,
    pub baseline: Option<BaselineDescriptor>,
    pub output: f64,
    pub baseline_output: Option<f64>,
    pub sum: f64,
    pub shape: Vec<usize>,
}

impl<S: Scalar> Heatmap<S> {
    pub fn months(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn sum(&self) -> f64 {
        self.values.sum_f64()
    }

    /// `f(x) − f(x′)` when a baseline is involved.
    pub fn delta(&self) -> Option<f64> {
        self.baseline_output.map(|b| self.output - b)
    }

    pub fn with_sample(mut self, sample: usize) -> Self {
        self.sample = Some(sample);
        self
    }

    pub fn meta(&self) -> HeatmapMeta {
        HeatmapMeta {
            method: self.method,
            method_tag: self.method.tag().to_string(),
            target: self.target,
            sample: self.sample,
            baseline: self.baseline.clone(),
            output: self.output,
            baseline_output: self.baseline_output,
            sum: self.sum(),
            shape: self.values.shape().to_vec(),
        }
    }

    pub fn to_series(&self) -> Result<FieldSeries> {
        let name = format!(
            "heatmap {} ({}, {}) lead {}",
            self.method, self.target.row, self.target.col, self.target.lead
        );
        Ok(FieldSeries::from_tensor(&self.values, None)?.with_name(name))
    }

    /// Write `<stem>.fsr` and `<stem>.json` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let fsr = dir.join(format!("{stem}.fsr"));
        let json = dir.join(format!("{stem}.json"));
        write_series(&self.to_series()?, &fsr)?;
        fs::write(&json, serde_json::to_vec_pretty(&self.meta())?)?;
        Ok((fsr, json))
    }
}
