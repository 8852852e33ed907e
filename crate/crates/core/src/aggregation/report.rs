use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Contributions;
use crate::attribution::{Method, PixelTarget};
use crate::data::{read_series, write_series, FieldSeries};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Dataset-level attribution summary for one target pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub target: PixelTarget,
    pub method: Method,
    pub lead: usize,
    pub n: usize,
    /// Mean of `max(h, 0)` over samples, `months×H×W`.
    pub mean_pos: Tensor<f64>,
    /// Mean of `max(−h, 0)` over samples, `months×H×W`.
    pub mean_neg: Tensor<f64>,
    pub series: Contributions,
    pub mean_input: Tensor<f64>,
    pub mean_target: Tensor<f64>,
    /// Masked prediction.
    pub mean_output: Tensor<f64>,
    pub mean_error: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub method: Method,
    pub method_tag: String,
    pub target: PixelTarget,
    pub lead: usize,
    pub n: usize,
    pub months: usize,
    pub grid: (usize, usize),
}

/// Directory name used for a report inside a reports root.
pub fn report_dir_name(target: PixelTarget, method: Method, lead: usize) -> String {
    format!(
        "lead{lead}_r{}_c{}_{}",
        target.row,
        target.col,
        method.tag()
    )
}

const PANELS: [&str; 4] = ["input", "target", "output", "error"];

impl GroupReport {
    pub fn meta(&self) -> ReportMeta {
        let s = self.mean_pos.shape();
        ReportMeta {
            method: self.method,
            method_tag: self.method.tag().to_string(),
            target: self.target,
            lead: self.lead,
            n: self.n,
            months: s[0],
            grid: (s[1], s[2]),
        }
    }

    pub fn dir_name(&self) -> String {
        report_dir_name(self.target, self.method, self.lead)
    }

    fn panels(&self) -> [&Tensor<f64>; 4] {
        [
            &self.mean_input,
            &self.mean_target,
            &self.mean_output,
            &self.mean_error,
        ]
    }

    pub fn series_csv(&self) -> String {
        let mut out = String::from("month_index,positive,negative,total\n");
        for (i, m) in self.series.month_indices().into_iter().enumerate() {
            let _ = writeln!(
                out,
                "{m},{},{},{}",
                self.series.positive[i], self.series.negative[i], self.series.total[i]
            );
        }
        out
    }

    /// Write `meta.json`, `pos.fsr`, `neg.fsr`, `series.csv` and the panel fields.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("meta.json"),
            serde_json::to_vec_pretty(&self.meta())?,
        )?;
        write_series(
            &FieldSeries::from_tensor(&self.mean_pos, None)?.with_name("mean positive"),
            dir.join("pos.fsr"),
        )?;
        write_series(
            &FieldSeries::from_tensor(&self.mean_neg, None)?.with_name("mean negative"),
            dir.join("neg.fsr"),
        )?;
        fs::write(dir.join("series.csv"), self.series_csv())?;
        for (name, t) in PANELS.iter().zip(self.panels()) {
            write_series(
                &FieldSeries::from_tensor(t, None)?.with_name(format!("mean {name}")),
                dir.join(format!("{name}.fsr")),
            )?;
        }
        Ok(())
    }

    /// Read a report back; stored maps are 32-bit, series are exact.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ReportMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        let field =
            |name: &str| -> Result<Tensor<f64>> { Ok(read_series(dir.join(name))?.to_tensor()) };
        let csv = fs::read_to_string(dir.join("series.csv"))?;
        let (mut positive, mut negative, mut total) = (Vec::new(), Vec::new(), Vec::new());
        for line in csv.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(CoreError::PayloadMismatch(format!(
                    "bad series row `{line}`"
                )));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| CoreError::PayloadMismatch(format!("bad number `{s}` in series")))
            };
            positive.push(num(cols[1])?);
            negative.push(num(cols[2])?);
            total.push(num(cols[3])?);
        }
        if total.len() != meta.months {
            return Err(CoreError::PayloadMismatch(format!(
                "series has {} rows, report covers {} months",
                total.len(),
                meta.months
            )));
        }
        Ok(GroupReport {
            target: meta.target,
            method: meta.method,
            lead: meta.lead,
            n: meta.n,
            mean_pos: field("pos.fsr")?,
            mean_neg: field("neg.fsr")?,
            series: Contributions {
                positive,
                negative,
                total,
            },
            mean_input: field("input.fsr")?,
            mean_target: field("target.fsr")?,
            mean_output: field("output.fsr")?,
            mean_error: field("error.fsr")?,
        })
    }
}
