//! Occlusion of a spatial rectangle in the input window and the resulting
//! output difference, checked against receptive-field geometry.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_series, FieldSeries, Rect};
use crate::emulator::{apply_mask, LandMask, ModelParams, NormStats, ReceptiveFieldMap};
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub rect: Rect,
    /// 0-based frame indices; `None` ablates every month.
    #[serde(default)]
    pub months: Option<Vec<usize>>,
    #[serde(default)]
    pub fill: f64,
    /// `fill` is in standardized units and mapped through the model's norm stats.
    #[serde(default = "yes")]
    pub standardized: bool,
}

fn yes() -> bool {
    true
}

impl AblationSpec {
    pub fn new(rect: Rect) -> Self {
        AblationSpec {
            rect,
            months: None,
            fill: 0.0,
            standardized: true,
        }
    }

    pub fn with_months(mut self, months: Vec<usize>) -> Self {
        self.months = Some(months);
        self
    }

    pub fn with_fill(mut self, fill: f64, standardized: bool) -> Self {
        self.fill = fill;
        self.standardized = standardized;
        self
    }

    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        let r = self.rect;
        if r.is_empty() {
            return Err(CoreError::invalid(format!(
                "ablation rectangle {r:?} has zero area (need row0 < row1, col0 < col1)"
            )));
        }
        if !r.fits(shape[1], shape[2]) {
            return Err(CoreError::invalid(format!(
                "ablation rectangle {r:?} outside {}×{} grid",
                shape[1], shape[2]
            )));
        }
        if let Some(m) = &self.months {
            if m.is_empty() {
                return Err(CoreError::invalid("ablation month set is empty"));
            }
            if let Some(bad) = m.iter().find(|&&i| i >= shape[0]) {
                return Err(CoreError::invalid(format!(
                    "ablation month index {bad} outside {} input months",
                    shape[0]
                )));
            }
        }
        Ok(())
    }

    pub fn month_list(&self, months: usize) -> Vec<usize> {
        match &self.months {
            Some(m) => m.clone(),
            None => (0..months).collect(),
        }
    }

    pub fn raw_fill(&self, norm: Option<NormStats>) -> f64 {
        match (self.standardized, norm) {
            (true, Some(n)) => self.fill * n.std + n.mean,
            _ => self.fill,
        }
    }
}

/// Parse `row0,col0,row1,col1` (half-open).
pub fn parse_rect(s: &str) -> Result<Rect> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| {
            CoreError::invalid(format!("bad rectangle `{s}`, expected row0,col0,row1,col1"))
        })?;
    match v[..] {
        [r0, c0, r1, c1] => Ok(Rect::new(r0, c0, r1, c1)),
        _ => Err(CoreError::invalid(format!(
            "bad rectangle `{s}`, expected row0,col0,row1,col1"
        ))),
    }
}

/// Parse a month selection: `all`, or a comma list of negative offsets
/// (`-36..=-1`) and 0-based frame indices.
pub fn parse_months(s: &str, months: usize) -> Result<Option<Vec<usize>>> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v: i64 = part
            .parse()
            .map_err(|_| CoreError::invalid(format!("bad month `{part}`")))?;
        let idx = if v < 0 { months as i64 + v } else { v };
        if idx < 0 || idx >= months as i64 {
            return Err(CoreError::invalid(format!(
                "month `{part}` outside {months} input months"
            )));
        }
        let idx = idx as usize;
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    if out.is_empty() {
        return Err(CoreError::invalid("ablation month set is empty"));
    }
    out.sort_unstable();
    Ok(Some(out))
}

/// Copy of `window` (`months×H×W`) with the rectangle set to the fill value.
pub fn ablate<S: Scalar>(
    window: &Tensor<S>,
    spec: &AblationSpec,
    norm: Option<NormStats>,
) -> Result<Tensor<S>> {
    let shape: [usize; 3] = window.shape().try_into().map_err(|_| {
        CoreError::shape(format!(
            "ablation expects months×H×W, got {:?}",
            window.shape()
        ))
    })?;
    spec.validate(shape)?;
    let fill = S::from_f64_lossy(spec.raw_fill(norm));
    let (h, w) = (shape[1], shape[2]);
    let mut out = window.clone();
    let r = spec.rect;
    for m in spec.month_list(shape[0]) {
        let frame = &mut out.data_mut()[m * h * w..(m + 1) * h * w];
        for row in r.row0..r.row1 {
            frame[row * w + r.col0..row * w + r.col1].fill(fill);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationStats {
    /// Largest `|diff|` over pixels whose receptive field meets the rectangle.
    pub max_abs_inside: f64,
    /// Largest `|diff|` everywhere else.
    pub max_abs_outside: f64,
    pub masked_max_abs_inside: Option<f64>,
    pub masked_max_abs_outside: Option<f64>,
    pub inside_pixels: usize,
    pub nonzero_pixels: usize,
    pub rect: Rect,
    /// Selected frames as offsets `−months..=−1`.
    pub months: Vec<i64>,
    pub fill: f64,
    pub standardized: bool,
}

#[derive(Clone, Debug)]
pub struct AblationResult<S> {
    /// `forward(window) − forward(ablated)`, un-masked, `1×H×W`.
    pub diff: Tensor<S>,
    pub masked_diff: Option<Tensor<S>>,
    /// Output pixels whose receptive field meets the rectangle.
    pub inside: Vec<bool>,
    pub stats: AblationStats,
}

fn max_abs_split<S: Scalar>(t: &Tensor<S>, inside: &[bool]) -> (f64, f64) {
    let (mut a, mut b) = (0.0f64, 0.0f64);
    for (v, &i) in t.data().iter().zip(inside) {
        let x = v.as_f64().abs();
        if i {
            a = a.max(x);
        } else {
            b = b.max(x);
        }
    }
    (a, b)
}

/// Output pixels that can see the rectangle.
pub fn rect_expansion(rf: &ReceptiveFieldMap, rect: Rect) -> Vec<bool> {
    let (h, w) = (rf.rows.len(), rf.cols.len());
    (0..h * w)
        .map(|i| rf.sees_rect(i / w, i % w, (rect.row0, rect.col0, rect.row1, rect.col1)))
        .collect()
}

pub fn ablation_diff<S: Scalar>(
    model: &ModelParams<S>,
    window: &Tensor<S>,
    spec: &AblationSpec,
    mask: Option<&LandMask>,
) -> Result<AblationResult<S>> {
    let ablated = ablate(window, spec, model.norm_stats())?;
    let a = model.forward(window)?;
    let b = model.forward(&ablated)?;
    let diff = a.sub(&b)?;
    let rf = ReceptiveFieldMap::new(model.arch())?;
    let inside = rect_expansion(&rf, spec.rect);
    let (max_in, max_out) = max_abs_split(&diff, &inside);
    let masked_diff = mask.map(|m| apply_mask(&diff, m)).transpose()?;
    let masked = masked_diff.as_ref().map(|d| max_abs_split(d, &inside));
    let months = window.shape()[0];
    let stats = AblationStats {
        max_abs_inside: max_in,
        max_abs_outside: max_out,
        masked_max_abs_inside: masked.map(|m| m.0),
        masked_max_abs_outside: masked.map(|m| m.1),
        inside_pixels: inside.iter().filter(|&&i| i).count(),
        nonzero_pixels: diff.data().iter().filter(|v| **v != S::zero()).count(),
        rect: spec.rect,
        months: spec
            .month_list(months)
            .into_iter()
            .map(|m| m as i64 - months as i64)
            .collect(),
        fill: spec.fill,
        standardized: spec.standardized,
    };
    Ok(AblationResult {
        diff,
        masked_diff,
        inside,
        stats,
    })
}

impl<S: Scalar> AblationResult<S> {
    /// Write `diff.fsr`, `diff_masked.fsr` (when masked) and `stats.json`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_series(
            &FieldSeries::from_tensor(&self.diff, None)?.with_name("ablation diff"),
            dir.join("diff.fsr"),
        )?;
        if let Some(m) = &self.masked_diff {
            write_series(
                &FieldSeries::from_tensor(m, None)?.with_name("ablation diff (masked)"),
                dir.join("diff_masked.fsr"),
            )?;
        }
        fs::write(
            dir.join("stats.json"),
            serde_json::to_vec_pretty(&self.stats)?,
        )?;
        Ok(())
    }
}
