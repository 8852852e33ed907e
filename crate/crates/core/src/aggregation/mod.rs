//! Monthly contribution series, dataset-level mean heatmaps, and
//! cross-location / cross-lead comparisons.

mod report;

pub use report::{report_dir_name, GroupReport, ReportMeta};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    explain_targets, BaselineSpec, Explainable, Heatmap, Method, PixelTarget,
};
use crate::emulator::apply_mask;
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::stats::{pearson, PairwiseSum};
use crate::tensor::Tensor;
use crate::trainer::SampleSet;

/// Per-month sums of a heatmap, oldest month first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contributions {
    pub positive: Vec<f64>,
    /// Magnitudes of the negative part.
    pub negative: Vec<f64>,
    pub total: Vec<f64>,
}

impl Contributions {
    pub fn of<S: Scalar>(h: &Tensor<S>) -> Self {
        let (pos, neg) = split_pos_neg(h);
        Contributions {
            positive: monthly_contribution(&pos),
            negative: monthly_contribution(&neg),
            total: monthly_contribution(h),
        }
    }

    pub fn months(&self) -> usize {
        self.total.len()
    }

    /// Month offsets `−months..=−1` matching the series entries.
    pub fn month_indices(&self) -> Vec<i64> {
        let m = self.months() as i64;
        (-m..0).collect()
    }
}

/// `c_m = Σ_pixels |h_m|` for a `months×H×W` map.
pub fn monthly_contribution<S: Scalar>(h: &Tensor<S>) -> Vec<f64> {
    let months = h.shape()[0];
    let plane = h.len() / months.max(1);
    h.data()
        .chunks_exact(plane.max(1))
        .take(months)
        .map(|frame| {
            let abs: Vec<f64> = frame.iter().map(|v| v.as_f64().abs()).collect();
            crate::stats::pairwise_sum(&abs)
        })
        .collect()
}

/// `(max(h, 0), max(−h, 0))`.
pub fn split_pos_neg<S: Scalar>(h: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let zero = S::zero();
    (
        h.map(|v| if v > zero { v } else { zero }),
        h.map(|v| if v < zero { -v } else { zero }),
    )
}

/// Share of total contribution coming from months `≤ −2`.
pub fn tail_mass(series: &[f64]) -> Option<f64> {
    let total: f64 = series.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let tail: f64 = series[..series.len().saturating_sub(1)].iter().sum();
    Some(tail / total)
}

/// Shannon entropy (natural log) of the L1-normalized series.
pub fn series_entropy(series: &[f64]) -> Option<f64> {
    let total: f64 = series.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    Some(
        -series
            .iter()
            .map(|&c| c / total)
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>(),
    )
}

fn l1_normalized(series: &[f64]) -> Vec<f64> {
    let total: f64 = series.iter().sum();
    if total > 0.0 {
        series.iter().map(|v| v / total).collect()
    } else {
        series.to_vec()
    }
}

/// Worker count: `PROBE_THREADS` when set to a positive integer, else rayon's default.
pub fn probe_threads() -> usize {
    std::env::var("PROBE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Run `f` on a pool capped by [`probe_threads`].
pub fn with_probe_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    with_pool(probe_threads(), f)
}

/// Run `f` on a dedicated pool of `threads` workers.
pub fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Eval-mode `N×1×H×W` output for a batch of windows.
pub fn predict<S: Scalar>(model: &impl Explainable<S>, windows: Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let x = g.input(windows, false);
    let out = model.record(&mut g, x)?;
    Ok(g.value(out).clone())
}

/// Attribution settings shared by every sample of a group.
#[derive(Clone, Debug)]
pub struct GroupRequest<S> {
    pub targets: Vec<PixelTarget>,
    pub method: Method,
    pub baseline: BaselineSpec<S>,
    pub lead: usize,
}

struct SampleOutcome {
    maps: Vec<(Vec<f64>, Vec<f64>)>,
    input: Vec<f64>,
    target: Vec<f64>,
    output: Vec<f64>,
    error: Vec<f64>,
}

fn process_sample<S: Scalar + Send + Sync, M: Explainable<S> + Sync>(
    model: &M,
    set: &SampleSet<'_>,
    idx: usize,
    req: &GroupRequest<S>,
) -> Result<SampleOutcome> {
    let w = &set.windows[idx];
    let x = w.input::<S>(set.series)?;
    let y = w.target::<S>(set.series)?;
    let maps: Vec<Heatmap<S>> =
        explain_targets(model, &x, &req.targets, req.method, &req.baseline)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let pred = predict(model, x.clone().reshape(shape)?)?;
    let (h, wd) = (y.shape()[1], y.shape()[2]);
    let pred = apply_mask(&pred.reshape(vec![1, h, wd])?, set.mask)?;
    let err = apply_mask(&pred.sub(&y)?, set.mask)?;
    let f = |t: &Tensor<S>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    Ok(SampleOutcome {
        maps: maps
            .iter()
            .map(|m| {
                let (p, n) = split_pos_neg(&m.values);
                (f(&p), f(&n))
            })
            .collect(),
        input: f(&x),
        target: f(&y),
        output: f(&pred),
        error: f(&err),
    })
}

/// Mean positive/negative heatmaps and panels over `set`, one report per target.
///
/// Samples are attributed in parallel; results are reduced in sample order
/// with a fixed pairwise tree, so the report does not depend on thread count.
pub fn aggregate_groups<S, M>(
    model: &M,
    set: &SampleSet<'_>,
    req: &GroupRequest<S>,
) -> Result<Vec<GroupReport>>
where
    S: Scalar + Send + Sync,
    M: Explainable<S> + Sync,
{
    aggregate_groups_with_threads(model, set, req, probe_threads())
}

/// [`aggregate_groups`] on an explicit worker count instead of `PROBE_THREADS`.
pub fn aggregate_groups_with_threads<S, M>(
    model: &M,
    set: &SampleSet<'_>,
    req: &GroupRequest<S>,
    threads: usize,
) -> Result<Vec<GroupReport>>
where
    S: Scalar + Send + Sync,
    M: Explainable<S> + Sync,
{
    if set.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if req.targets.is_empty() {
        return Err(CoreError::invalid("no aggregation targets"));
    }
    let [months, h, w] = model.window_shape();
    let nt = req.targets.len();
    let mut pos: Vec<PairwiseSum> = (0..nt).map(|_| PairwiseSum::new()).collect();
    let mut neg: Vec<PairwiseSum> = (0..nt).map(|_| PairwiseSum::new()).collect();
    let (mut input, mut target, mut output, mut error) = (
        PairwiseSum::new(),
        PairwiseSum::new(),
        PairwiseSum::new(),
        PairwiseSum::new(),
    );
    let chunk = 4 * threads.max(1);
    let idx: Vec<usize> = (0..set.len()).collect();
    with_pool(threads, || -> Result<()> {
        for part in idx.chunks(chunk) {
            let outcomes: Vec<SampleOutcome> = part
                .par_iter()
                .map(|&i| process_sample(model, set, i, req))
                .collect::<Result<_>>()?;
            for o in outcomes {
                for (t, (p, n)) in o.maps.into_iter().enumerate() {
                    pos[t].push(p);
                    neg[t].push(n);
                }
                input.push(o.input);
                target.push(o.target);
                output.push(o.output);
                error.push(o.error);
            }
        }
        Ok(())
    })?;
    let tensor =
        |acc: &PairwiseSum, shape: Vec<usize>| Tensor::new(shape, acc.mean().expect("non-empty"));
    let panels = [
        tensor(&input, vec![months, h, w])?,
        tensor(&target, vec![1, h, w])?,
        tensor(&output, vec![1, h, w])?,
        tensor(&error, vec![1, h, w])?,
    ];
    req.targets
        .iter()
        .enumerate()
        .map(|(t, &pt)| {
            let mean_pos = tensor(&pos[t], vec![months, h, w])?;
            let mean_neg = tensor(&neg[t], vec![months, h, w])?;
            let positive = monthly_contribution(&mean_pos);
            let negative = monthly_contribution(&mean_neg);
            let total = positive.iter().zip(&negative).map(|(a, b)| a + b).collect();
            Ok(GroupReport {
                target: PixelTarget {
                    lead: req.lead,
                    ..pt
                },
                method: req.method,
                lead: req.lead,
                n: set.len(),
                mean_pos,
                mean_neg,
                series: Contributions {
                    positive,
                    negative,
                    total,
                },
                mean_input: panels[0].clone(),
                mean_target: panels[1].clone(),
                mean_output: panels[2].clone(),
                mean_error: panels[3].clone(),
            })
        })
        .collect()
}

pub fn aggregate_group<S, M>(
    model: &M,
    set: &SampleSet<'_>,
    target: PixelTarget,
    method: Method,
    baseline: &BaselineSpec<S>,
    lead: usize,
) -> Result<GroupReport>
where
    S: Scalar + Send + Sync,
    M: Explainable<S> + Sync,
{
    let req = GroupRequest {
        targets: vec![target],
        method,
        baseline: baseline.clone(),
        lead,
    };
    Ok(aggregate_groups(model, set, &req)?.remove(0))
}

/// Pairwise Pearson correlations of L1-normalized total series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub targets: Vec<PixelTarget>,
    /// `None` where a series has zero variance.
    pub matrix: Vec<Vec<Option<f64>>>,
}

impl SimilarityMatrix {
    /// Off-diagonal entries, upper triangle.
    pub fn pairs(&self) -> Vec<Option<f64>> {
        let n = self.targets.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.matrix[i][j])
            .collect()
    }

    /// Median of the defined off-diagonal correlations.
    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.pairs().into_iter().flatten().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let k = v.len();
        Some(if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        })
    }
}

pub fn series_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&l1_normalized(a), &l1_normalized(b))
}

pub fn compare_locations(reports: &[GroupReport]) -> Result<SimilarityMatrix> {
    if reports.len() < 2 {
        return Err(CoreError::invalid(
            "location comparison needs at least two reports",
        ));
    }
    let (m0, l0) = (reports[0].method, reports[0].lead);
    if reports.iter().any(|r| r.method != m0 || r.lead != l0) {
        return Err(CoreError::invalid("reports differ in method or lead"));
    }
    let matrix = reports
        .iter()
        .map(|a| {
            reports
                .iter()
                .map(|b| series_similarity(&a.series.total, &b.series.total))
                .collect()
        })
        .collect();
    Ok(SimilarityMatrix {
        targets: reports.iter().map(|r| r.target).collect(),
        matrix,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadSpread {
    pub lead: usize,
    pub tail_mass: Option<f64>,
    pub entropy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadComparison {
    /// Sorted by lead.
    pub leads: Vec<LeadSpread>,
    /// Successive differences of tail mass.
    pub tail_deltas: Vec<Option<f64>>,
    pub entropy_deltas: Vec<Option<f64>>,
    /// False when tail mass decreases from one lead to the next.
    pub tail_nondecreasing: bool,
}

pub fn compare_leadtimes(reports: &[GroupReport]) -> Result<LeadComparison> {
    if reports.is_empty() {
        return Err(CoreError::invalid(
            "lead comparison needs at least one report",
        ));
    }
    let r0 = &reports[0];
    if reports.iter().any(|r| {
        r.method != r0.method || (r.target.row, r.target.col) != (r0.target.row, r0.target.col)
    }) {
        return Err(CoreError::invalid("reports differ in target or method"));
    }
    let mut leads: Vec<LeadSpread> = reports
        .iter()
        .map(|r| LeadSpread {
            lead: r.lead,
            tail_mass: tail_mass(&r.series.total),
            entropy: series_entropy(&r.series.total),
        })
        .collect();
    leads.sort_by_key(|l| l.lead);
    let delta = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| b - a);
    let tail_deltas: Vec<Option<f64>> = leads
        .windows(2)
        .map(|p| delta(p[0].tail_mass, p[1].tail_mass))
        .collect();
    let entropy_deltas = leads
        .windows(2)
        .map(|p| delta(p[0].entropy, p[1].entropy))
        .collect();
    let tail_nondecreasing = tail_deltas.iter().all(|d| d.is_some_and(|d| d >= 0.0));
    Ok(LeadComparison {
        leads,
        tail_deltas,
        entropy_deltas,
        tail_nondecreasing,
    })
}

/// Fraction of `Σ|h|` within Euclidean distance `radius` of `(row, col)`, over all months.
pub fn mass_within_radius(map: &Tensor<f64>, row: usize, col: usize, radius: f64) -> Option<f64> {
    let [_, h, w] = <[usize; 3]>::try_from(map.shape()).ok()?;
    let (mut inside, mut total) = (0.0, 0.0);
    for (i, v) in map.data().iter().enumerate() {
        let (r, c) = ((i / w) % h, i % w);
        let d2 = (r as f64 - row as f64).powi(2) + (c as f64 - col as f64).powi(2);
        let a = v.abs();
        total += a;
        if d2 <= radius * radius {
            inside += a;
        }
    }
    (total > 0.0).then(|| inside / total)
}
