//! Small deterministic reductions shared by training and aggregation.

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Streaming pairwise summation of equal-length vectors.
///
/// Partial sums are combined like a binary counter, so the reduction tree
/// depends only on the number of pushed items and their order.
#[derive(Clone, Debug, Default)]
pub struct PairwiseSum {
    partials: Vec<(u32, Vec<f64>)>,
    count: usize,
}

impl PairwiseSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, item: Vec<f64>) {
        self.count += 1;
        let mut cur = (0u32, item);
        while let Some((level, _)) = self.partials.last() {
            if *level != cur.0 {
                break;
            }
            let (level, mut prev) = self.partials.pop().expect("checked");
            for (p, v) in prev.iter_mut().zip(&cur.1) {
                *p += *v;
            }
            cur = (level + 1, prev);
        }
        self.partials.push(cur);
    }

    /// Total of everything pushed, folding the smallest partials first.
    pub fn total(&self) -> Option<Vec<f64>> {
        let mut iter = self.partials.iter().rev();
        let (_, first) = iter.next()?;
        let mut acc = first.clone();
        for (_, p) in iter {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += *v;
            }
        }
        Some(acc)
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        let n = self.count as f64;
        self.total().map(|t| t.into_iter().map(|v| v / n).collect())
    }
}

/// Pairwise sum of a slice.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}
