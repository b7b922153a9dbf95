//! Aggregation rules over message gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorSpec {
    Averaging,
    /// Averages the `m = n - ceil(f n) - 2` vectors with the smallest
    /// sum of squared distances to their `m` nearest neighbours.
    MultiKrum { f: f64 },
}

impl AggregatorSpec {
    pub fn validate(&self) -> Result<()> {
        if let AggregatorSpec::MultiKrum { f } = *self {
            if !(f > 0.0 && f < 0.5) {
                return Err(Error::config(format!("multikrum f must lie in (0, 0.5), got {f}")));
            }
        }
        Ok(())
    }

    /// Number of vectors MultiKrum keeps out of `n`.
    pub fn krum_count(n: usize, f: f64) -> Result<usize> {
        let drop = (f * n as f64).ceil() as usize + 2;
        if n <= drop {
            return Err(Error::KrumTooFewVectors { n, f });
        }
        Ok(n - drop)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationResult {
    pub aggregate: GradientVector,
    /// Ascending indices of the inputs that were averaged.
    pub selected: Vec<usize>,
}

pub fn aggregate(spec: &AggregatorSpec, vectors: &[GradientVector]) -> Result<AggregationResult> {
    let first = vectors.first().ok_or_else(|| Error::config("aggregation of zero vectors"))?;
    if let Some(v) = vectors.iter().find(|v| v.dim() != first.dim()) {
        return Err(Error::DimMismatch {
            expected: first.dim(),
            actual: v.dim(),
        });
    }
    let selected = match *spec {
        AggregatorSpec::Averaging => (0..vectors.len()).collect(),
        AggregatorSpec::MultiKrum { f } => {
            let m = AggregatorSpec::krum_count(vectors.len(), f)?;
            krum_select(vectors, m)
        }
    };
    let aggregate = GradientVector::mean(selected.iter().map(|&i| &vectors[i]))?;
    Ok(AggregationResult { aggregate, selected })
}

/// Squared distances, `d[i][j]` for all pairs; each entry is accumulated
/// coordinate by coordinate for the index pair `(min(i,j), max(i,j))`.
fn distance_matrix(vectors: &[GradientVector]) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let upper: Vec<Vec<f64>> = par::map_range(n, |i| {
        (i + 1..n)
            .map(|j| vectors[i].dist_sq(&vectors[j]).expect("dims checked"))
            .collect()
    });
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for (k, &v) in upper[i].iter().enumerate() {
            let j = i + 1 + k;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

fn krum_select(vectors: &[GradientVector], m: usize) -> Vec<usize> {
    let n = vectors.len();
    let d = distance_matrix(vectors);
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (d[i][j], j)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.iter().take(m).map(|p| p.0).sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(m).collect();
    chosen.sort_unstable();
    chosen
}

/// Fraction of submitted poison messages that the aggregator kept,
/// averaged over steps.
#[derive(Clone, Debug, Default)]
pub struct SelectionTracker {
    rate_sum: f64,
    steps: usize,
}

impl SelectionTracker {
    pub fn record(&mut self, result: &AggregationResult, poison: &[usize]) {
        if poison.is_empty() {
            return;
        }
        let kept = poison.iter().filter(|p| result.selected.binary_search(p).is_ok()).count();
        self.rate_sum += kept as f64 / poison.len() as f64;
        self.steps += 1;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `None` when no poison was ever submitted.
    pub fn rate(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.rate_sum / self.steps as f64)
    }
}

pub fn selection_rate(results: &[AggregationResult], poison_per_step: &[Vec<usize>]) -> Option<f64> {
    let mut t = SelectionTracker::default();
    for (r, p) in results.iter().zip(poison_per_step) {
        t.record(r, p);
    }
    t.rate()
}
