//! Pixel-level precision-recall evaluation.
//!
//! Pixels of every image in a category are pooled, sorted by score and swept
//! over every distinct score value. Pixels sharing a score cross a threshold
//! together, so results depend only on the multiset of (score, label) pairs.

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::types::{BinaryMask, ScoreMap};

/// Flat pool of scored, labelled pixels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelPool {
    scores: Vec<f32>,
    labels: Vec<bool>,
    positives: usize,
}

impl PixelPool {
    pub fn new(scores: Vec<f32>, labels: Vec<bool>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::DimensionMismatch {
                score: (scores.len() as u32, 1),
                truth: (labels.len() as u32, 1),
            });
        }
        let positives = labels.iter().filter(|&&l| l).count();
        Ok(Self {
            scores,
            labels,
            positives,
        })
    }

    /// Pool holding one image's pixels in row-major order.
    pub fn from_pair(map: &ScoreMap, truth: &BinaryMask) -> Result<Self, MetricsError> {
        if (map.width(), map.height()) != (truth.width(), truth.height()) {
            return Err(MetricsError::DimensionMismatch {
                score: (map.width(), map.height()),
                truth: (truth.width(), truth.height()),
            });
        }
        let labels: Vec<bool> = truth.iter().collect();
        let positives = truth.count_ones();
        Ok(Self {
            scores: map.values().to_vec(),
            labels,
            positives,
        })
    }

    /// Appends `other`. Metrics are order-independent, so merging partial
    /// pools in any grouping gives the same results.
    pub fn merge(mut self, other: PixelPool) -> PixelPool {
        self.scores.extend(other.scores);
        self.labels.extend(other.labels);
        self.positives += other.positives;
        self
    }

    pub fn total(&self) -> usize {
        self.scores.len()
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }
}

/// Concatenates all pixels of all pairs, image order then row-major.
pub fn pool_pixels(pairs: &[(ScoreMap, BinaryMask)]) -> Result<PixelPool, MetricsError> {
    let parts = crate::par::map_collect(pairs, |(map, truth)| PixelPool::from_pair(map, truth));
    parts
        .into_iter()
        .try_fold(PixelPool::default(), |acc, part| Ok(acc.merge(part?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall points at every distinct score, highest threshold first.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub positives: usize,
    pub total: usize,
}

impl PrCurve {
    fn from_counts(
        counts: impl IntoIterator<Item = (f64, u64, u64)>,
        positives: usize,
        total: usize,
    ) -> Self {
        let pos = positives as f64;
        let points = counts
            .into_iter()
            .map(|(threshold, tp, fp)| PrPoint {
                threshold,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / pos,
            })
            .collect();
        Self {
            points,
            positives,
            total,
        }
    }

    /// Exact sweep over every distinct score.
    pub fn exact(pool: &PixelPool) -> Result<Self, MetricsError> {
        let mut pairs = sorted_pairs(pool)?;
        crate::par::sort_unstable_by(&mut pairs, |a, b| b.0.total_cmp(&a.0));
        Ok(Self::sweep(&pairs, pool))
    }

    /// [`PrCurve::exact`] without rayon, for benchmarking.
    pub fn exact_sequential(pool: &PixelPool) -> Result<Self, MetricsError> {
        let mut pairs = sorted_pairs(pool)?;
        pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        Ok(Self::sweep(&pairs, pool))
    }

    fn sweep(sorted: &[(f32, bool)], pool: &PixelPool) -> Self {
        let mut counts = Vec::new();
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut i = 0;
        while i < sorted.len() {
            let score = sorted[i].0;
            while i < sorted.len() && sorted[i].0 == score {
                if sorted[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            counts.push((f64::from(score), tp, fp));
        }
        Self::from_counts(counts, pool.positives, pool.total())
    }

    /// Histogram sweep over `bins` equal-width score bins in `[0, 1]`;
    /// thresholds are the lower bin edges. Approximate, O(N + bins).
    pub fn binned(pool: &PixelPool, bins: usize) -> Result<Self, MetricsError> {
        let mut acc = BinnedAccumulator::new(bins);
        acc.add(pool);
        acc.curve()
    }

    pub fn average_precision(&self) -> f64 {
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for p in &self.points {
            ap += (p.recall - prev_recall) * p.precision;
            prev_recall = p.recall;
        }
        ap
    }

    pub fn f1_max(&self) -> f64 {
        self.points
            .iter()
            .map(|p| {
                let denom = p.precision + p.recall;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * p.precision * p.recall / denom
                }
            })
            .fold(0.0, f64::max)
    }
}

fn sorted_pairs(pool: &PixelPool) -> Result<Vec<(f32, bool)>, MetricsError> {
    if pool.positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    Ok(pool
        .scores
        .iter()
        .copied()
        .zip(pool.labels.iter().copied())
        .collect())
}

/// Mergeable per-bin positive/negative counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedAccumulator {
    positives: Vec<u64>,
    negatives: Vec<u64>,
}

impl BinnedAccumulator {
    pub fn new(bins: usize) -> Self {
        assert!(bins > 0, "at least one bin");
        Self {
            positives: vec![0; bins],
            negatives: vec![0; bins],
        }
    }

    fn bin(&self, score: f32) -> usize {
        let bins = self.positives.len();
        ((f64::from(score) * bins as f64) as usize).min(bins - 1)
    }

    pub fn add(&mut self, pool: &PixelPool) {
        for (&s, &l) in pool.scores.iter().zip(&pool.labels) {
            let b = self.bin(s);
            if l {
                self.positives[b] += 1;
            } else {
                self.negatives[b] += 1;
            }
        }
    }

    /// Associative and commutative.
    pub fn merge(mut self, other: &BinnedAccumulator) -> Self {
        assert_eq!(self.positives.len(), other.positives.len(), "bin count");
        for (a, b) in self.positives.iter_mut().zip(&other.positives) {
            *a += b;
        }
        for (a, b) in self.negatives.iter_mut().zip(&other.negatives) {
            *a += b;
        }
        self
    }

    pub fn curve(&self) -> Result<PrCurve, MetricsError> {
        let positives: u64 = self.positives.iter().sum();
        let negatives: u64 = self.negatives.iter().sum();
        if positives == 0 {
            return Err(MetricsError::NoPositives);
        }
        let bins = self.positives.len();
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut counts = Vec::new();
        for b in (0..bins).rev() {
            if self.positives[b] + self.negatives[b] == 0 {
                continue;
            }
            tp += self.positives[b];
            fp += self.negatives[b];
            counts.push((b as f64 / bins as f64, tp, fp));
        }
        Ok(PrCurve::from_counts(
            counts,
            positives as usize,
            (positives + negatives) as usize,
        ))
    }
}

pub fn average_precision(pool: &PixelPool) -> Result<f64, MetricsError> {
    Ok(PrCurve::exact(pool)?.average_precision())
}

pub fn f1_max(pool: &PixelPool) -> Result<f64, MetricsError> {
    Ok(PrCurve::exact(pool)?.f1_max())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricMode {
    #[default]
    Exact,
    Binned(usize),
}

pub const DEFAULT_BINS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap: f64,
    pub f1_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr_points: Option<Vec<PrPoint>>,
    pub pixels_evaluated: u64,
    pub positives: u64,
}

pub fn report_from_curve(curve: &PrCurve, keep_points: bool) -> MetricReport {
    MetricReport {
        ap: curve.average_precision().clamp(0.0, 1.0),
        f1_max: curve.f1_max().clamp(0.0, 1.0),
        pr_points: keep_points.then(|| curve.points.clone()),
        pixels_evaluated: curve.total as u64,
        positives: curve.positives as u64,
    }
}

/// Pools every pair and computes AP and F1-max.
pub fn evaluate_category(
    pairs: &[(ScoreMap, BinaryMask)],
    mode: MetricMode,
) -> Result<MetricReport, MetricsError> {
    let pool = pool_pixels(pairs)?;
    let curve = match mode {
        MetricMode::Exact => PrCurve::exact(&pool)?,
        MetricMode::Binned(bins) => PrCurve::binned(&pool, bins)?,
    };
    Ok(report_from_curve(&curve, false))
}

/// Unweighted mean over categories.
pub fn evaluate_dataset(reports: &[MetricReport]) -> Result<MetricReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = reports.len() as f64;
    Ok(MetricReport {
        ap: reports.iter().map(|r| r.ap).sum::<f64>() / n,
        f1_max: reports.iter().map(|r| r.f1_max).sum::<f64>() / n,
        pr_points: None,
        pixels_evaluated: reports.iter().map(|r| r.pixels_evaluated).sum(),
        positives: reports.iter().map(|r| r.positives).sum(),
    })
}
