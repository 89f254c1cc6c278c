//! Sorted distinct-label structure over a training set.
//!
//! All vicinity math runs on normalized labels in `[0, 1]`. Labels are
//! snapped to a `1e-12` grid so that duplicate detection and distance ties
//! are exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resolution of the label grid used for exact comparisons.
pub const LABEL_GRID: f64 = 1e-12;
const GRID_STEPS: f64 = 1e12;

/// Snaps a normalized label to the integer grid used for comparisons.
#[inline]
pub fn grid_key(y: f64) -> i64 {
    (y * GRID_STEPS).round() as i64
}

/// Rounds a normalized label onto the comparison grid.
#[inline]
pub fn snap(y: f64) -> f64 {
    grid_key(y) as f64 / GRID_STEPS
}

/// Affine map between raw label units and the normalized `[0, 1]` range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScale {
    pub raw_min: f64,
    pub raw_max: f64,
}

impl LabelScale {
    pub fn new(raw_min: f64, raw_max: f64) -> Result<Self> {
        if !(raw_min.is_finite() && raw_max.is_finite() && raw_min < raw_max) {
            return Err(Error::InvalidParameter(format!(
                "label range [{raw_min}, {raw_max}] must satisfy min < max"
            )));
        }
        Ok(Self { raw_min, raw_max })
    }

    pub fn unit() -> Self {
        Self {
            raw_min: 0.0,
            raw_max: 1.0,
        }
    }

    pub fn span(&self) -> f64 {
        self.raw_max - self.raw_min
    }

    pub fn normalize(&self, raw: f64) -> Result<f64> {
        if !(raw >= self.raw_min && raw <= self.raw_max) {
            return Err(Error::OutOfRange {
                label: raw,
                min: self.raw_min,
                max: self.raw_max,
            });
        }
        Ok(snap((raw - self.raw_min) / self.span()))
    }

    pub fn to_raw(&self, y: f64) -> f64 {
        self.raw_min + y * self.span()
    }
}

/// Distinct normalized labels with per-label counts and prefix sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelIndex {
    distinct: Vec<f64>,
    counts: Vec<usize>,
    prefix: Vec<usize>,
    scale: LabelScale,
}

/// Global hyperparameters derived from the label distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalHyperparams {
    pub sigma: f64,
    pub kappa_base: f64,
}

/// Output of [`LabelIndex::nav_heuristic`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavSuggestion {
    /// Mean of adjacent-pair count sums.
    pub mean_pair_count: f64,
    /// `round(mean_pair_count)`; callers are expected to adjust it by hand.
    pub suggested: usize,
}

impl LabelIndex {
    /// Builds an index from raw labels, normalizing them with `[raw_min, raw_max]`.
    pub fn build(labels: &[f64], raw_min: f64, raw_max: f64) -> Result<Self> {
        let scale = LabelScale::new(raw_min, raw_max)?;
        let normalized = labels
            .iter()
            .map(|&y| scale.normalize(y))
            .collect::<Result<Vec<_>>>()?;
        Self::from_normalized(&normalized, scale)
    }

    /// Builds an index from labels that are already normalized to `[0, 1]`.
    pub fn from_normalized(labels: &[f64], scale: LabelScale) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut keys = Vec::with_capacity(labels.len());
        for &y in labels {
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::OutOfRange {
                    label: y,
                    min: 0.0,
                    max: 1.0,
                });
            }
            keys.push(grid_key(y));
        }
        keys.sort_unstable();

        let mut distinct = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        let mut last = None;
        for k in keys {
            if last == Some(k) {
                *counts.last_mut().unwrap() += 1;
            } else {
                distinct.push(k as f64 / GRID_STEPS);
                counts.push(1);
                last = Some(k);
            }
        }
        let prefix = counts
            .iter()
            .scan(0usize, |acc, &c| {
                *acc += c;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            distinct,
            counts,
            prefix,
            scale,
        })
    }

    pub fn distinct_labels(&self) -> &[f64] {
        &self.distinct
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn prefix_counts(&self) -> &[usize] {
        &self.prefix
    }

    pub fn total(&self) -> usize {
        *self.prefix.last().unwrap_or(&0)
    }

    pub fn len(&self) -> usize {
        self.distinct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distinct.is_empty()
    }

    pub fn scale(&self) -> LabelScale {
        self.scale
    }

    /// Position of `y` among the distinct labels: `Ok(i)` on an exact grid
    /// match, `Err(i)` for the insertion point otherwise.
    pub fn locate(&self, y: f64) -> std::result::Result<usize, usize> {
        let key = grid_key(y);
        self.distinct.binary_search_by(|d| grid_key(*d).cmp(&key))
    }

    /// Number of samples whose label lies in the closed interval `[lo, hi]`.
    pub fn count_in(&self, lo: f64, hi: f64) -> usize {
        let start = self.distinct.partition_point(|&d| d < lo);
        let end = self.distinct.partition_point(|&d| d <= hi);
        if end <= start {
            return 0;
        }
        let before = if start == 0 { 0 } else { self.prefix[start - 1] };
        self.prefix[end - 1] - before
    }

    /// Expands the index back into one label per sample, sorted.
    pub fn expand(&self) -> Vec<f64> {
        self.distinct
            .iter()
            .zip(&self.counts)
            .flat_map(|(&y, &c)| std::iter::repeat_n(y, c))
            .collect()
    }

    fn require_two(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::InsufficientLabels {
                needed: 2,
                found: self.len(),
            });
        }
        Ok(())
    }

    /// Mean count of each distinct label plus its right neighbour.
    pub fn nav_heuristic(&self) -> Result<NavSuggestion> {
        self.require_two()?;
        let pairs = self.counts.windows(2).map(|w| (w[0] + w[1]) as f64);
        let mean = pairs.sum::<f64>() / (self.len() - 1) as f64;
        Ok(NavSuggestion {
            mean_pair_count: mean,
            suggested: mean.round() as usize,
        })
    }

    /// Stand-in bandwidth rule: `sigma = std(labels) * N^(-1/5)`,
    /// `kappa_base` = widest gap between adjacent distinct labels.
    pub fn rule_of_thumb(&self) -> Result<GlobalHyperparams> {
        self.require_two()?;
        let n = self.total() as f64;
        let mean = self
            .distinct
            .iter()
            .zip(&self.counts)
            .map(|(&y, &c)| y * c as f64)
            .sum::<f64>()
            / n;
        let var = self
            .distinct
            .iter()
            .zip(&self.counts)
            .map(|(&y, &c)| c as f64 * (y - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        let sigma = var.sqrt() * n.powf(-0.2);
        let kappa_base = self
            .distinct
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max);
        Ok(GlobalHyperparams { sigma, kappa_base })
    }
}
