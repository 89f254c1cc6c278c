//! Hard, soft, soft-adaptive and hybrid-adaptive vicinities.
//!
//! The adaptive construction grows an interval around a conditional label
//! `y_c`, always incorporating the nearer unvisited distinct label (both when
//! they are equidistant), until the enclosed sample count reaches `n_av`.
//! The resulting radius sets the exponential decay rate of the soft weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_index::{grid_key, LabelIndex};

/// Default cut-off below which soft weights are discarded.
pub const DEFAULT_WEIGHT_THRESHOLD: f64 = 1e-3;

/// Exponent `p` in `nu = 1 / kappa^p`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum DecayExponent {
    Linear,
    #[default]
    Quadratic,
}

impl DecayExponent {
    pub fn decay_rate(self, kappa: f64) -> f64 {
        match self {
            DecayExponent::Linear => 1.0 / kappa,
            DecayExponent::Quadratic => 1.0 / (kappa * kappa),
        }
    }
}

impl TryFrom<u8> for DecayExponent {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(DecayExponent::Linear),
            2 => Ok(DecayExponent::Quadratic),
            other => Err(format!("decay_exponent must be 1 or 2, got {other}")),
        }
    }
}

impl From<DecayExponent> for u8 {
    fn from(e: DecayExponent) -> u8 {
        match e {
            DecayExponent::Linear => 1,
            DecayExponent::Quadratic => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VicinityParams {
    pub kappa_left: f64,
    pub kappa_right: f64,
    pub kappa: f64,
    pub nu: f64,
    pub n_c: usize,
    /// Samples added by the final extension step (0 for fixed vicinities).
    pub last_increment: usize,
    /// The conditional label sat exactly on a distinct label and its count
    /// seeded `n_c` before any extension.
    pub seeded: bool,
}

/// Builds the adaptive vicinity for `y_c` with `nu = 1 / kappa^2`.
pub fn build_adaptive(index: &LabelIndex, y_c: f64, n_av: usize) -> Result<VicinityParams> {
    build_adaptive_with(index, y_c, n_av, DecayExponent::Quadratic)
}

pub fn build_adaptive_with(
    index: &LabelIndex,
    y_c: f64,
    n_av: usize,
    exponent: DecayExponent,
) -> Result<VicinityParams> {
    if n_av == 0 {
        return Err(Error::InvalidParameter("n_av must be at least 1".into()));
    }
    if n_av > index.total() {
        return Err(Error::InsufficientSamples {
            requested: n_av,
            available: index.total(),
        });
    }
    if !(0.0..=1.0).contains(&y_c) {
        return Err(Error::OutOfRange {
            label: y_c,
            min: 0.0,
            max: 1.0,
        });
    }

    let labels = index.distinct_labels();
    let counts = index.counts();
    let m = labels.len();
    let key_c = grid_key(y_c);
    let dist = |i: usize| (grid_key(labels[i]) - key_c).abs();

    let (mut left, mut right, mut n_c, seeded) = match index.locate(y_c) {
        Ok(i) => (i.checked_sub(1), (i + 1 < m).then_some(i + 1), counts[i], true),
        Err(i) => (i.checked_sub(1), (i < m).then_some(i), 0, false),
    };
    let (mut kappa_left, mut kappa_right) = (0.0f64, 0.0f64);
    let mut last_increment = 0;
    let mut extended = false;

    while n_c < n_av || !extended {
        let take_left;
        let take_right;
        match (left.map(dist), right.map(dist)) {
            (None, None) => {
                return Err(Error::InsufficientLabels {
                    needed: 2,
                    found: m,
                })
            }
            (Some(_), None) => (take_left, take_right) = (true, false),
            (None, Some(_)) => (take_left, take_right) = (false, true),
            (Some(dl), Some(dr)) => (take_left, take_right) = (dl <= dr, dr <= dl),
        }
        last_increment = 0;
        if take_left {
            let l = left.unwrap();
            kappa_left = (labels[l] - y_c).abs();
            n_c += counts[l];
            last_increment += counts[l];
            left = l.checked_sub(1);
        }
        if take_right {
            let r = right.unwrap();
            kappa_right = (labels[r] - y_c).abs();
            n_c += counts[r];
            last_increment += counts[r];
            right = (r + 1 < m).then_some(r + 1);
        }
        extended = true;
    }

    let kappa = kappa_left.max(kappa_right);
    debug_assert!(kappa > 0.0);
    Ok(VicinityParams {
        kappa_left,
        kappa_right,
        kappa,
        nu: exponent.decay_rate(kappa),
        n_c,
        last_increment,
        seeded,
    })
}

/// Normalized weights over a subset of sample indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl WeightVector {
    fn from_raw(y_c: f64, raw: Vec<(usize, f64)>) -> Result<Self> {
        let total: f64 = raw.iter().map(|(_, w)| w).sum();
        if raw.is_empty() || total <= 0.0 {
            return Err(Error::EmptyVicinity { y_c });
        }
        let (indices, weights) = raw.into_iter().map(|(i, w)| (i, w / total)).unzip();
        Ok(Self { indices, weights })
    }

    /// Uniform weights over the given indices.
    pub fn uniform(indices: Vec<usize>) -> Self {
        let w = 1.0 / indices.len() as f64;
        let weights = vec![w; indices.len()];
        Self { indices, weights }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn weight_of(&self, index: usize) -> Option<f64> {
        self.indices
            .iter()
            .position(|&i| i == index)
            .map(|p| self.weights[p])
    }
}

fn check_soft_args(nu: f64, threshold: f64) -> Result<()> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::InvalidParameter(format!("nu must be positive, got {nu}")));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!(
            "threshold must lie in [0, 1), got {threshold}"
        )));
    }
    Ok(())
}

#[inline]
fn soft_kernel(y: f64, y_c: f64, nu: f64) -> f64 {
    (-nu * (y - y_c).powi(2)).exp()
}

/// Exponential-decay weights `exp(-nu (y - y_c)^2)`, thresholded and renormalized.
pub fn soft_weights(labels: &[f64], y_c: f64, nu: f64, threshold: f64) -> Result<WeightVector> {
    check_soft_args(nu, threshold)?;
    let raw = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (i, soft_kernel(y, y_c, nu)))
        .filter(|&(_, w)| w >= threshold)
        .collect();
    WeightVector::from_raw(y_c, raw)
}

/// Soft weights truncated to zero outside `[y_c - kappa, y_c + kappa]`.
pub fn hybrid_weights(
    labels: &[f64],
    y_c: f64,
    params: &VicinityParams,
    threshold: f64,
) -> Result<WeightVector> {
    check_soft_args(params.nu, threshold)?;
    let raw = labels
        .iter()
        .enumerate()
        .filter(|&(_, &y)| (y - y_c).abs() <= params.kappa)
        .map(|(i, &y)| (i, soft_kernel(y, y_c, params.nu)))
        .filter(|&(_, w)| w >= threshold)
        .collect();
    WeightVector::from_raw(y_c, raw)
}

/// Uniform weights over samples inside the closed interval `[y_c - kappa, y_c + kappa]`.
pub fn hard_weights(labels: &[f64], y_c: f64, kappa: f64) -> Result<WeightVector> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidParameter(format!("kappa must be positive, got {kappa}")));
    }
    let inside: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|&(_, &y)| (y - y_c).abs() <= kappa)
        .map(|(i, _)| i)
        .collect();
    if inside.is_empty() {
        return Err(Error::EmptyVicinity { y_c });
    }
    Ok(WeightVector::uniform(inside))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VicinityMode {
    Hard,
    Soft,
    SoftAv,
    HybridAv,
}

impl VicinityMode {
    pub fn is_adaptive(self) -> bool {
        matches!(self, VicinityMode::SoftAv | VicinityMode::HybridAv)
    }

    pub fn name(self) -> &'static str {
        match self {
            VicinityMode::Hard => "hard",
            VicinityMode::Soft => "soft",
            VicinityMode::SoftAv => "soft_av",
            VicinityMode::HybridAv => "hybrid_av",
        }
    }
}

impl std::str::FromStr for VicinityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(VicinityMode::Hard),
            "soft" => Ok(VicinityMode::Soft),
            "soft_av" => Ok(VicinityMode::SoftAv),
            "hybrid_av" => Ok(VicinityMode::HybridAv),
            other => Err(Error::InvalidMode(format!("unknown vicinity mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for VicinityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A resolved vicinity policy: which weights to use and how to size them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VicinityRule {
    pub mode: VicinityMode,
    /// Radius for the fixed (non-adaptive) modes.
    pub kappa_base: f64,
    pub n_av: usize,
    pub exponent: DecayExponent,
    pub threshold: f64,
}

impl VicinityRule {
    /// Vicinity parameters for `y_c`; fixed modes report `n_c` as the hard-interval count.
    pub fn params_for(&self, index: &LabelIndex, y_c: f64) -> Result<VicinityParams> {
        if self.mode.is_adaptive() {
            build_adaptive_with(index, y_c, self.n_av, self.exponent)
        } else {
            let kappa = self.kappa_base;
            if !(kappa > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "kappa must be positive, got {kappa}"
                )));
            }
            Ok(VicinityParams {
                kappa_left: kappa,
                kappa_right: kappa,
                kappa,
                nu: self.exponent.decay_rate(kappa),
                n_c: index.count_in(y_c - kappa, y_c + kappa),
                last_increment: 0,
                seeded: false,
            })
        }
    }

    /// Per-sample weights over `labels` for the given vicinity.
    pub fn weights(&self, labels: &[f64], y_c: f64, params: &VicinityParams) -> Result<WeightVector> {
        match self.mode {
            VicinityMode::Hard => hard_weights(labels, y_c, params.kappa),
            VicinityMode::Soft | VicinityMode::SoftAv => {
                soft_weights(labels, y_c, params.nu, self.threshold)
            }
            VicinityMode::HybridAv => hybrid_weights(labels, y_c, params, self.threshold),
        }
    }

    /// Total weight carried by each distinct label of `index` (sums to one).
    ///
    /// Equivalent to aggregating [`VicinityRule::weights`] over the samples of
    /// each label, but linear in the number of distinct labels.
    pub fn label_masses(
        &self,
        index: &LabelIndex,
        y_c: f64,
        params: &VicinityParams,
    ) -> Result<Vec<(usize, f64)>> {
        let labels = index.distinct_labels();
        let counts = index.counts();
        let reach = match self.mode {
            VicinityMode::Hard | VicinityMode::HybridAv => params.kappa,
            VicinityMode::Soft | VicinityMode::SoftAv => {
                check_soft_args(params.nu, self.threshold)?;
                if self.threshold > 0.0 {
                    ((1.0 / self.threshold).ln() / params.nu).sqrt()
                } else {
                    f64::INFINITY
                }
            }
        };
        // widen slightly so float rounding never drops a boundary label
        let pad = 1e-9;
        let lo = labels.partition_point(|&y| y < y_c - reach - pad);
        let hi = labels.partition_point(|&y| y <= y_c + reach + pad);
        let mut raw = Vec::with_capacity(hi.saturating_sub(lo));
        for i in lo..hi {
            let y = labels[i];
            let w = match self.mode {
                VicinityMode::Hard => ((y - y_c).abs() <= params.kappa) as u8 as f64,
                VicinityMode::Soft | VicinityMode::SoftAv => {
                    let w = soft_kernel(y, y_c, params.nu);
                    if w >= self.threshold {
                        w
                    } else {
                        0.0
                    }
                }
                VicinityMode::HybridAv => {
                    let w = soft_kernel(y, y_c, params.nu);
                    if (y - y_c).abs() <= params.kappa && w >= self.threshold {
                        w
                    } else {
                        0.0
                    }
                }
            };
            if w > 0.0 {
                raw.push((i, w * counts[i] as f64));
            }
        }
        let total: f64 = raw.iter().map(|(_, w)| w).sum();
        if raw.is_empty() || total <= 0.0 {
            return Err(Error::EmptyVicinity { y_c });
        }
        Ok(raw.into_iter().map(|(i, w)| (i, w / total)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_index::LabelScale;

    fn index(labels: &[f64], counts: &[usize]) -> LabelIndex {
        let expanded: Vec<f64> = labels
            .iter()
            .zip(counts)
            .flat_map(|(&y, &c)| std::iter::repeat_n(y, c))
            .collect();
        LabelIndex::from_normalized(&expanded, LabelScale::unit()).unwrap()
    }

    #[test]
    fn adaptive_hand_trace() {
        let idx = index(&[0.1, 0.2, 0.3], &[5, 10, 2]);
        let p = build_adaptive(&idx, 0.22, 12).unwrap();
        assert!((p.kappa_left - 0.02).abs() < 1e-12);
        assert!((p.kappa_right - 0.08).abs() < 1e-12);
        assert!((p.kappa - 0.08).abs() < 1e-12);
        assert!((p.nu - 156.25).abs() < 1e-9);
        assert_eq!(p.n_c, 12);
        assert_eq!(p.last_increment, 2);
    }

    #[test]
    fn adaptive_on_label_forces_one_extension() {
        let idx = index(&[0.1, 0.2, 0.35], &[5, 30, 2]);
        let p = build_adaptive(&idx, 0.2, 12).unwrap();
        assert!(p.seeded);
        assert_eq!(p.n_c, 35);
        assert!((p.kappa - 0.1).abs() < 1e-12);
        assert_eq!(p.kappa_right, 0.0);
    }

    #[test]
    fn adaptive_tie_extends_both_sides() {
        let idx = index(&[0.2, 0.4], &[7, 7]);
        let p = build_adaptive(&idx, 0.3, 10).unwrap();
        assert_eq!(p.n_c, 14);
        assert!((p.kappa_left - 0.1).abs() < 1e-12);
        assert!((p.kappa_right - 0.1).abs() < 1e-12);
        assert_eq!(p.last_increment, 14);
    }

    #[test]
    fn adaptive_linear_exponent() {
        let idx = index(&[0.1, 0.2, 0.3], &[5, 10, 2]);
        let p = build_adaptive_with(&idx, 0.22, 12, DecayExponent::Linear).unwrap();
        assert!((p.nu - 12.5).abs() < 1e-9);
    }

    #[test]
    fn adaptive_errors() {
        let idx = index(&[0.1, 0.2], &[2, 2]);
        assert!(matches!(
            build_adaptive(&idx, 0.5, 5),
            Err(Error::InsufficientSamples { .. })
        ));
        assert!(build_adaptive(&idx, 0.5, 0).is_err());
        assert!(build_adaptive(&idx, 1.5, 1).is_err());
        let single = index(&[0.5], &[4]);
        assert!(matches!(
            build_adaptive(&single, 0.5, 2),
            Err(Error::InsufficientLabels { .. })
        ));
        // off-label on a one-label index is still fine
        let p = build_adaptive(&single, 0.25, 2).unwrap();
        assert!((p.kappa - 0.25).abs() < 1e-12);
    }

    #[test]
    fn n_av_equal_total_spans_everything() {
        let idx = index(&[0.0, 0.3, 1.0], &[2, 2, 2]);
        let p = build_adaptive(&idx, 0.3, 6).unwrap();
        assert_eq!(p.n_c, 6);
        assert!((p.kappa - 0.7).abs() < 1e-12);
    }

    #[test]
    fn soft_single_sample() {
        let w = soft_weights(&[0.4], 0.4, 50.0, 1e-3).unwrap();
        assert_eq!(w.weights(), &[1.0]);
    }

    #[test]
    fn soft_closed_form() {
        let nu: f64 = 25.0;
        let w = soft_weights(&[0.5, 0.5 + 1.0 / nu.sqrt()], 0.5, nu, 0.0).unwrap();
        assert!((w.weights()[0] - 0.7311).abs() < 1e-4);
        assert!((w.weights()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn soft_threshold_excludes_far_samples() {
        let nu = 100.0;
        // nu * dy^2 = 7.0 > ln(1000) ~ 6.91
        let far = 0.5 + (7.0f64 / nu).sqrt();
        let w = soft_weights(&[0.5, far], 0.5, nu, 1e-3).unwrap();
        assert_eq!(w.indices(), &[0]);
        assert!(matches!(
            soft_weights(&[far], 0.5, nu, 1e-3),
            Err(Error::EmptyVicinity { .. })
        ));
    }

    #[test]
    fn hybrid_matches_soft_when_all_inside() {
        let labels = [0.45, 0.5, 0.52];
        let p = VicinityParams {
            kappa_left: 0.1,
            kappa_right: 0.1,
            kappa: 0.1,
            nu: 100.0,
            n_c: 3,
            last_increment: 1,
            seeded: false,
        };
        let h = hybrid_weights(&labels, 0.5, &p, 1e-3).unwrap();
        let s = soft_weights(&labels, 0.5, 100.0, 1e-3).unwrap();
        assert_eq!(h, s);
    }

    #[test]
    fn hybrid_truncates_outside_kappa() {
        let p = VicinityParams {
            kappa_left: 0.1,
            kappa_right: 0.1,
            kappa: 0.1,
            nu: 1.0,
            n_c: 1,
            last_increment: 1,
            seeded: false,
        };
        let w = hybrid_weights(&[0.5, 0.5 + 1.01 * 0.1], 0.5, &p, 1e-3).unwrap();
        assert_eq!(w.indices(), &[0]);
    }

    #[test]
    fn hybrid_after_adaptive_build() {
        let idx = index(&[0.1, 0.2, 0.3], &[5, 10, 2]);
        let p = build_adaptive(&idx, 0.22, 12).unwrap();
        let labels = [0.2, 0.3, 0.31];
        let w = hybrid_weights(&labels, 0.22, &p, 1e-3).unwrap();
        assert_eq!(w.indices(), &[0, 1]);
        let a = (-156.25f64 * 0.02 * 0.02).exp();
        let b = (-156.25f64 * 0.08 * 0.08).exp();
        assert!((w.weights()[0] - a / (a + b)).abs() < 1e-12);
        assert!((w.weights()[1] - b / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn hard_examples() {
        let w = hard_weights(&[0.1, 0.2, 0.25, 0.3, 0.15], 0.2, 0.1).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.weights().iter().all(|&x| x == 0.2));
        let w = hard_weights(&[0.1, 0.2, 0.3], 0.2, 0.05).unwrap();
        assert_eq!(w.indices(), &[1]);
        assert_eq!(w.weights(), &[1.0]);
        // closed interval
        let kappa = (0.3f64 - 0.2).abs();
        let w = hard_weights(&[0.3], 0.2, kappa).unwrap();
        assert_eq!(w.len(), 1);
        assert!(hard_weights(&[0.9], 0.2, 0.1).is_err());
    }

    #[test]
    fn label_masses_aggregate_sample_weights() {
        let idx = index(&[0.1, 0.2, 0.3, 0.6, 0.65], &[5, 10, 2, 1, 3]);
        let samples = idx.expand();
        for mode in [
            VicinityMode::Hard,
            VicinityMode::Soft,
            VicinityMode::SoftAv,
            VicinityMode::HybridAv,
        ] {
            let rule = VicinityRule {
                mode,
                kappa_base: 0.12,
                n_av: 6,
                exponent: DecayExponent::Quadratic,
                threshold: 1e-3,
            };
            for &y_c in &[0.05, 0.22, 0.5, 0.61] {
                let p = rule.params_for(&idx, y_c).unwrap();
                let per_sample = rule.weights(&samples, y_c, &p);
                let masses = rule.label_masses(&idx, y_c, &p);
                match (per_sample, masses) {
                    (Ok(w), Ok(m)) => {
                        let mut agg = vec![0.0; idx.len()];
                        for (i, wi) in w.iter() {
                            agg[idx.locate(samples[i]).unwrap()] += wi;
                        }
                        let mut dense = vec![0.0; idx.len()];
                        for (i, mi) in m {
                            dense[i] = mi;
                        }
                        for (a, b) in agg.iter().zip(&dense) {
                            assert!((a - b).abs() < 1e-12, "{mode:?} y_c={y_c}");
                        }
                    }
                    (Err(_), Err(_)) => {}
                    (a, b) => panic!("mismatch {mode:?} {y_c}: {a:?} vs {b:?}"),
                }
            }
        }
    }
}
