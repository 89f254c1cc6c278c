//! Imbalanced label-count profiles and toy conditional-Gaussian datasets.
//!
//! Count profiles follow an exponential decay away from each mode:
//! the mean count at raw distance `d` is `max(1, int(peak * exp(-rate * d)))`,
//! then one Gaussian draw per label perturbs it and the result is clamped to
//! `[0, peak]`. Distances are measured in raw label units.

use std::f64::consts::TAU;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::label_index::LabelScale;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Unimodal,
    Bimodal,
    Trimodal,
}

impl Pattern {
    pub fn mode_count(self) -> usize {
        match self {
            Pattern::Unimodal => 1,
            Pattern::Bimodal => 2,
            Pattern::Trimodal => 3,
        }
    }

    /// Mode positions as fractions of the label span.
    pub fn default_fractions(self) -> &'static [f64] {
        match self {
            Pattern::Unimodal => &[0.5],
            Pattern::Bimodal => &[0.25, 0.75],
            Pattern::Trimodal => &[0.2, 0.5, 0.8],
        }
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unimodal" => Ok(Pattern::Unimodal),
            "bimodal" => Ok(Pattern::Bimodal),
            "trimodal" => Ok(Pattern::Trimodal),
            other => Err(Error::InvalidMode(format!("unknown pattern `{other}`"))),
        }
    }
}

/// How per-mode count kernels combine on multimodal profiles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Max,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub pattern: Pattern,
    /// Mode positions in raw label units; each must be a distinct label.
    pub modes: Vec<f64>,
    pub decay_rate: f64,
    pub peak_count: usize,
    pub noise_std: f64,
    #[serde(default)]
    pub combine: Combine,
}

impl ImbalanceSpec {
    /// Spec with the usual constants (`rate 0.1`, `peak 49`, `noise 5`) and
    /// modes at the pattern's fractions of `[raw_min, raw_max]`, snapped to the
    /// nearest of `distinct_raw`.
    pub fn with_default_modes(
        pattern: Pattern,
        distinct_raw: &[f64],
        raw_min: f64,
        raw_max: f64,
    ) -> Result<Self> {
        if distinct_raw.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let modes = pattern
            .default_fractions()
            .iter()
            .map(|f| nearest(distinct_raw, raw_min + f * (raw_max - raw_min)))
            .collect();
        Ok(Self {
            pattern,
            modes,
            decay_rate: 0.1,
            peak_count: 49,
            noise_std: 5.0,
            combine: Combine::Max,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.len() != self.pattern.mode_count() {
            return Err(Error::InvalidMode(format!(
                "{:?} needs {} modes, got {}",
                self.pattern,
                self.pattern.mode_count(),
                self.modes.len()
            )));
        }
        if self.peak_count == 0 {
            return Err(Error::InvalidSpec("peak_count must be at least 1".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate.is_finite()) {
            return Err(Error::InvalidSpec("decay_rate must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidSpec("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

fn nearest(values: &[f64], target: f64) -> f64 {
    *values
        .iter()
        .min_by(|a, b| (*a - target).abs().total_cmp(&(*b - target).abs()))
        .unwrap()
}

fn same_label(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// `max(1, int(peak * exp(-rate * d)))`.
pub fn mean_count(distance: f64, decay_rate: f64, peak_count: usize) -> usize {
    let v = (peak_count as f64 * (-decay_rate * distance).exp()).trunc();
    (v as usize).max(1)
}

fn check_sorted(distinct_raw: &[f64]) -> Result<()> {
    if distinct_raw.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidSpec(
            "distinct labels must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn perturb(means: &[usize], spec: &ImbalanceSpec, is_mode: &[bool], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    means
        .iter()
        .zip(is_mode)
        .map(|(&mean, &mode)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if mode {
                return spec.peak_count;
            }
            let noisy = (mean as f64 + spec.noise_std * z).trunc();
            noisy.clamp(0.0, spec.peak_count as f64) as usize
        })
        .collect()
}

/// Counts for a single-mode profile.
pub fn unimodal_counts(
    distinct_raw: &[f64],
    mode: f64,
    spec: &ImbalanceSpec,
    seed: u64,
) -> Result<Vec<usize>> {
    check_sorted(distinct_raw)?;
    if !distinct_raw.iter().any(|&y| same_label(y, mode)) {
        return Err(Error::InvalidMode(format!("mode {mode} is not a distinct label")));
    }
    let mut single = spec.clone();
    single.pattern = Pattern::Unimodal;
    single.modes = vec![mode];
    single.validate()?;
    let means: Vec<usize> = distinct_raw
        .iter()
        .map(|&y| mean_count((y - mode).abs(), spec.decay_rate, spec.peak_count))
        .collect();
    let is_mode: Vec<bool> = distinct_raw.iter().map(|&y| same_label(y, mode)).collect();
    Ok(perturb(&means, spec, &is_mode, seed))
}

/// Counts for a two- or three-mode profile.
pub fn multimodal_counts(
    distinct_raw: &[f64],
    modes: &[f64],
    spec: &ImbalanceSpec,
    seed: u64,
) -> Result<Vec<usize>> {
    check_sorted(distinct_raw)?;
    if !(2..=3).contains(&modes.len()) {
        return Err(Error::InvalidMode(format!(
            "multimodal profiles need 2 or 3 modes, got {}",
            modes.len()
        )));
    }
    for (i, &a) in modes.iter().enumerate() {
        if modes[i + 1..].iter().any(|&b| same_label(a, b)) {
            return Err(Error::InvalidMode(format!("duplicate mode {a}")));
        }
        if !distinct_raw.iter().any(|&y| same_label(y, a)) {
            return Err(Error::InvalidMode(format!("mode {a} is not a distinct label")));
        }
    }
    let means: Vec<usize> = distinct_raw
        .iter()
        .map(|&y| {
            let kernels = modes
                .iter()
                .map(|&m| mean_count((y - m).abs(), spec.decay_rate, spec.peak_count));
            match spec.combine {
                Combine::Max => kernels.max().unwrap(),
                Combine::Sum => kernels.sum::<usize>().min(spec.peak_count),
            }
        })
        .collect();
    let is_mode: Vec<bool> = distinct_raw
        .iter()
        .map(|&y| modes.iter().any(|&m| same_label(y, m)))
        .collect();
    Ok(perturb(&means, spec, &is_mode, seed))
}

/// Dispatches on the spec's pattern.
pub fn imbalance_counts(distinct_raw: &[f64], spec: &ImbalanceSpec, seed: u64) -> Result<Vec<usize>> {
    spec.validate()?;
    match spec.pattern {
        Pattern::Unimodal => unimodal_counts(distinct_raw, spec.modes[0], spec, seed),
        _ => multimodal_counts(distinct_raw, &spec.modes, spec, seed),
    }
}

/// Picks `counts[i]` samples uniformly without replacement from each distinct
/// label of `full`, keeping the original sample order.
pub fn subsample(full: &Dataset, counts: &[usize], seed: u64) -> Result<Dataset> {
    let index = full.index()?;
    if counts.len() != index.len() {
        return Err(Error::Shape(format!(
            "{} counts for {} distinct labels",
            counts.len(),
            index.len()
        )));
    }
    let groups = full.groups(&index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(counts.iter().sum());
    for (group, &k) in groups.iter().zip(counts) {
        if k > group.len() {
            return Err(Error::InsufficientSamples {
                requested: k,
                available: group.len(),
            });
        }
        chosen.extend(sample_indices(&mut rng, group.len(), k).into_iter().map(|j| group[j]));
    }
    chosen.sort_unstable();
    Ok(full.subset(&chosen))
}

/// Conditional Gaussian families `x | y ~ N(m(y), s(y)^2 I)` with
/// `s(y) = base_std + std_slope * y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    /// `m(y) = (cos 2πy, sin 2πy)`.
    Circle { base_std: f64, std_slope: f64 },
    /// `m(y) = intercept + slope * y`, one-dimensional.
    Line {
        intercept: f64,
        slope: f64,
        base_std: f64,
        std_slope: f64,
    },
    /// `m(y) = (cos 2πy, sin 2πy, y)`.
    Helix { base_std: f64, std_slope: f64 },
}

impl Default for Family {
    fn default() -> Self {
        Family::Circle {
            base_std: 0.05,
            std_slope: 0.05,
        }
    }
}

impl Family {
    pub fn dim(&self) -> usize {
        match self {
            Family::Circle { .. } => 2,
            Family::Line { .. } => 1,
            Family::Helix { .. } => 3,
        }
    }

    fn std_params(&self) -> (f64, f64) {
        match *self {
            Family::Circle {
                base_std,
                std_slope,
            }
            | Family::Helix {
                base_std,
                std_slope,
            }
            | Family::Line {
                base_std,
                std_slope,
                ..
            } => (base_std, std_slope),
        }
    }

    /// Rejects families whose covariance is not positive definite on `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let (b, s) = self.std_params();
        let ok = [b, b + s].iter().all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(Error::InvalidSpec(format!(
                "covariance not positive definite on [0, 1]: std(0) = {b}, std(1) = {}",
                b + s
            )));
        }
        Ok(())
    }

    pub fn std(&self, y: f64) -> f64 {
        let (b, s) = self.std_params();
        b + s * y
    }

    pub fn mean(&self, y: f64) -> Vec<f64> {
        match *self {
            Family::Circle { .. } => vec![(TAU * y).cos(), (TAU * y).sin()],
            Family::Line {
                intercept, slope, ..
            } => vec![intercept + slope * y],
            Family::Helix { .. } => vec![(TAU * y).cos(), (TAU * y).sin(), y],
        }
    }

    pub fn sample_into<R: rand::Rng + ?Sized>(&self, y: f64, rng: &mut R, out: &mut Vec<f64>) {
        let s = self.std(y);
        for m in self.mean(y) {
            let z: f64 = StandardNormal.sample(rng);
            out.push(m + s * z);
        }
    }

    pub fn log_density(&self, x: &[f64], y: f64) -> f64 {
        let s = self.std(y);
        let d = self.dim() as f64;
        let sq: f64 = self
            .mean(y)
            .iter()
            .zip(x)
            .map(|(m, v)| (v - m).powi(2))
            .sum();
        -0.5 * sq / (s * s) - d * (s.ln() + 0.5 * TAU.ln())
    }
}

/// A dataset together with the family that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub data: Dataset,
    pub family: Family,
}

/// `n_labels` labels on a uniform grid of `[0, 1]` with `per_label` draws each.
pub fn make_toy_dataset(
    n_labels: usize,
    per_label: usize,
    family: Family,
    scale: LabelScale,
    seed: u64,
) -> Result<ToyDataset> {
    if n_labels < 2 {
        return Err(Error::InvalidSpec("need at least 2 labels".into()));
    }
    let labels: Vec<f64> = (0..n_labels)
        .map(|i| i as f64 / (n_labels - 1) as f64)
        .collect();
    make_toy_dataset_at(&labels, per_label, family, scale, seed)
}

/// `per_label` draws at each of the given normalized labels.
pub fn make_toy_dataset_at(
    labels: &[f64],
    per_label: usize,
    family: Family,
    scale: LabelScale,
    seed: u64,
) -> Result<ToyDataset> {
    if labels.len() < 2 {
        return Err(Error::InvalidSpec("need at least 2 labels".into()));
    }
    if per_label == 0 {
        return Err(Error::InvalidSpec("per_label must be at least 1".into()));
    }
    family.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ys = Vec::with_capacity(labels.len() * per_label);
    let mut features = Vec::with_capacity(labels.len() * per_label * family.dim());
    for &y in labels {
        for _ in 0..per_label {
            ys.push(y);
            family.sample_into(y, &mut rng, &mut features);
        }
    }
    Ok(ToyDataset {
        data: Dataset::new(family.dim(), scale, ys, features)?,
        family,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(noise: f64) -> ImbalanceSpec {
        ImbalanceSpec {
            pattern: Pattern::Unimodal,
            modes: vec![0.0],
            decay_rate: 0.1,
            peak_count: 49,
            noise_std: noise,
            combine: Combine::Max,
        }
    }

    #[test]
    fn mean_count_examples() {
        assert_eq!(mean_count(0.0, 0.1, 49), 49);
        // 49 * e^-1 = 18.026
        assert_eq!(mean_count(10.0, 0.1, 49), 18);
        assert_eq!(mean_count(1000.0, 0.1, 49), 1);
    }

    #[test]
    fn unimodal_noise_off_matches_formula() {
        let labels: Vec<f64> = (0..99).map(|i| i as f64).collect();
        let counts = unimodal_counts(&labels, 49.0, &spec(0.0), 3).unwrap();
        for (y, c) in labels.iter().zip(&counts) {
            let d = (y - 49.0f64).abs();
            let expected = ((49.0 * (-0.1 * d).exp()).trunc() as usize).max(1);
            assert_eq!(*c, expected);
        }
        assert_eq!(counts[49], 49);
        assert_eq!(counts[59], 18);
    }

    #[test]
    fn invalid_mode() {
        let labels = [0.0, 1.0, 2.0];
        assert!(matches!(
            unimodal_counts(&labels, 1.5, &spec(0.0), 0),
            Err(Error::InvalidMode(_))
        ));
        assert!(matches!(
            multimodal_counts(&labels, &[1.0, 1.0], &spec(0.0), 0),
            Err(Error::InvalidMode(_))
        ));
        assert!(multimodal_counts(&labels, &[1.0], &spec(0.0), 0).is_err());
    }

    #[test]
    fn bimodal_is_pointwise_max() {
        let labels: Vec<f64> = (0..99).map(|i| i as f64).collect();
        let s = spec(0.0);
        let two = multimodal_counts(&labels, &[10.0, 80.0], &s, 1).unwrap();
        let a = unimodal_counts(&labels, 10.0, &s, 1).unwrap();
        let b = unimodal_counts(&labels, 80.0, &s, 1).unwrap();
        for i in 0..labels.len() {
            assert_eq!(two[i], a[i].max(b[i]));
        }
        // equidistant label
        assert_eq!(two[45], mean_count(35.0, 0.1, 49));
    }

    #[test]
    fn trimodal_peaks() {
        let labels: Vec<f64> = (1..=99).map(|i| i as f64).collect();
        let counts = multimodal_counts(&labels, &[20.0, 50.0, 80.0], &spec(0.0), 9).unwrap();
        let peaks: Vec<usize> = (0..labels.len()).filter(|&i| counts[i] == 49).collect();
        assert_eq!(peaks, vec![19, 49, 79]);
        let scale = LabelScale::new(0.0, 100.0).unwrap();
        let norm: Vec<f64> = peaks.iter().map(|&i| scale.normalize(labels[i]).unwrap()).collect();
        assert_eq!(norm, vec![0.2, 0.5, 0.8]);
    }

    #[test]
    fn default_modes_sit_at_fractions() {
        let labels: Vec<f64> = (1..=99).map(|i| i as f64).collect();
        let s = ImbalanceSpec::with_default_modes(Pattern::Trimodal, &labels, 0.0, 100.0).unwrap();
        assert_eq!(s.modes, vec![20.0, 50.0, 80.0]);
        let s = ImbalanceSpec::with_default_modes(Pattern::Bimodal, &labels, 0.0, 100.0).unwrap();
        assert_eq!(s.modes, vec![25.0, 75.0]);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn imbalance_is_present() {
        let labels: Vec<f64> = (0..91).map(|i| i as f64).collect();
        let counts = unimodal_counts(&labels, 45.0, &spec(0.0), 0).unwrap();
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().filter(|&&c| c > 0).min().unwrap() as f64;
        assert!(max / min >= 10.0);
    }

    #[test]
    fn toy_family_means() {
        let f = Family::default();
        let m0 = f.mean(0.0);
        assert_eq!(m0, vec![1.0, 0.0]);
        assert_eq!(f.std(0.0), 0.05);
        let m = f.mean(0.5);
        assert!((m[0] + 1.0).abs() < 1e-15 && m[1].abs() < 1e-15);
        assert!(Family::Circle {
            base_std: 0.05,
            std_slope: -0.1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn toy_sample_moments() {
        let f = Family::default();
        let toy = make_toy_dataset(2, 100_000, f, LabelScale::unit(), 4).unwrap();
        for (label_pos, y) in [(0usize, 0.0), (1, 1.0)] {
            let rows: Vec<usize> = (label_pos * 100_000..(label_pos + 1) * 100_000).collect();
            let n = rows.len() as f64;
            let s = f.std(y);
            let m = f.mean(y);
            for j in 0..2 {
                let mean = rows.iter().map(|&r| toy.data.x(r)[j]).sum::<f64>() / n;
                assert!((mean - m[j]).abs() < 3.0 * s / n.sqrt(), "axis {j} at y {y}");
            }
        }
    }

    #[test]
    fn subsample_identity_and_determinism() {
        let toy = make_toy_dataset(5, 4, Family::default(), LabelScale::unit(), 1).unwrap();
        let all = subsample(&toy.data, &[4; 5], 7).unwrap();
        assert_eq!(all, toy.data);
        let a = subsample(&toy.data, &[1, 2, 3, 0, 4], 11).unwrap();
        let b = subsample(&toy.data, &[1, 2, 3, 0, 4], 11).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.len(), 10);
        assert!(matches!(
            subsample(&toy.data, &[5, 0, 0, 0, 0], 1),
            Err(Error::InsufficientSamples { .. })
        ));
        let empty = subsample(&toy.data, &[0; 5], 1).unwrap();
        assert!(matches!(empty.index(), Err(Error::EmptyDataset)));
    }

    proptest! {
        #[test]
        fn counts_obey_clamp(seed in 0u64..1000, noise in 0.0f64..20.0, rate in 0.01f64..1.0) {
            let labels: Vec<f64> = (0..60).map(|i| i as f64).collect();
            let mut s = spec(noise);
            s.decay_rate = rate;
            let c = unimodal_counts(&labels, 30.0, &s, seed).unwrap();
            prop_assert!(c.iter().all(|&v| v <= 49));
            prop_assert_eq!(c[30], 49);
        }

        #[test]
        fn noise_off_is_deterministic(seed_a in 0u64..1000, seed_b in 0u64..1000) {
            let labels: Vec<f64> = (0..40).map(|i| i as f64 * 0.5).collect();
            let a = unimodal_counts(&labels, 10.0, &spec(0.0), seed_a).unwrap();
            let b = unimodal_counts(&labels, 10.0, &spec(0.0), seed_b).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
