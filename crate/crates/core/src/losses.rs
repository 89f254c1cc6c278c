//! Vicinal adversarial, regression, density-ratio and divergence losses.
//!
//! Every loss has a tape form for training and a `*_value` form on plain
//! slices that evaluates the same tape code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities are clamped here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvForm {
    /// Scores are probabilities `D in (0, 1)`.
    Vanilla,
    /// Scores are raw real-valued outputs.
    #[default]
    Hinge,
}

impl std::str::FromStr for AdvForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(AdvForm::Vanilla),
            "hinge" => Ok(AdvForm::Hinge),
            other => Err(Error::InvalidMode(format!("unknown loss form `{other}`"))),
        }
    }
}

/// How the regression tube half-width is chosen per batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaMode {
    /// Largest vicinity radius among the batch's targets.
    BatchMaxKappa,
    Fixed { gamma: f64 },
}

impl Default for GammaMode {
    fn default() -> Self {
        GammaMode::BatchMaxKappa
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_reg_d: f64,
    pub lambda_dre_d: f64,
    pub lambda_reg_g: f64,
    pub lambda_f_g: f64,
    /// Inner penalty of the density-ratio loss.
    pub lambda_dre: f64,
    pub gamma_mode: GammaMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg_d: 1.0,
            lambda_dre_d: 1.0,
            lambda_reg_g: 1.0,
            lambda_f_g: 0.5,
            lambda_dre: 1e-2,
            gamma_mode: GammaMode::BatchMaxKappa,
        }
    }
}

impl LossWeights {
    /// Adversarial terms only.
    pub fn adversarial_only() -> Self {
        Self {
            lambda_reg_d: 0.0,
            lambda_dre_d: 0.0,
            lambda_reg_g: 0.0,
            lambda_f_g: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_reg_d,
            self.lambda_dre_d,
            self.lambda_reg_g,
            self.lambda_f_g,
            self.lambda_dre,
        ];
        if all.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter("loss weights must be non-negative".into()));
        }
        if let GammaMode::Fixed { gamma } = self.gamma_mode {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return Err(Error::InvalidParameter(format!("gamma {gamma}")));
            }
        }
        Ok(())
    }

    /// Whether the discriminator's regression head is trained at all.
    pub fn uses_reg_head(&self) -> bool {
        self.lambda_reg_d > 0.0 || self.lambda_reg_g > 0.0
    }

    pub fn uses_dre_head(&self) -> bool {
        self.lambda_dre_d > 0.0 || self.lambda_f_g > 0.0
    }
}

fn weighted_sum(tape: &mut Tape, x: Var, w: &[f64]) -> Result<Var> {
    let (rows, cols) = tape.value(x).shape();
    if cols != 1 || rows != w.len() {
        return Err(Error::Shape(format!(
            "{} weights for scores of shape {:?}",
            w.len(),
            (rows, cols)
        )));
    }
    let wv = tape.leaf(Tensor::column(w.to_vec()));
    let p = tape.mul(x, wv)?;
    tape.sum(p)
}

fn per_sample_real(tape: &mut Tape, s: Var, form: AdvForm) -> Result<Var> {
    match form {
        AdvForm::Vanilla => {
            let l = tape.ln_clamped(s, LOG_FLOOR)?;
            tape.neg(l)
        }
        AdvForm::Hinge => {
            let m = tape.neg(s)?;
            let m = tape.add_scalar(m, 1.0)?;
            tape.max_with(m, 0.0)
        }
    }
}

fn per_sample_fake(tape: &mut Tape, s: Var, form: AdvForm) -> Result<Var> {
    match form {
        AdvForm::Vanilla => {
            let one_minus = tape.neg(s)?;
            let one_minus = tape.add_scalar(one_minus, 1.0)?;
            let l = tape.ln_clamped(one_minus, LOG_FLOOR)?;
            tape.neg(l)
        }
        AdvForm::Hinge => {
            let m = tape.add_scalar(s, 1.0)?;
            tape.max_with(m, 0.0)
        }
    }
}

/// Weighted discriminator loss over real and fake scores (column vectors).
///
/// Vanilla: `-Σ w_r log D_r - Σ w_g log(1 - D_g)`;
/// hinge: `Σ w_r max(0, 1 - s_r) + Σ w_g max(0, 1 + s_g)`.
/// Either side may be empty.
pub fn disc_adv_loss(
    tape: &mut Tape,
    real: Option<(Var, &[f64])>,
    fake: Option<(Var, &[f64])>,
    form: AdvForm,
) -> Result<Var> {
    let mut total = tape.leaf(Tensor::scalar(0.0));
    if let Some((s, w)) = real {
        let l = per_sample_real(tape, s, form)?;
        let l = weighted_sum(tape, l, w)?;
        total = tape.add(total, l)?;
    }
    if let Some((s, w)) = fake {
        let l = per_sample_fake(tape, s, form)?;
        let l = weighted_sum(tape, l, w)?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}

/// Generator adversarial loss: vanilla `mean(-log D)`, hinge `mean(-s)`.
pub fn gen_adv_loss(tape: &mut Tape, fake: Var, form: AdvForm) -> Result<Var> {
    let per = match form {
        AdvForm::Vanilla => {
            let l = tape.ln_clamped(fake, LOG_FLOOR)?;
            tape.neg(l)?
        }
        AdvForm::Hinge => tape.neg(fake)?,
    };
    tape.mean(per)
}

fn tube_mean(tape: &mut Tape, y_hat: Var, target: &[f64], gamma: f64) -> Result<Var> {
    let t = tape.leaf(Tensor::column(target.to_vec()));
    let e = tape.sub(t, y_hat)?;
    let a = tape.abs(e)?;
    let a = tape.add_scalar(a, -gamma)?;
    let h = tape.max_with(a, 0.0)?;
    tape.mean(h)
}

/// γ-insensitive regression loss: the mean of `max(|t - ŷ| - γ, 0)` over
/// reals plus the same mean over fakes.
pub fn disc_reg_loss(
    tape: &mut Tape,
    real: (Var, &[f64]),
    fake: Option<(Var, &[f64])>,
    gamma: f64,
) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!("gamma {gamma}")));
    }
    let mut total = tube_mean(tape, real.0, real.1, gamma)?;
    if let Some((v, t)) = fake {
        let f = tube_mean(tape, v, t, gamma)?;
        total = tape.add(total, f)?;
    }
    Ok(total)
}

/// Penalized softplus density-ratio loss on head outputs `f`:
/// `mean_g[σ(f) f - softplus(f)] - mean_r[σ(f)] + λ (mean_g f - 1)²`.
pub fn dre_loss(tape: &mut Tape, fake: Var, real: Var, lambda_dre: f64) -> Result<Var> {
    let sg = tape.sigmoid(fake)?;
    let sf = tape.mul(sg, fake)?;
    let sp = tape.softplus(fake)?;
    let fake_term = tape.sub(sf, sp)?;
    let fake_term = tape.mean(fake_term)?;
    let sr = tape.sigmoid(real)?;
    let real_term = tape.mean(sr)?;
    let mut total = tape.sub(fake_term, real_term)?;
    if lambda_dre != 0.0 {
        let pen = dre_penalty(tape, fake, lambda_dre)?;
        total = tape.add(total, pen)?;
    }
    Ok(total)
}

/// The `λ (mean_g f - 1)²` term of [`dre_loss`] on its own.
pub fn dre_penalty(tape: &mut Tape, fake: Var, lambda_dre: f64) -> Result<Var> {
    let m = tape.mean(fake)?;
    let m = tape.add_scalar(m, -1.0)?;
    let m = tape.square(m)?;
    tape.scale(m, lambda_dre)
}

/// Mean absolute error between conditioning labels and predicted labels.
pub fn gen_reg_penalty(tape: &mut Tape, y_hat: Var, y_cond: &[f64]) -> Result<Var> {
    tube_mean(tape, y_hat, y_cond, 0.0)
}

/// Pearson χ² penalty `mean((r - 1)²)` on density-ratio estimates.
pub fn gen_f_penalty(tape: &mut Tape, ratio: Var) -> Result<Var> {
    let m = tape.add_scalar(ratio, -1.0)?;
    let m = tape.square(m)?;
    tape.mean(m)
}

/// Named scalar components of the discriminator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscComponents {
    pub adv: f64,
    pub reg: f64,
    pub dre: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenComponents {
    pub adv: f64,
    pub reg: f64,
    pub f: f64,
}

/// `adv + λ_reg^D reg + λ_dre^D dre`.
pub fn total_disc_loss(c: &DiscComponents, w: &LossWeights) -> f64 {
    c.adv + w.lambda_reg_d * c.reg + w.lambda_dre_d * c.dre
}

/// `adv + λ_reg^G reg + λ_f^G f`.
pub fn total_gen_loss(c: &GenComponents, w: &LossWeights) -> f64 {
    c.adv + w.lambda_reg_g * c.reg + w.lambda_f_g * c.f
}

/// Tape form of a weighted total: `base + Σ λ_k term_k`, skipping zero λ.
pub fn weighted_total(tape: &mut Tape, base: Var, terms: &[(f64, Option<Var>)]) -> Result<Var> {
    let mut total = base;
    for &(lambda, term) in terms {
        if let (true, Some(t)) = (lambda != 0.0, term) {
            let s = tape.scale(t, lambda)?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    tape.value(v).item()
}

fn col(tape: &mut Tape, v: &[f64]) -> Var {
    tape.leaf(Tensor::column(v.to_vec()))
}

/// [`disc_adv_loss`] on plain slices of `(score, weight)` columns.
pub fn disc_adv_value(
    real: &[f64],
    real_w: &[f64],
    fake: &[f64],
    fake_w: &[f64],
    form: AdvForm,
) -> Result<f64> {
    eval(|t| {
        let r = (!real.is_empty()).then(|| (col(t, real), real_w));
        let f = (!fake.is_empty()).then(|| (col(t, fake), fake_w));
        disc_adv_loss(t, r, f, form)
    })
}

pub fn gen_adv_value(fake: &[f64], form: AdvForm) -> Result<f64> {
    eval(|t| {
        let f = col(t, fake);
        gen_adv_loss(t, f, form)
    })
}

pub fn disc_reg_value(
    y_real: &[f64],
    y_hat_real: &[f64],
    y_fake: &[f64],
    y_hat_fake: &[f64],
    gamma: f64,
) -> Result<f64> {
    eval(|t| {
        let r = col(t, y_hat_real);
        let f = (!y_fake.is_empty()).then(|| (col(t, y_hat_fake), y_fake));
        disc_reg_loss(t, (r, y_real), f, gamma)
    })
}

pub fn dre_value(fake: &[f64], real: &[f64], lambda_dre: f64) -> Result<f64> {
    eval(|t| {
        let f = col(t, fake);
        let r = col(t, real);
        dre_loss(t, f, r, lambda_dre)
    })
}

pub fn gen_reg_value(y_cond: &[f64], y_hat: &[f64]) -> Result<f64> {
    eval(|t| {
        let h = col(t, y_hat);
        gen_reg_penalty(t, h, y_cond)
    })
}

pub fn gen_f_value(ratio: &[f64]) -> Result<f64> {
    eval(|t| {
        let r = col(t, ratio);
        gen_f_penalty(t, r)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-6;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    #[test]
    fn adversarial_examples() {
        let v = disc_adv_value(&[0.5], &[1.0], &[], &[], AdvForm::Vanilla).unwrap();
        assert!((v - 0.5f64.ln().abs()).abs() < TOL);
        let h = disc_adv_value(&[2.0], &[1.0], &[-2.0], &[1.0], AdvForm::Hinge).unwrap();
        assert_eq!(h, 0.0);
        let two = disc_adv_value(&[0.9, 0.6], &[0.75, 0.25], &[], &[], AdvForm::Vanilla).unwrap();
        let oracle = 0.75 * -(0.9f64.ln()) + 0.25 * -(0.6f64.ln());
        assert!((two - oracle).abs() < 1e-12);
        assert!((two - 0.2067).abs() < 1e-4);
    }

    #[test]
    fn generator_adversarial_examples() {
        assert_eq!(gen_adv_value(&[1.0], AdvForm::Vanilla).unwrap(), 0.0);
        assert_eq!(gen_adv_value(&[1.0, -1.0], AdvForm::Hinge).unwrap(), 0.0);
        let v = gen_adv_value(&[0.25], AdvForm::Vanilla).unwrap();
        assert!((v - 4f64.ln()).abs() < TOL);
    }

    #[test]
    fn vanilla_log_clamp_is_counted() {
        let mut t = Tape::new();
        let s = col(&mut t, &[0.0, 0.5]);
        let l = disc_adv_loss(&mut t, Some((s, &[0.5, 0.5])), None, AdvForm::Vanilla).unwrap();
        assert_eq!(t.clamp_events(), 1);
        let expected = 0.5 * -(LOG_FLOOR.ln()) + 0.5 * 2f64.ln();
        assert!((t.value(l).item().unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn regression_examples() {
        let inside = disc_reg_value(&[0.5, 0.5], &[0.45, 0.6], &[], &[], 0.2).unwrap();
        assert_eq!(inside, 0.0);
        let mae = disc_reg_value(&[0.0, 0.0], &[0.1, -0.3], &[], &[], 0.0).unwrap();
        assert!((mae - 0.2).abs() < 1e-12);
        let tube = disc_reg_value(&[0.0, 0.0], &[0.1, 0.3], &[], &[], 0.15).unwrap();
        assert!((tube - 0.075).abs() < TOL);
        let both = disc_reg_value(&[0.0], &[0.3], &[1.0], &[0.6], 0.1).unwrap();
        assert!((both - (0.2 + 0.3)).abs() < 1e-12);
        assert!(disc_reg_value(&[0.0], &[0.0], &[], &[], -1.0).is_err());
    }

    #[test]
    fn dre_examples() {
        let ones = dre_value(&[1.0, 1.0], &[1.0, 1.0], 1e-2).unwrap();
        let oracle = sigmoid(1.0) - softplus(1.0) - sigmoid(1.0);
        assert!((ones - oracle).abs() < 1e-12);
        assert!((ones - -1.3133).abs() < 1e-4);
        let zeros = dre_value(&[0.0], &[0.0], 1e-2).unwrap();
        assert!((zeros - (-(2f64.ln()) - 0.5 + 0.01)).abs() < TOL);
        assert!((zeros - -1.1831).abs() < 1e-4);
    }

    #[test]
    fn dre_penalty_isolates() {
        let fake = [0.3, 2.5, 1.1];
        let with = dre_value(&fake, &[0.7], 0.37).unwrap();
        let without = dre_value(&fake, &[0.7], 0.0).unwrap();
        let mean = fake.iter().sum::<f64>() / 3.0;
        assert!((with - without - 0.37 * (mean - 1.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn generator_penalty_examples() {
        assert_eq!(gen_reg_value(&[0.3, 0.6], &[0.3, 0.6]).unwrap(), 0.0);
        assert!((gen_reg_value(&[0.0, 0.0], &[0.2, -0.4]).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(gen_reg_value(&[0.0], &[0.5]).unwrap(), 0.5);
        assert_eq!(gen_f_value(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((gen_f_value(&[2.0, 0.5]).unwrap() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn totals() {
        let w = LossWeights {
            lambda_reg_d: 1.0,
            lambda_dre_d: 1.0,
            ..LossWeights::default()
        };
        let c = DiscComponents {
            adv: 1.0,
            reg: 0.2,
            dre: 0.3,
        };
        assert!((total_disc_loss(&c, &w) - 1.5).abs() < 1e-12);
        assert_eq!(total_disc_loss(&c, &LossWeights::adversarial_only()), 1.0);
        let g = GenComponents {
            adv: 0.4,
            reg: 0.1,
            f: 0.2,
        };
        assert!((total_gen_loss(&g, &LossWeights::default()) - (0.4 + 0.1 + 0.1)).abs() < 1e-12);

        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(1.0));
        let r = t.leaf(Tensor::scalar(0.2));
        let d = t.leaf(Tensor::scalar(0.3));
        let tot = weighted_total(&mut t, a, &[(1.0, Some(r)), (1.0, Some(d)), (5.0, None)]).unwrap();
        assert!((t.value(tot).item().unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn defaults() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_reg_d, w.lambda_reg_g, w.lambda_f_g), (1.0, 1.0, 0.5));
        assert_eq!(w.lambda_dre, 1e-2);
        assert!(LossWeights {
            lambda_f_g: -1.0,
            ..w
        }
        .validate()
        .is_err());
        let json = serde_json::to_string(&w).unwrap();
        assert_eq!(serde_json::from_str::<LossWeights>(&json).unwrap(), w);
    }

    proptest! {
        #[test]
        fn reg_loss_monotone_in_gamma(
            errs in prop::collection::vec(-1.0f64..1.0, 1..20),
            g1 in 0.0f64..1.0,
            g2 in 0.0f64..1.0,
        ) {
            let y = vec![0.0; errs.len()];
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let a = disc_reg_value(&y, &errs, &[], &[], lo).unwrap();
            let b = disc_reg_value(&y, &errs, &[], &[], hi).unwrap();
            prop_assert!(b <= a + 1e-15);
            let maxe = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            prop_assert_eq!(disc_reg_value(&y, &errs, &[], &[], maxe).unwrap(), 0.0);
        }

        #[test]
        fn f_penalty_is_plugin_chi2(r in prop::collection::vec(0.01f64..5.0, 1..30)) {
            let plug = r.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / r.len() as f64;
            let v = gen_f_value(&r).unwrap();
            prop_assert!((v - plug).abs() <= 1e-12 * plug.max(1.0));
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn adv_loss_permutation_invariant(
            pairs in prop::collection::vec((0.01f64..0.99, 0.0f64..1.0), 2..10),
            rot in 0usize..10,
        ) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let w: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let k = rot % s.len();
            let mut s2 = s.clone();
            let mut w2 = w.clone();
            s2.rotate_left(k);
            w2.rotate_left(k);
            for form in [AdvForm::Vanilla, AdvForm::Hinge] {
                let a = disc_adv_value(&s, &w, &s, &w, form).unwrap();
                let b = disc_adv_value(&s2, &w2, &s2, &w2, form).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
