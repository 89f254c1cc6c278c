//! Adversarial training loop with vicinal real sampling, the multi-head
//! discriminator objective, generator penalties and EMA tracking.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::label_index::{LabelIndex, LabelScale};
use crate::losses::{self, AdvForm, DiscComponents, GammaMode, GenComponents, LossWeights};
use crate::models::{
    train_surrogate_regressor, Discriminator, Ema, Generator, Heads, LabelRegressor,
    ModelConfig, Regressor, SpectralClip, SurrogateConfig,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{Checkpoint, ParamStore};
use crate::tensor::{Tape, Tensor};
use crate::vicinity::{DecayExponent, VicinityMode, VicinityParams, VicinityRule, DEFAULT_WEIGHT_THRESHOLD};

/// Label-noise standard deviation: a number, or `"rule_of_thumb"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSetting {
    Value(f64),
    Named(RuleOfThumb),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleOfThumb {
    #[serde(rename = "rule_of_thumb")]
    RuleOfThumb,
}

impl Default for SigmaSetting {
    fn default() -> Self {
        SigmaSetting::Named(RuleOfThumb::RuleOfThumb)
    }
}

/// Labels at which fakes are generated for each target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeLabels {
    /// The target itself, weight one.
    #[default]
    Target,
    /// A label drawn from the target's vicinity, like the reals.
    Vicinity,
}

/// Regression target for fakes in the discriminator's regression loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeRegTarget {
    /// The label the fake was generated at.
    #[default]
    Conditioning,
    /// Prediction of a separately trained surrogate regressor.
    Surrogate,
    /// Reals only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(rename = "num_D_steps", alias = "num_d_steps")]
    pub num_d_steps: usize,
    pub optimizer: OptimizerKind,
    pub vicinity_mode: VicinityMode,
    pub n_av: Option<usize>,
    pub sigma: SigmaSetting,
    /// Radius of the fixed modes; `None` uses the widest label gap.
    pub kappa_base: Option<f64>,
    pub decay_exponent: DecayExponent,
    pub weight_threshold: f64,
    pub loss_form: AdvForm,
    pub loss_weights: LossWeights,
    pub fake_labels: FakeLabels,
    pub fake_reg_target: FakeRegTarget,
    pub surrogate: SurrogateConfig,
    pub ema_decay: f64,
    pub ema_start: usize,
    /// Largest singular value allowed in discriminator weights.
    pub spectral_clip: Option<f64>,
    pub model: ModelConfig,
    pub seed: u64,
    /// Checkpoint every this many generator steps; 0 disables.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            learning_rate: 1e-3,
            num_d_steps: 2,
            optimizer: OptimizerKind::default(),
            vicinity_mode: VicinityMode::HybridAv,
            n_av: Some(50),
            sigma: SigmaSetting::default(),
            kappa_base: None,
            decay_exponent: DecayExponent::Quadratic,
            weight_threshold: DEFAULT_WEIGHT_THRESHOLD,
            loss_form: AdvForm::Hinge,
            loss_weights: LossWeights::default(),
            fake_labels: FakeLabels::Target,
            fake_reg_target: FakeRegTarget::Conditioning,
            surrogate: SurrogateConfig::default(),
            ema_decay: 0.999,
            ema_start: 1000,
            spectral_clip: None,
            model: ModelConfig::default(),
            seed: 0,
            checkpoint_every: 1000,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.num_d_steps == 0 {
            return bad("num_D_steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.vicinity_mode.is_adaptive() && self.n_av.unwrap_or(0) == 0 {
            return bad("adaptive vicinities need n_av >= 1");
        }
        if let SigmaSetting::Value(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("sigma must be non-negative");
            }
        }
        if let Some(k) = self.kappa_base {
            if !(k > 0.0 && k.is_finite()) {
                return bad("kappa_base must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.weight_threshold) {
            return bad("weight_threshold must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        if let Some(c) = self.spectral_clip {
            if !(c > 0.0) {
                return bad("spectral_clip must be positive");
            }
        }
        self.loss_weights.validate()?;
        self.model.validate()
    }
}

/// Draws training labels uniformly over samples, adds `N(0, sigma²)` noise
/// and clamps into `[0, 1]`.
pub fn sample_targets<R: Rng + ?Sized>(labels: &[f64], n: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let y = labels[rng.random_range(0..labels.len())];
            let e: f64 = StandardNormal.sample(rng);
            (y + sigma * e).clamp(0.0, 1.0)
        })
        .collect()
}

fn noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn pick<R: Rng + ?Sized>(masses: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, m) in masses {
        acc += m;
        if u < acc {
            return i;
        }
    }
    masses.last().unwrap().0
}

/// One row of `training_log.csv`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub d_adv: f64,
    pub d_reg: f64,
    pub d_dre: f64,
    pub g_adv: f64,
    pub g_reg: f64,
    pub g_f: f64,
    pub gamma: f64,
    pub mean_kappa: f64,
}

pub const LOG_HEADER: [&str; 9] = [
    "step", "L_adv^D", "L_reg^D", "L_dre^D", "L_adv^G", "L_reg^G", "L_f^G", "gamma", "mean_kappa",
];

impl LogRow {
    fn record(&self) -> [String; 9] {
        [
            self.step.to_string(),
            self.d_adv.to_string(),
            self.d_reg.to_string(),
            self.d_dre.to_string(),
            self.g_adv.to_string(),
            self.g_reg.to_string(),
            self.g_f.to_string(),
            self.gamma.to_string(),
            self.mean_kappa.to_string(),
        ]
    }
}

/// Vicinity bookkeeping for one discriminator batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscStepReport {
    pub components: DiscComponents,
    pub gamma: f64,
    pub mean_kappa: f64,
    pub clamp_events: usize,
}

/// Everything a training run mutates.
pub struct Trainer {
    config: TrainConfig,
    data: Dataset,
    index: LabelIndex,
    groups: Vec<Vec<usize>>,
    rule: VicinityRule,
    sigma: f64,
    generator: Generator,
    discriminator: Discriminator,
    ema: Ema,
    g_opt: Optimizer,
    d_opt: Optimizer,
    clip: Option<SpectralClip>,
    surrogate: Option<Regressor>,
    rng: ChaCha8Rng,
    gen_steps: usize,
    disc_steps: usize,
    clamp_events: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let index = data.index()?;
        let groups = data.groups(&index);
        let thumb = index.rule_of_thumb()?;
        let sigma = match config.sigma {
            SigmaSetting::Value(s) => s,
            SigmaSetting::Named(_) => thumb.sigma,
        };
        let rule = VicinityRule {
            mode: config.vicinity_mode,
            kappa_base: config.kappa_base.unwrap_or(thumb.kappa_base),
            n_av: config.n_av.unwrap_or(0),
            exponent: config.decay_exponent,
            threshold: config.weight_threshold,
        };
        if rule.mode.is_adaptive() && rule.n_av > index.total() {
            return Err(Error::InsufficientSamples {
                requested: rule.n_av,
                available: index.total(),
            });
        }
        let generator = Generator::new(&config.model, data.dim(), config.seed.wrapping_mul(2) + 1)?;
        let discriminator =
            Discriminator::new(&config.model, data.dim(), config.seed.wrapping_mul(2) + 2)?;
        let ema = Ema::new(generator.store(), config.ema_decay)?;
        let g_opt = Optimizer::new(config.optimizer, config.learning_rate, generator.store())?;
        let d_opt = Optimizer::new(config.optimizer, config.learning_rate, discriminator.store())?;
        let clip = config.spectral_clip.map(|m| {
            SpectralClip::new(discriminator.store(), discriminator.weight_slots(), m)
        });
        let surrogate = if config.fake_reg_target == FakeRegTarget::Surrogate
            && config.loss_weights.lambda_reg_d > 0.0
        {
            Some(train_surrogate_regressor(&data, &config.surrogate)?.0)
        } else {
            None
        };
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            data,
            index,
            groups,
            rule,
            sigma,
            generator,
            discriminator,
            ema,
            g_opt,
            d_opt,
            clip,
            surrogate,
            rng,
            gen_steps: 0,
            disc_steps: 0,
            clamp_events: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn rule(&self) -> &VicinityRule {
        &self.rule
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn ema(&self) -> &Ema {
        &self.ema
    }

    /// Generator with the EMA shadow parameters.
    pub fn ema_generator(&self) -> Result<Generator> {
        Generator::from_store(&self.config.model, self.data.dim(), self.ema.shadow.clone())
    }

    pub fn gen_steps(&self) -> usize {
        self.gen_steps
    }

    pub fn disc_steps(&self) -> usize {
        self.disc_steps
    }

    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn vicinities(&self, targets: &[f64]) -> Result<Vec<(VicinityParams, Vec<(usize, f64)>)>> {
        targets
            .par_iter()
            .map(|&y_c| {
                let p = self.rule.params_for(&self.index, y_c)?;
                let m = self.rule.label_masses(&self.index, y_c, &p)?;
                Ok((p, m))
            })
            .collect()
    }

    fn heads_d(&self) -> Heads {
        let w = &self.config.loss_weights;
        Heads {
            adv: true,
            reg: w.lambda_reg_d > 0.0,
            dre: w.lambda_dre_d > 0.0,
        }
    }

    /// One discriminator update on a fresh batch.
    pub fn disc_step(&mut self) -> Result<DiscStepReport> {
        let b = self.config.batch_size;
        let targets = sample_targets(self.data.labels(), b, self.sigma, &mut self.rng);
        let vic = self.vicinities(&targets)?;
        let mut real_rows = Vec::with_capacity(b);
        let mut fake_labels = Vec::with_capacity(b);
        for (&y_c, (_, masses)) in targets.iter().zip(&vic) {
            let group = &self.groups[pick(masses, &mut self.rng)];
            real_rows.push(group[self.rng.random_range(0..group.len())]);
            fake_labels.push(match self.config.fake_labels {
                FakeLabels::Target => y_c,
                FakeLabels::Vicinity => self.index.distinct_labels()[pick(masses, &mut self.rng)],
            });
        }
        let kappas: Vec<f64> = vic.iter().map(|(p, _)| p.kappa).collect();
        let mean_kappa = kappas.iter().sum::<f64>() / b as f64;
        let gamma = match self.config.loss_weights.gamma_mode {
            GammaMode::BatchMaxKappa => kappas.iter().cloned().fold(0.0, f64::max),
            GammaMode::Fixed { gamma } => gamma,
        };

        let z = noise(b, self.generator.noise_dim(), &mut self.rng);
        let x_fake = self.generator.sample(&z, &fake_labels)?;
        let x_real = self.data.features_of(&real_rows);
        let fake_reg_targets: Option<Vec<f64>> = match self.config.fake_reg_target {
            FakeRegTarget::Conditioning => Some(fake_labels.clone()),
            FakeRegTarget::Surrogate => match &self.surrogate {
                Some(r) => Some(r.predict(&x_fake)?),
                None => Some(fake_labels.clone()),
            },
            FakeRegTarget::None => None,
        };

        let heads = self.heads_d();
        let w = self.config.loss_weights;
        let form = self.config.loss_form;
        let mut tape = Tape::new();
        let vars = self.discriminator.store().bind(&mut tape);
        let xr = tape.leaf(x_real);
        let xf = tape.leaf(x_fake);
        let real = self.discriminator.forward(&mut tape, &vars, xr, &targets, heads)?;
        let fake = self.discriminator.forward(&mut tape, &vars, xf, &targets, heads)?;
        let unit = vec![1.0 / b as f64; b];
        let (sr, sf) = match form {
            AdvForm::Vanilla => (
                tape.sigmoid(real.adv.unwrap())?,
                tape.sigmoid(fake.adv.unwrap())?,
            ),
            AdvForm::Hinge => (real.adv.unwrap(), fake.adv.unwrap()),
        };
        let adv = losses::disc_adv_loss(&mut tape, Some((sr, &unit)), Some((sf, &unit)), form)?;
        let reg = if heads.reg {
            let fake_part = fake_reg_targets
                .as_deref()
                .map(|t| (fake.y_hat.unwrap(), t));
            Some(losses::disc_reg_loss(
                &mut tape,
                (real.y_hat.unwrap(), &targets),
                fake_part,
                gamma,
            )?)
        } else {
            None
        };
        let dre = if heads.dre {
            Some(losses::dre_loss(
                &mut tape,
                fake.dre.unwrap(),
                real.dre.unwrap(),
                w.lambda_dre,
            )?)
        } else {
            None
        };
        let total = losses::weighted_total(
            &mut tape,
            adv,
            &[(w.lambda_reg_d, reg), (w.lambda_dre_d, dre)],
        )?;
        let value = |v: Option<crate::tensor::Var>| -> f64 {
            v.map(|v| tape.value(v).data()[0]).unwrap_or(0.0)
        };
        let components = DiscComponents {
            adv: value(Some(adv)),
            reg: value(reg),
            dre: value(dre),
        };
        let grads = tape.backward(total)?;
        let g = self.discriminator.store().collect_grads(&grads, &vars);
        self.d_opt.step(self.discriminator.store_mut(), &g)?;
        if let Some(clip) = &mut self.clip {
            clip.apply(self.discriminator.store_mut());
        }
        self.disc_steps += 1;
        self.clamp_events += tape.clamp_events();
        Ok(DiscStepReport {
            components,
            gamma,
            mean_kappa,
            clamp_events: tape.clamp_events(),
        })
    }

    /// One generator update followed by the EMA update.
    pub fn gen_step(&mut self) -> Result<GenComponents> {
        let b = self.config.batch_size;
        let targets = sample_targets(self.data.labels(), b, self.sigma, &mut self.rng);
        let z = noise(b, self.generator.noise_dim(), &mut self.rng);
        let w = self.config.loss_weights;
        let form = self.config.loss_form;
        let heads = Heads {
            adv: true,
            reg: w.lambda_reg_g > 0.0,
            dre: w.lambda_f_g > 0.0,
        };
        let mut tape = Tape::new();
        let gvars = self.generator.store().bind(&mut tape);
        let dvars = self.discriminator.store().bind(&mut tape);
        let zv = tape.leaf(z);
        let x = self.generator.forward(&mut tape, &gvars, zv, &targets)?;
        let out = self.discriminator.forward(&mut tape, &dvars, x, &targets, heads)?;
        let s = match form {
            AdvForm::Vanilla => tape.sigmoid(out.adv.unwrap())?,
            AdvForm::Hinge => out.adv.unwrap(),
        };
        let adv = losses::gen_adv_loss(&mut tape, s, form)?;
        let reg = match out.y_hat {
            Some(h) => Some(losses::gen_reg_penalty(&mut tape, h, &targets)?),
            None => None,
        };
        let f = match out.dre {
            Some(r) => Some(losses::gen_f_penalty(&mut tape, r)?),
            None => None,
        };
        let total =
            losses::weighted_total(&mut tape, adv, &[(w.lambda_reg_g, reg), (w.lambda_f_g, f)])?;
        let value = |v: Option<crate::tensor::Var>| -> f64 {
            v.map(|v| tape.value(v).data()[0]).unwrap_or(0.0)
        };
        let components = GenComponents {
            adv: value(Some(adv)),
            reg: value(reg),
            f: value(f),
        };
        let grads = tape.backward(total)?;
        let g = self.generator.store().collect_grads(&grads, &gvars);
        self.g_opt.step(self.generator.store_mut(), &g)?;
        self.gen_steps += 1;
        self.clamp_events += tape.clamp_events();
        if self.gen_steps < self.config.ema_start {
            self.ema.shadow = self.generator.store().clone();
        } else {
            self.ema.update(self.generator.store())?;
        }
        Ok(components)
    }

    /// `num_D_steps` discriminator updates, then one generator update.
    pub fn step(&mut self) -> Result<LogRow> {
        let mut last = None;
        for _ in 0..self.config.num_d_steps {
            last = Some(self.disc_step()?);
        }
        let d = last.expect("num_D_steps >= 1");
        let g = self.gen_step()?;
        Ok(LogRow {
            step: self.gen_steps,
            d_adv: d.components.adv,
            d_reg: d.components.reg,
            d_dre: d.components.dre,
            g_adv: g.adv,
            g_reg: g.reg,
            g_f: g.f,
            gamma: d.gamma,
            mean_kappa: d.mean_kappa,
        })
    }

    /// Current state as a checkpoint; `primary` marks the final EMA export.
    pub fn checkpoint(&self, primary: bool) -> Result<Checkpoint> {
        let generator = if primary {
            self.ema_generator()?
        } else {
            self.generator.clone()
        };
        let model = TrainedModel {
            model: self.config.model.clone(),
            dim: self.data.dim(),
            scale: self.data.scale(),
            step: self.gen_steps,
            generator,
            discriminator: Some(self.discriminator.clone()),
        };
        let mut ck = model.to_checkpoint(primary)?;
        if !primary {
            ck.params.extend_prefixed("ema.", &self.ema.shadow)?;
        }
        Ok(ck)
    }

    fn snapshot(&self) -> (ParamStore, ParamStore, ParamStore) {
        (
            self.generator.store().clone(),
            self.discriminator.store().clone(),
            self.ema.shadow.clone(),
        )
    }

    fn restore(&mut self, s: (ParamStore, ParamStore, ParamStore)) {
        *self.generator.store_mut() = s.0;
        *self.discriminator.store_mut() = s.1;
        self.ema.shadow = s.2;
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<LogRow>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Runs the full loop. With `out_dir`, writes `training_log.csv`,
/// `checkpoint_<step>.bin` at the configured cadence and `final_ema.bin`.
///
/// On a numerical failure the parameters from before the failing step are
/// written to `last_good.bin` and the error is returned.
pub fn train(config: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data.clone())?;
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = csv::Writer::from_path(dir.join("training_log.csv"))?;
            w.write_record(LOG_HEADER)?;
            Some(w)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(config.steps / config.log_every + 1);
    for _ in 0..config.steps {
        let before = trainer.snapshot();
        let row = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                if let (true, Some(dir)) = (e.is_numerical(), out_dir) {
                    trainer.restore(before);
                    trainer.checkpoint(false)?.write_atomic(&dir.join("last_good.bin"))?;
                }
                return Err(e);
            }
        };
        if row.step % config.log_every == 0 || row.step == config.steps {
            if let Some(w) = writer.as_mut() {
                w.write_record(row.record())?;
            }
            log.push(row);
        }
        if let (Some(dir), true) = (out_dir, config.checkpoint_every > 0) {
            if row.step % config.checkpoint_every == 0 {
                trainer
                    .checkpoint(false)?
                    .write_atomic(&dir.join(format!("checkpoint_{}.bin", row.step)))?;
            }
        }
    }
    let mut final_checkpoint = None;
    if let Some(dir) = out_dir {
        if let Some(mut w) = writer {
            w.flush()?;
        }
        let path = dir.join("final_ema.bin");
        trainer.checkpoint(true)?.write_atomic(&path)?;
        final_checkpoint = Some(path);
    }
    Ok(TrainOutcome {
        trainer,
        log,
        final_checkpoint,
    })
}

/// A generator (and optionally its discriminator) restored from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: ModelConfig,
    pub dim: usize,
    pub scale: LabelScale,
    pub step: usize,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    step: usize,
    dim: usize,
    raw_min: f64,
    raw_max: f64,
    primary: bool,
    model: ModelConfig,
}

const META_FORMAT: &str = "vccgm-model";

impl TrainedModel {
    pub fn to_checkpoint(&self, primary: bool) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            format: META_FORMAT.into(),
            step: self.step,
            dim: self.dim,
            raw_min: self.scale.raw_min,
            raw_max: self.scale.raw_max,
            primary,
            model: self.model.clone(),
        };
        let mut params = ParamStore::new();
        params.extend_prefixed("g.", self.generator.store())?;
        if let Some(d) = &self.discriminator {
            params.extend_prefixed("d.", d.store())?;
        }
        Ok(Checkpoint {
            meta: serde_json::to_value(meta)?,
            params,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())?;
        if meta.format != META_FORMAT {
            return Err(Error::Format(format!("unexpected checkpoint kind `{}`", meta.format)));
        }
        let generator = Generator::from_store(&meta.model, meta.dim, ck.params.strip_prefix("g."))?;
        let d_store = ck.params.strip_prefix("d.");
        let discriminator = if d_store.is_empty() {
            None
        } else {
            Some(Discriminator::from_store(&meta.model, meta.dim, d_store)?)
        };
        Ok(Self {
            model: meta.model,
            dim: meta.dim,
            scale: LabelScale::new(meta.raw_min, meta.raw_max)?,
            step: meta.step,
            generator,
            discriminator,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_toy_dataset, Family};

    fn toy() -> Dataset {
        make_toy_dataset(11, 6, Family::default(), LabelScale::unit(), 3)
            .unwrap()
            .data
    }

    fn small(mode: VicinityMode) -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 8,
            vicinity_mode: mode,
            n_av: Some(10),
            model: ModelConfig {
                gen_hidden: vec![8],
                disc_hidden: vec![8],
                head_width: 8,
                ..ModelConfig::default()
            },
            ema_start: 1,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let c = TrainConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"num_D_steps\":2"));
        assert!(s.contains("\"sigma\":\"rule_of_thumb\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        let v: TrainConfig = serde_json::from_str(r#"{"sigma": 0.02, "steps": 10}"#).unwrap();
        assert_eq!(v.sigma, SigmaSetting::Value(0.02));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"sigma": "silverman"}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 1}"#).is_err());
        for bad in [
            TrainConfig { steps: 0, ..c.clone() },
            TrainConfig { num_d_steps: 0, ..c.clone() },
            TrainConfig { n_av: None, ..c.clone() },
            TrainConfig { n_av: Some(0), ..c.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        let fixed = TrainConfig {
            vicinity_mode: VicinityMode::Soft,
            n_av: None,
            ..c
        };
        assert!(fixed.validate().is_ok());
    }

    #[test]
    fn targets_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = [0.1, 0.5, 0.999];
        let t = sample_targets(&labels, 100, 0.0, &mut rng);
        assert!(t.iter().all(|y| labels.contains(y)));
        let t = sample_targets(&[0.999], 200, 10.0, &mut rng);
        assert!(t.contains(&1.0) && t.contains(&0.0));
        assert!(t.iter().all(|y| (0.0..=1.0).contains(y)));
    }

    #[test]
    fn steps_touch_only_their_own_parameters() {
        let mut t = Trainer::new(small(VicinityMode::HybridAv), toy()).unwrap();
        let g0 = t.generator().store().clone();
        let d0 = t.discriminator().store().clone();
        t.disc_step().unwrap();
        assert_eq!(t.generator().store(), &g0);
        assert_ne!(t.discriminator().store(), &d0);
        let d1 = t.discriminator().store().clone();
        t.gen_step().unwrap();
        assert_eq!(t.discriminator().store(), &d1);
        assert_ne!(t.generator().store(), &g0);
    }

    #[test]
    fn disc_step_counts_per_gen_step() {
        let mut cfg = small(VicinityMode::SoftAv);
        cfg.num_d_steps = 3;
        let out = train(&cfg, &toy(), None).unwrap();
        assert_eq!(out.trainer.gen_steps(), 3);
        assert_eq!(out.trainer.disc_steps(), 9);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn all_modes_run() {
        for mode in [
            VicinityMode::Hard,
            VicinityMode::Soft,
            VicinityMode::SoftAv,
            VicinityMode::HybridAv,
        ] {
            for form in [AdvForm::Hinge, AdvForm::Vanilla] {
                let mut cfg = small(mode);
                cfg.loss_form = form;
                cfg.fake_labels = FakeLabels::Vicinity;
                let out = train(&cfg, &toy(), None).unwrap();
                assert!(out.log.iter().all(|r| r.d_adv.is_finite() && r.mean_kappa > 0.0));
            }
        }
    }

    #[test]
    fn zero_weight_heads_report_zero() {
        let mut cfg = small(VicinityMode::HybridAv);
        cfg.loss_weights = LossWeights::adversarial_only();
        let out = train(&cfg, &toy(), None).unwrap();
        for r in &out.log {
            assert_eq!((r.d_reg, r.d_dre, r.g_reg, r.g_f), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn writes_artifacts_deterministically() {
        let mut cfg = small(VicinityMode::HybridAv);
        cfg.checkpoint_every = 2;
        cfg.steps = 4;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train(&cfg, &toy(), Some(a.path())).unwrap();
        train(&cfg, &toy(), Some(b.path())).unwrap();
        for f in ["training_log.csv", "checkpoint_2.bin", "checkpoint_4.bin", "final_ema.bin"] {
            let x = fs::read(a.path().join(f)).unwrap();
            assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let log = fs::read_to_string(a.path().join("training_log.csv")).unwrap();
        assert!(log.starts_with("step,L_adv^D,L_reg^D,L_dre^D,L_adv^G,L_reg^G,L_f^G,gamma,mean_kappa\n"));
        assert_eq!(log.lines().count(), 5);
        let m = TrainedModel::load(&a.path().join("final_ema.bin")).unwrap();
        assert_eq!(m.step, 4);
        assert!(m.discriminator.is_some());
    }

    #[test]
    fn ema_matches_closed_form_history() {
        let mut cfg = small(VicinityMode::HybridAv);
        cfg.ema_start = 2;
        cfg.ema_decay = 0.7;
        let mut t = Trainer::new(cfg, toy()).unwrap();
        let mut history = Vec::new();
        for _ in 0..6 {
            t.step().unwrap();
            history.push(t.generator().store().slot(0).data()[0]);
        }
        // shadow copies live before the start step, then averages
        let mut expected = history[0];
        for &w in &history[1..] {
            expected = 0.7 * expected + 0.3 * w;
        }
        let got = t.ema().shadow.slot(0).data()[0];
        assert!((got - expected).abs() < 1e-9);
    }
}
