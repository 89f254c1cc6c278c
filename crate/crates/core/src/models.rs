//! Generator, multi-head discriminator, EMA shadow and surrogate label
//! regressor, all as small dense networks on a [`Tape`].

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Width of [`label_features`].
pub const LABEL_FEATURES: usize = 3;

/// `[y, sin 2πy, cos 2πy]` per label, as an `n x 3` tensor.
pub fn label_features(y: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(y.len() * LABEL_FEATURES);
    for &v in y {
        data.extend_from_slice(&[v, (TAU * v).sin(), (TAU * v).cos()]);
    }
    Tensor::new(y.len(), LABEL_FEATURES, data).expect("consistent length")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub noise_dim: usize,
    pub embed_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub head_width: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            noise_dim: 8,
            embed_dim: 16,
            gen_hidden: vec![64, 64],
            disc_hidden: vec![64, 64],
            head_width: 64,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = self
            .gen_hidden
            .iter()
            .chain(&self.disc_hidden)
            .chain([&self.noise_dim, &self.embed_dim, &self.head_width]);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter("layer widths must be positive".into()));
        }
        if self.disc_hidden.is_empty() {
            return Err(Error::InvalidParameter(
                "discriminator trunk needs at least one layer".into(),
            ));
        }
        Ok(())
    }

    fn trunk_width(&self, input: usize) -> usize {
        *self.disc_hidden.last().unwrap_or(&input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: ModelConfig,
    out_dim: usize,
    store: ParamStore,
    embed: Linear,
    layers: Vec<Linear>,
}

impl Generator {
    pub fn new(config: &ModelConfig, out_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = Linear::init(&mut store, "embed", LABEL_FEATURES, config.embed_dim, &mut rng)?;
        let mut layers = Vec::new();
        let mut width = config.embed_dim + config.noise_dim;
        for (i, &h) in config.gen_hidden.iter().enumerate() {
            layers.push(Linear::init(&mut store, &format!("hidden{i}"), width, h, &mut rng)?);
            width = h;
        }
        layers.push(Linear::init(&mut store, "out", width, out_dim, &mut rng)?);
        Ok(Self {
            config: config.clone(),
            out_dim,
            store,
            embed,
            layers,
        })
    }

    /// Rebuilds a generator around parameters loaded from a checkpoint.
    pub fn from_store(config: &ModelConfig, out_dim: usize, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let embed = Linear::find(&store, "embed", LABEL_FEATURES, config.embed_dim)?;
        let mut layers = Vec::new();
        let mut width = config.embed_dim + config.noise_dim;
        for (i, &h) in config.gen_hidden.iter().enumerate() {
            layers.push(Linear::find(&store, &format!("hidden{i}"), width, h)?);
            width = h;
        }
        layers.push(Linear::find(&store, "out", width, out_dim)?);
        Ok(Self {
            config: config.clone(),
            out_dim,
            store,
            embed,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.config.noise_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Records `G(z, y)` on `tape`; `vars` come from binding this store.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var, y: &[f64]) -> Result<Var> {
        let (rows, cols) = tape.value(z).shape();
        if rows != y.len() || cols != self.config.noise_dim {
            return Err(Error::Shape(format!(
                "generator got noise {:?} for {} labels (noise dim {})",
                (rows, cols),
                y.len(),
                self.config.noise_dim
            )));
        }
        let feats = tape.leaf(label_features(y));
        let e = self.embed.forward(tape, vars, feats)?;
        let mut h = tape.concat_cols(e, z)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, vars, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Plain evaluation without gradients.
    pub fn sample(&self, z: &Tensor, y: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let out = self.forward(&mut tape, &vars, zv, y)?;
        Ok(tape.value(out).clone())
    }
}

/// Which discriminator heads to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub adv: bool,
    pub reg: bool,
    pub dre: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        adv: true,
        reg: true,
        dre: true,
    };
}

#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// Shared trunk feature `h(x)`.
    pub h: Var,
    pub adv: Option<Var>,
    pub y_hat: Option<Var>,
    /// Positive density-ratio estimate.
    pub dre: Option<Var>,
}

/// MLP trunk on `x` with three heads: projection-conditioned adversarial
/// score, two-layer label regressor and three-layer density-ratio estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: ModelConfig,
    in_dim: usize,
    store: ParamStore,
    trunk: Vec<Linear>,
    adv: Linear,
    proj: Linear,
    reg: [Linear; 2],
    dre: [Linear; 3],
}

impl Discriminator {
    pub fn new(config: &ModelConfig, in_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let mut trunk = Vec::new();
        let mut width = in_dim;
        for (i, &h) in config.disc_hidden.iter().enumerate() {
            trunk.push(Linear::init(&mut s, &format!("trunk{i}"), width, h, &mut rng)?);
            width = h;
        }
        let hw = config.head_width;
        let adv = Linear::init(&mut s, "adv", width, 1, &mut rng)?;
        let proj = Linear::init(&mut s, "proj", LABEL_FEATURES, width, &mut rng)?;
        let reg = [
            Linear::init(&mut s, "reg0", width, hw, &mut rng)?,
            Linear::init(&mut s, "reg1", hw, 1, &mut rng)?,
        ];
        let dre = [
            Linear::init(&mut s, "dre0", width + LABEL_FEATURES, hw, &mut rng)?,
            Linear::init(&mut s, "dre1", hw, hw, &mut rng)?,
            Linear::init(&mut s, "dre2", hw, 1, &mut rng)?,
        ];
        Ok(Self {
            config: config.clone(),
            in_dim,
            store: s,
            trunk,
            adv,
            proj,
            reg,
            dre,
        })
    }

    pub fn from_store(config: &ModelConfig, in_dim: usize, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut trunk = Vec::new();
        let mut width = in_dim;
        for (i, &h) in config.disc_hidden.iter().enumerate() {
            trunk.push(Linear::find(&store, &format!("trunk{i}"), width, h)?);
            width = h;
        }
        let hw = config.head_width;
        Ok(Self {
            adv: Linear::find(&store, "adv", width, 1)?,
            proj: Linear::find(&store, "proj", LABEL_FEATURES, width)?,
            reg: [
                Linear::find(&store, "reg0", width, hw)?,
                Linear::find(&store, "reg1", hw, 1)?,
            ],
            dre: [
                Linear::find(&store, "dre0", width + LABEL_FEATURES, hw)?,
                Linear::find(&store, "dre1", hw, hw)?,
                Linear::find(&store, "dre2", hw, 1)?,
            ],
            config: config.clone(),
            in_dim,
            store,
            trunk,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn feature_width(&self) -> usize {
        self.config.trunk_width(self.in_dim)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Weight slots of every layer, for norm clipping.
    pub fn weight_slots(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.trunk.iter().map(|l| l.w).collect();
        out.extend([self.adv.w, self.proj.w]);
        out.extend(self.reg.iter().map(|l| l.w));
        out.extend(self.dre.iter().map(|l| l.w));
        out
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        y: &[f64],
        heads: Heads,
    ) -> Result<DiscOutput> {
        let (rows, cols) = tape.value(x).shape();
        if rows != y.len() || cols != self.in_dim {
            return Err(Error::Shape(format!(
                "discriminator got x {:?} for {} labels (dim {})",
                (rows, cols),
                y.len(),
                self.in_dim
            )));
        }
        let mut h = x;
        for layer in &self.trunk {
            h = layer.forward(tape, vars, h)?;
            h = tape.leaky_relu(h, self.config.leaky_slope)?;
        }
        let feats = if heads.adv || heads.dre {
            Some(tape.leaf(label_features(y)))
        } else {
            None
        };
        let adv = if heads.adv {
            let base = self.adv.forward(tape, vars, h)?;
            let e = self.proj.forward(tape, vars, feats.unwrap())?;
            let eh = tape.mul(e, h)?;
            let p = tape.sum_cols(eh)?;
            Some(tape.add(base, p)?)
        } else {
            None
        };
        let y_hat = if heads.reg {
            let r = self.reg[0].forward(tape, vars, h)?;
            let r = tape.relu(r)?;
            Some(self.reg[1].forward(tape, vars, r)?)
        } else {
            None
        };
        let dre = if heads.dre {
            let input = tape.concat_cols(h, feats.unwrap())?;
            let r = self.dre[0].forward(tape, vars, input)?;
            let r = tape.relu(r)?;
            let r = self.dre[1].forward(tape, vars, r)?;
            let r = tape.relu(r)?;
            let r = self.dre[2].forward(tape, vars, r)?;
            Some(tape.softplus(r)?)
        } else {
            None
        };
        Ok(DiscOutput { h, adv, y_hat, dre })
    }

    /// Evaluates the requested heads without gradients; absent heads are empty.
    pub fn evaluate(&self, x: &Tensor, y: &[f64], heads: Heads) -> Result<DiscValues> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &vars, xv, y, heads)?;
        let col = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec()).unwrap_or_default();
        Ok(DiscValues {
            adv: col(out.adv),
            y_hat: col(out.y_hat),
            dre: col(out.dre),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiscValues {
    pub adv: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub dre: Vec<f64>,
}

/// Bounds each weight matrix's largest singular value using one power
/// iteration per call with persistent vectors.
#[derive(Clone, Debug)]
pub struct SpectralClip {
    max_sigma: f64,
    slots: Vec<usize>,
    u: Vec<Vec<f64>>,
}

impl SpectralClip {
    pub fn new(store: &ParamStore, slots: Vec<usize>, max_sigma: f64) -> Self {
        let u = slots
            .iter()
            .map(|&s| {
                let n = store.slot(s).cols();
                vec![1.0 / (n as f64).sqrt(); n]
            })
            .collect();
        Self {
            max_sigma,
            slots,
            u,
        }
    }

    /// Rescales any weight whose singular-value estimate exceeds the bound.
    pub fn apply(&mut self, store: &mut ParamStore) {
        for (k, &slot) in self.slots.iter().enumerate() {
            let w = store.slot_mut(slot);
            let (rows, cols) = w.shape();
            let u = &mut self.u[k];
            let mut v = vec![0.0; rows];
            for (r, vr) in v.iter_mut().enumerate() {
                *vr = w.row(r).iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            }
            let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|a| *a /= vn);
            let mut nu = vec![0.0; cols];
            for (r, vr) in v.iter().enumerate() {
                for (c, x) in nu.iter_mut().enumerate() {
                    *x += w.get(r, c) * vr;
                }
            }
            let sigma = nu.iter().map(|a| a * a).sum::<f64>().sqrt();
            if sigma > 1e-12 {
                for (a, b) in u.iter_mut().zip(&nu) {
                    *a = b / sigma;
                }
            }
            if sigma > self.max_sigma {
                let f = self.max_sigma / sigma;
                w.data_mut().iter_mut().for_each(|a| *a *= f);
            }
        }
    }
}

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub shadow: ParamStore,
    pub decay: f64,
}

impl Ema {
    pub fn new(live: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidParameter(format!("EMA decay {decay}")));
        }
        Ok(Self {
            shadow: live.clone(),
            decay,
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`.
    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        if !self.shadow.same_layout(live) {
            return Err(Error::Shape("EMA shadow and live parameters differ".into()));
        }
        let b = self.decay;
        for (s, l) in self.shadow.tensors_mut().iter_mut().zip(live.tensors()) {
            for (a, v) in s.data_mut().iter_mut().zip(l.data()) {
                *a = b * *a + (1.0 - b) * v;
            }
        }
        Ok(())
    }
}

/// Maps features to a normalized label estimate.
pub trait LabelRegressor {
    fn predict(&self, x: &Tensor) -> Result<Vec<f64>>;
}

/// Small MLP regressor `x -> y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    in_dim: usize,
    hidden: Vec<usize>,
    store: ParamStore,
    layers: Vec<Linear>,
}

impl Regressor {
    pub fn new(in_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut width = in_dim;
        for (i, &h) in hidden.iter().chain(std::iter::once(&1)).enumerate() {
            layers.push(Linear::init(&mut store, &format!("layer{i}"), width, h, &mut rng)?);
            width = h;
        }
        Ok(Self {
            in_dim,
            hidden: hidden.to_vec(),
            store,
            layers,
        })
    }

    pub fn from_store(in_dim: usize, hidden: &[usize], store: ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = in_dim;
        for (i, &h) in hidden.iter().chain(std::iter::once(&1)).enumerate() {
            layers.push(Linear::find(&store, &format!("layer{i}"), width, h)?);
            width = h;
        }
        Ok(Self {
            in_dim,
            hidden: hidden.to_vec(),
            store,
            layers,
        })
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, vars, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

impl LabelRegressor for Regressor {
    fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.in_dim {
            return Err(Error::Shape(format!(
                "regressor expects {} features, got {}",
                self.in_dim,
                x.cols()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop once validation MAE (normalized units) falls below this.
    pub target_mae: f64,
    pub validation_fraction: f64,
    pub check_every: usize,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            max_steps: 6000,
            batch_size: 128,
            learning_rate: 2e-3,
            target_mae: 0.02,
            validation_fraction: 0.1,
            check_every: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub steps: usize,
    pub validation_mae: f64,
    pub reached_target: bool,
}

/// Fits a [`Regressor`] by mean squared error with Adam.
///
/// Falling short of `target_mae` within `max_steps` is reported, not fatal.
pub fn train_surrogate_regressor(
    data: &Dataset,
    config: &SurrogateConfig,
) -> Result<(Regressor, SurrogateReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64 * config.validation_fraction).round() as usize)
        .min(data.len() - 1);
    let (val, train) = if n_val == 0 {
        (order.clone(), order)
    } else {
        let train = order.split_off(n_val);
        (order, train)
    };
    let val_x = data.features_of(&val);
    let val_y: Vec<f64> = val.iter().map(|&i| data.labels()[i]).collect();

    let mut model = Regressor::new(data.dim(), &config.hidden, config.seed ^ 0x5eed)?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), config.learning_rate, &model.store)?;
    let mut report = SurrogateReport {
        steps: 0,
        validation_mae: f64::INFINITY,
        reached_target: false,
    };
    let validate = |m: &Regressor| -> Result<f64> {
        let p = m.predict(&val_x)?;
        Ok(p.iter().zip(&val_y).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
    };
    let batch = config.batch_size.min(train.len()).max(1);
    for step in 1..=config.max_steps {
        let rows: Vec<usize> = (0..batch)
            .map(|_| train[rand::Rng::random_range(&mut rng, 0..train.len())])
            .collect();
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape);
        let x = tape.leaf(data.features_of(&rows));
        let target = tape.leaf(Tensor::column(rows.iter().map(|&i| data.labels()[i]).collect()));
        let pred = model.forward(&mut tape, &vars, x)?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff)?;
        let loss = tape.mean(sq)?;
        let grads = tape.backward(loss)?;
        let g = model.store.collect_grads(&grads, &vars);
        opt.step(&mut model.store, &g)?;
        report.steps = step;
        if step % config.check_every == 0 || step == config.max_steps {
            report.validation_mae = validate(&model)?;
            if report.validation_mae < config.target_mae {
                report.reached_target = true;
                break;
            }
        }
    }
    if config.max_steps == 0 {
        report.validation_mae = validate(&model)?;
        report.reached_target = report.validation_mae < config.target_mae;
    }
    Ok((model, report))
}
