//! Sliding Fréchet distance, label score, diversity and density-ratio
//! diagnostics, all computed in data space.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::label_index::LabelScale;
use crate::models::{Discriminator, Generator, Heads, LabelRegressor};
use crate::optim::{Optimizer, OptimizerKind};
use crate::synth::Family;
use crate::tensor::{Tape, Tensor};
use crate::losses;

/// Sample mean and covariance (`n - 1` denominator) of the rows of `x`.
pub fn moments(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            requested: 2,
            available: n,
        });
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = DVector::from_iterator(d, m.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn psd_sqrt(c: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if c.nrows() != c.ncols() {
        return Err(Error::InvalidCovariance(format!("{what} is not square")));
    }
    let sym = (c + c.transpose()) * 0.5;
    if (c - &sym).amax() > 1e-9 * c.amax().max(1.0) {
        return Err(Error::InvalidCovariance(format!("{what} is not symmetric")));
    }
    let eig = SymmetricEigen::new(sym);
    let tol = 1e-10 * eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -tol || !l.is_finite()) {
        return Err(Error::InvalidCovariance(format!(
            "{what} has a negative eigenvalue"
        )));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `|μ1 - μ2|² + tr(Σ1 + Σ2 - 2 (Σ1 Σ2)^½)`.
///
/// The trace of the square root is taken as `tr (√Σ1 Σ2 √Σ1)^½`, which has
/// the same eigenvalues and stays symmetric.
pub fn frechet_gaussian(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::Shape("Fréchet distance inputs disagree in dimension".into()));
    }
    let s1 = psd_sqrt(cov1, "first covariance")?;
    psd_sqrt(cov2, "second covariance")?;
    let inner = &s1 * cov2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = mu1 - mu2;
    Ok((diff.dot(&diff) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Conditional Gaussian with isotropic covariance `std(y)² I`.
pub trait GaussianConditional: Sync {
    fn dim(&self) -> usize;
    fn mean_at(&self, y: f64) -> Vec<f64>;
    fn std_at(&self, y: f64) -> f64;

    fn log_density(&self, x: &[f64], y: f64) -> f64 {
        let s = self.std_at(y);
        let sq: f64 = self
            .mean_at(y)
            .iter()
            .zip(x)
            .map(|(m, v)| (v - m).powi(2))
            .sum();
        -0.5 * sq / (s * s) - self.dim() as f64 * (s.ln() + 0.5 * TAU.ln())
    }

    fn draw(&self, y: f64, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let d = self.dim();
        let m = self.mean_at(y);
        let s = self.std_at(y);
        Tensor::from_fn(n, d, |_, c| {
            let z: f64 = StandardNormal.sample(rng);
            m[c] + s * z
        })
    }
}

impl GaussianConditional for Family {
    fn dim(&self) -> usize {
        Family::dim(self)
    }
    fn mean_at(&self, y: f64) -> Vec<f64> {
        self.mean(y)
    }
    fn std_at(&self, y: f64) -> f64 {
        self.std(y)
    }
}

/// A family with its mean translated by a fixed vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Shifted {
    pub base: Family,
    pub shift: Vec<f64>,
}

impl GaussianConditional for Shifted {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn mean_at(&self, y: f64) -> Vec<f64> {
        self.base.mean(y).iter().zip(&self.shift).map(|(a, b)| a + b).collect()
    }
    fn std_at(&self, y: f64) -> f64 {
        self.base.std(y)
    }
}

/// Anything that draws `n` feature rows conditioned on a normalized label.
pub trait ConditionalSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, y: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

/// Samples `G(z, y)` with `z ~ N(0, I)`.
pub struct GeneratorSampler<'a>(pub &'a Generator);

impl ConditionalSampler for GeneratorSampler<'_> {
    fn dim(&self) -> usize {
        self.0.out_dim()
    }
    fn sample(&self, y: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let z = Tensor::from_fn(n, self.0.noise_dim(), |_, _| StandardNormal.sample(rng));
        self.0.sample(&z, &vec![y; n])
    }
}

/// Samples the true conditional of a known family.
pub struct OracleSampler<F>(pub F);

impl<F: GaussianConditional> ConditionalSampler for OracleSampler<F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn sample(&self, y: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.0.draw(y, n, rng))
    }
}

/// Ignores the label and always returns the same point.
pub struct ConstantSampler(pub Vec<f64>);

impl ConditionalSampler for ConstantSampler {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn sample(&self, _y: f64, n: usize, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(Tensor::from_fn(n, self.0.len(), |_, c| self.0[c]))
    }
}

/// Wraps a sampler so it always conditions on `label`.
pub struct FixedLabelSampler<S> {
    pub inner: S,
    pub label: f64,
}

impl<S: ConditionalSampler> ConditionalSampler for FixedLabelSampler<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn sample(&self, _y: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.inner.sample(self.label, n, rng)
    }
}

/// Posterior-mean label under a known family and a uniform prior on a grid.
pub struct OracleRegressor<F> {
    pub family: F,
    pub grid: Vec<f64>,
}

impl<F: GaussianConditional> OracleRegressor<F> {
    pub fn new(family: F, grid_points: usize) -> Self {
        let n = grid_points.max(2);
        let grid = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        Self { family, grid }
    }
}

impl<F: GaussianConditional> LabelRegressor for OracleRegressor<F> {
    fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.family.dim() {
            return Err(Error::Shape("oracle regressor dimension mismatch".into()));
        }
        Ok((0..x.rows())
            .map(|r| {
                let logs: Vec<f64> = self
                    .grid
                    .iter()
                    .map(|&y| self.family.log_density(x.row(r), y))
                    .collect();
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let (mut num, mut den) = (0.0, 0.0);
                for (&y, l) in self.grid.iter().zip(&logs) {
                    let w = (l - top).exp();
                    num += w * y;
                    den += w;
                }
                num / den
            })
            .collect())
    }
}

/// `count` evenly spaced normalized centers on `[0, 1]`.
pub fn default_centers(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Per-center generator RNG: stream `i` of the seed, so results do not
/// depend on evaluation order or thread count.
fn center_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn fakes_at<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    centers: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    centers
        .par_iter()
        .enumerate()
        .map(|(i, &c)| sampler.sample(c, n, &mut center_rng(seed, i)))
        .collect()
}

/// Rows of `data` with `|y - center| <= radius` (normalized units).
pub fn window_rows(data: &Dataset, center: f64, radius: f64) -> Vec<usize> {
    data.labels()
        .iter()
        .enumerate()
        .filter(|(_, &y)| (y - center).abs() <= radius + 1e-12)
        .map(|(i, _)| i)
        .collect()
}

fn fd_against_window(data: &Dataset, center: f64, radius: f64, fakes: &Tensor) -> Result<f64> {
    let rows = window_rows(data, center, radius);
    let needed = data.dim() + 1;
    if rows.len() < needed {
        return Err(Error::WindowTooSparse {
            center,
            found: rows.len(),
            needed,
        });
    }
    let (mr, cr) = moments(&data.features_of(&rows))?;
    let (mf, cf) = moments(fakes)?;
    frechet_gaussian(&mr, &cr, &mf, &cf)
}

/// Fréchet distance per center between windowed reals and `n` fakes.
/// Under-populated windows yield `WindowTooSparse` for that center.
pub fn sliding_fd<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    data: &Dataset,
    centers: &[f64],
    radius: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<Result<f64>>> {
    let fakes = fakes_at(sampler, centers, n, seed)?;
    Ok(centers
        .iter()
        .zip(&fakes)
        .map(|(&c, f)| fd_against_window(data, c, radius, f))
        .collect())
}

fn label_error(reg: &dyn LabelRegressor, fakes: &Tensor, center: f64, scale: LabelScale) -> Result<f64> {
    let p = reg.predict(fakes)?;
    Ok(p.iter().map(|v| (v - center).abs()).sum::<f64>() / p.len() as f64 * scale.span())
}

/// Mean `|regressor(x) - center|` over fakes, in raw label units.
pub fn label_score<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    regressor: &dyn LabelRegressor,
    centers: &[f64],
    n: usize,
    seed: u64,
    scale: LabelScale,
) -> Result<Vec<f64>> {
    let fakes = fakes_at(sampler, centers, n, seed)?;
    centers
        .iter()
        .zip(&fakes)
        .map(|(&c, f)| label_error(regressor, f, c, scale))
        .collect()
}

/// Mean pairwise Euclidean distance among the rows of `x`.
pub fn mean_pairwise_distance(x: &Tensor) -> f64 {
    let n = x.rows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let a = x.row(i);
        for j in i + 1..n {
            total += a
                .iter()
                .zip(x.row(j))
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Mean pairwise distance among `n` fakes per center.
pub fn diversity<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    centers: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidParameter("diversity needs at least 2 samples".into()));
    }
    Ok(fakes_at(sampler, centers, n, seed)?
        .iter()
        .map(mean_pairwise_distance)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub centers: usize,
    /// Window half-width in normalized units; `None` means `2 / centers`.
    pub window_radius: Option<f64>,
    pub n_fake_per_center: usize,
    /// Diversity uses at most this many of each center's fakes.
    pub diversity_cap: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            centers: 101,
            window_radius: None,
            n_fake_per_center: 1000,
            diversity_cap: 500,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn radius(&self) -> f64 {
        self.window_radius
            .unwrap_or(2.0 / self.centers.max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterMetrics {
    /// Center in raw label units.
    pub center: f64,
    /// `None` when the real window was too sparse.
    pub fd: Option<f64>,
    pub label_score: f64,
    pub diversity: f64,
    pub n_real_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<CenterMetrics>,
    pub mean_fd: f64,
    pub mean_label_score: f64,
    pub mean_diversity: f64,
    pub skipped_centers: usize,
    pub window_radius: f64,
    pub n_fake_per_center: usize,
}

/// Computes every per-center metric from one shared set of fakes.
pub fn evaluate<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    data: &Dataset,
    regressor: &dyn LabelRegressor,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if config.n_fake_per_center < 2 {
        return Err(Error::InvalidParameter("need at least 2 fakes per center".into()));
    }
    if sampler.dim() != data.dim() {
        return Err(Error::Shape(format!(
            "sampler emits dimension {}, data has {}",
            sampler.dim(),
            data.dim()
        )));
    }
    let centers = default_centers(config.centers);
    let radius = config.radius();
    let scale = data.scale();
    let fakes = fakes_at(sampler, &centers, config.n_fake_per_center, config.seed)?;
    let rows = centers
        .iter()
        .zip(&fakes)
        .map(|(&c, f)| -> Result<CenterMetrics> {
            let fd = match fd_against_window(data, c, radius, f) {
                Ok(v) => Some(v),
                Err(Error::WindowTooSparse { .. }) => None,
                Err(e) => return Err(e),
            };
            let keep = f.rows().min(config.diversity_cap.max(2));
            let sub = f.gather_rows(&(0..keep).collect::<Vec<_>>());
            Ok(CenterMetrics {
                center: scale.to_raw(c),
                fd,
                label_score: label_error(regressor, f, c, scale)?,
                diversity: mean_pairwise_distance(&sub),
                n_real_window: window_rows(data, c, radius).len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fds: Vec<f64> = rows.iter().filter_map(|r| r.fd).collect();
    let mean = |v: &mut dyn Iterator<Item = f64>, n: usize| v.sum::<f64>() / n.max(1) as f64;
    Ok(EvalReport {
        mean_fd: if fds.is_empty() {
            f64::NAN
        } else {
            mean(&mut fds.iter().cloned(), fds.len())
        },
        mean_label_score: mean(&mut rows.iter().map(|r| r.label_score), rows.len()),
        mean_diversity: mean(&mut rows.iter().map(|r| r.diversity), rows.len()),
        skipped_centers: rows.len() - fds.len(),
        window_radius: radius,
        n_fake_per_center: config.n_fake_per_center,
        rows,
    })
}

impl EvalReport {
    /// Writes `center,fd,label_score,diversity,n_real_window`; skipped
    /// centers have an empty `fd` field.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["center", "fd", "label_score", "diversity", "n_real_window"])?;
        for r in &self.rows {
            w.write_record([
                r.center.to_string(),
                r.fd.map(|v| v.to_string()).unwrap_or_default(),
                r.label_score.to_string(),
                r.diversity.to_string(),
                r.n_real_window.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Vec<CenterMetrics>> {
        let mut r = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number in report column {i}")))
            };
            let fd = match rec.get(1) {
                Some("") | None => None,
                Some(_) => Some(num(1)?),
            };
            out.push(CenterMetrics {
                center: num(0)?,
                fd,
                label_score: num(2)?,
                diversity: num(3)?,
                n_real_window: num(4)? as usize,
            });
        }
        Ok(out)
    }
}

/// Fractions of test points whose estimated ratio is within a factor of the
/// analytic one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DreCoverage {
    pub within_1_5: f64,
    pub within_2: f64,
    pub n_test: usize,
}

/// Compares the discriminator's density-ratio head with the analytic
/// `p_r(x|y) / p_g(x|y)` at `n_test` points drawn from `p_g` at labels
/// uniform on `labels`.
pub fn dre_diagnostic<R: GaussianConditional, G: GaussianConditional>(
    disc: &Discriminator,
    p_r: &R,
    p_g: &G,
    labels: &[f64],
    n_test: usize,
    seed: u64,
) -> Result<DreCoverage> {
    if labels.is_empty() || n_test == 0 {
        return Err(Error::InvalidParameter("need labels and test points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys: Vec<f64> = (0..n_test).map(|_| labels[rng.random_range(0..labels.len())]).collect();
    let mut data = Vec::with_capacity(n_test * p_g.dim());
    for &y in &ys {
        data.extend_from_slice(p_g.draw(y, 1, &mut rng).data());
    }
    let x = Tensor::new(n_test, p_g.dim(), data)?;
    let est = disc
        .evaluate(
            &x,
            &ys,
            Heads {
                adv: false,
                reg: false,
                dre: true,
            },
        )?
        .dre;
    let (mut c15, mut c2) = (0usize, 0usize);
    for (i, &e) in est.iter().enumerate() {
        let truth = (p_r.log_density(x.row(i), ys[i]) - p_g.log_density(x.row(i), ys[i])).exp();
        let factor = (e / truth).max(truth / e);
        c15 += (factor <= 1.5) as usize;
        c2 += (factor <= 2.0) as usize;
    }
    Ok(DreCoverage {
        within_1_5: c15 as f64 / n_test as f64,
        within_2: c2 as f64 / n_test as f64,
        n_test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DreFitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_dre: f64,
    pub seed: u64,
}

impl Default for DreFitConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 256,
            learning_rate: 1e-3,
            lambda_dre: 1e-2,
            seed: 0,
        }
    }
}

/// Trains only the trunk and density-ratio head of `disc` on the penalized
/// softplus objective with reals from `p_r` and fakes from `p_g`.
pub fn fit_dre_head<R: GaussianConditional, G: GaussianConditional>(
    disc: &mut Discriminator,
    p_r: &R,
    p_g: &G,
    labels: &[f64],
    config: &DreFitConfig,
) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(OptimizerKind::adam(), config.learning_rate, disc.store())?;
    let heads = Heads {
        adv: false,
        reg: false,
        dre: true,
    };
    let b = config.batch_size;
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let ys: Vec<f64> = (0..b).map(|_| labels[rng.random_range(0..labels.len())]).collect();
        let draw = |f: &dyn Fn(f64, &mut ChaCha8Rng) -> Tensor, rng: &mut ChaCha8Rng| {
            let mut data = Vec::with_capacity(b * disc.in_dim());
            for &y in &ys {
                data.extend_from_slice(f(y, rng).data());
            }
            Tensor::new(b, disc.in_dim(), data)
        };
        let xr = draw(&|y, r| p_r.draw(y, 1, r), &mut rng)?;
        let xg = draw(&|y, r| p_g.draw(y, 1, r), &mut rng)?;
        let mut tape = Tape::new();
        let vars = disc.store().bind(&mut tape);
        let xr = tape.leaf(xr);
        let xg = tape.leaf(xg);
        let real = disc.forward(&mut tape, &vars, xr, &ys, heads)?;
        let fake = disc.forward(&mut tape, &vars, xg, &ys, heads)?;
        let loss = losses::dre_loss(&mut tape, fake.dre.unwrap(), real.dre.unwrap(), config.lambda_dre)?;
        history.push(tape.value(loss).item()?);
        let grads = tape.backward(loss)?;
        let g = disc.store().collect_grads(&grads, &vars);
        opt.step(disc.store_mut(), &g)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_index::LabelScale;
    use crate::models::ModelConfig;
    use crate::synth::make_toy_dataset;

    /// Independent check of `tr (Σ1 Σ2)^½` by Denman–Beavers iteration on
    /// the non-symmetric product.
    fn denman_beavers_trace(a: &DMatrix<f64>) -> f64 {
        let n = a.nrows();
        let mut y = a.clone();
        let mut z = DMatrix::identity(n, n);
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            let ny = (&y + zi) * 0.5;
            let nz = (&z + yi) * 0.5;
            y = ny;
            z = nz;
        }
        y.trace()
    }

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn frechet_examples() {
        let z1 = DVector::from_vec(vec![0.0]);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(frechet_gaussian(&z1, &one, &z1, &one).unwrap(), 0.0);
        let s = DVector::from_vec(vec![1.0]);
        assert!((frechet_gaussian(&z1, &one, &s, &one).unwrap() - 1.0).abs() < 1e-12);
        let z2 = DVector::zeros(2);
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        assert!((frechet_gaussian(&z2, &a, &z2, &b).unwrap() - 2.0).abs() < 1e-8);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            frechet_gaussian(&z2, &a, &z2, &bad),
            Err(Error::InvalidCovariance(_))
        ));
    }

    #[test]
    fn frechet_matches_iterative_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 1..=4 {
            for _ in 0..10 {
                let c1 = random_spd(d, &mut rng);
                let c2 = random_spd(d, &mut rng);
                let m1 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
                let m2 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
                let fd = frechet_gaussian(&m1, &c1, &m2, &c2).unwrap();
                let oracle = (&m1 - &m2).norm_squared() + c1.trace() + c2.trace()
                    - 2.0 * denman_beavers_trace(&(&c1 * &c2));
                assert!((fd - oracle).abs() < 1e-8, "{fd} vs {oracle}");
                let back = frechet_gaussian(&m2, &c2, &m1, &c1).unwrap();
                assert!((fd - back).abs() < 1e-9);
                assert!(frechet_gaussian(&m1, &c1, &m1, &c1).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn oracle_generator_fd_is_small() {
        let family = Family::default();
        let data = make_toy_dataset(101, 200, family, LabelScale::unit(), 1).unwrap().data;
        let centers = [0.2, 0.5, 0.8];
        let fds = sliding_fd(&OracleSampler(family), &data, &centers, 0.0, 10_000, 3).unwrap();
        for fd in fds {
            assert!(fd.unwrap() < 0.05);
        }
    }

    #[test]
    fn constant_generator_metrics() {
        let family = Family::default();
        let data = make_toy_dataset(21, 50, family, LabelScale::unit(), 1).unwrap().data;
        let s = ConstantSampler(vec![0.3, -0.2]);
        let div = diversity(&s, &[0.0, 0.5, 1.0], 50, 0).unwrap();
        assert_eq!(div, vec![0.0; 3]);
        let fds = sliding_fd(&s, &data, &[0.5], 0.0, 50, 0).unwrap();
        let rows = window_rows(&data, 0.5, 0.0);
        let (_, cov) = moments(&data.features_of(&rows)).unwrap();
        assert!(fds[0].as_ref().unwrap() >= &cov.trace());
    }

    #[test]
    fn sparse_window_is_flagged() {
        let data = make_toy_dataset(3, 2, Family::default(), LabelScale::unit(), 1).unwrap().data;
        let r = sliding_fd(&ConstantSampler(vec![0.0, 0.0]), &data, &[0.5], 0.01, 5, 0).unwrap();
        assert!(matches!(r[0], Err(Error::WindowTooSparse { found: 2, needed: 3, .. })));
    }

    #[test]
    fn full_window_gives_identical_real_moments() {
        let family = Family::default();
        let data = make_toy_dataset(11, 10, family, LabelScale::unit(), 2).unwrap().data;
        let s = ConstantSampler(vec![0.0, 0.0]);
        let fds = sliding_fd(&s, &data, &[0.0, 0.4, 1.0], 1.0, 10, 0).unwrap();
        let v: Vec<f64> = fds.into_iter().map(|r| r.unwrap()).collect();
        assert!((v[0] - v[1]).abs() < 1e-12 && (v[1] - v[2]).abs() < 1e-12);
    }

    #[test]
    fn diversity_matches_analytic_mean_distance() {
        // X - X' ~ N(0, 2 s² I) in 2-d, so |X - X'| is Rayleigh with scale s√2
        let family = Family::default();
        let y = 0.4;
        let s = family.std(y);
        let rayleigh_mean = (2.0f64).sqrt() * s * (std::f64::consts::PI / 2.0).sqrt();
        let d = diversity(&OracleSampler(family), &[y], 2000, 5).unwrap()[0];
        assert!((d / rayleigh_mean - 1.0).abs() < 0.03, "{d} vs {rayleigh_mean}");
        let wide = Family::Circle {
            base_std: 0.1,
            std_slope: 0.1,
        };
        let d2 = diversity(&OracleSampler(wide), &[y], 2000, 5).unwrap()[0];
        assert!((d2 / d - 2.0).abs() < 0.05);
        let doubled_cov = Family::Circle {
            base_std: 0.05 * 2f64.sqrt(),
            std_slope: 0.05 * 2f64.sqrt(),
        };
        let d3 = diversity(&OracleSampler(doubled_cov), &[y], 2000, 5).unwrap()[0];
        assert!((d3 / d - 2f64.sqrt()).abs() < 0.05);
    }

    #[test]
    fn label_score_behaviour() {
        let line = Family::Line {
            intercept: 0.0,
            slope: 1.0,
            base_std: 0.01,
            std_slope: 0.0,
        };
        let reg = OracleRegressor::new(line, 401);
        let scale = LabelScale::new(0.0, 90.0).unwrap();
        let centers = default_centers(11);
        let good = label_score(&OracleSampler(line), &reg, &centers, 400, 0, scale).unwrap();
        assert!(good.iter().all(|v| *v < 0.02 * 90.0));
        let stuck = FixedLabelSampler {
            inner: OracleSampler(line),
            label: 0.3,
        };
        let bad = label_score(&stuck, &reg, &centers, 400, 0, scale).unwrap();
        for (c, v) in centers.iter().zip(&bad) {
            let expected = (c - 0.3f64).abs() * 90.0;
            assert!((v - expected).abs() < 0.02 * 90.0, "{c}: {v} vs {expected}");
        }
        assert!(bad[10] > bad[5] && bad[0] > bad[5]);
        assert!(bad[3] < 0.02 * 90.0);
    }

    #[test]
    fn evaluate_is_deterministic_and_order_free() {
        let family = Family::default();
        let data = make_toy_dataset(21, 20, family, LabelScale::new(0.0, 90.0).unwrap(), 4)
            .unwrap()
            .data;
        let reg = OracleRegressor::new(family, 201);
        let cfg = EvalConfig {
            centers: 11,
            n_fake_per_center: 50,
            ..EvalConfig::default()
        };
        let a = evaluate(&OracleSampler(family), &data, &reg, &cfg).unwrap();
        let b = evaluate(&OracleSampler(family), &data, &reg, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 11);
        assert_eq!(a.rows[10].center, 90.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        a.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("center,fd,label_score,diversity,n_real_window\n"));
        assert_eq!(EvalReport::read_csv(&p).unwrap(), a.rows);
    }

    #[test]
    fn shuffling_fakes_leaves_metrics_unchanged() {
        let family = Family::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = family.draw(0.3, 40, &mut rng);
        let mut order: Vec<usize> = (0..40).collect();
        order.reverse();
        order.swap(3, 17);
        let y = x.gather_rows(&order);
        assert!((mean_pairwise_distance(&x) - mean_pairwise_distance(&y)).abs() < 1e-12);
        let reg = OracleRegressor::new(family, 101);
        let s = LabelScale::unit();
        let a = label_error(&reg, &x, 0.3, s).unwrap();
        let b = label_error(&reg, &y, 0.3, s).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn untrained_constant_dre_covers_ratio_one() {
        let mut d = Discriminator::new(&ModelConfig::default(), 2, 1).unwrap();
        for name in ["dre2.w", "dre2.b"] {
            let i = d.store().position(name).unwrap();
            d.store_mut().slot_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let f = Family::default();
        let cov = dre_diagnostic(&d, &f, &f, &[0.5], 200, 0).unwrap();
        // ln 2 = 0.693 is within a factor 1.443 of 1
        assert_eq!(cov.within_2, 1.0);
        assert_eq!(cov.within_1_5, 1.0);
    }
}
