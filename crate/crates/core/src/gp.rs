//! Gaussian-process model of the residual dynamics.
//!
//! One GP per state dimension with a squared-exponential kernel and
//! automatic relevance determination. All outputs share the feature matrix
//! `Z` (rows `z = [x; u]`); each output has its own targets and
//! hyperparameters. Targets are the measured next state minus the nominal
//! one-step prediction.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::Trial;
use crate::driveline::DiscreteStateSpace;
use crate::error::{Error, Result};
use crate::linalg::{FeatureMat, FeatureVec, StateVec, NX, NZ};

/// Number of hyperparameters per output: `log σf²`, `NZ` log length-scales, `log σε²`.
pub const N_HYPER: usize = NZ + 2;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
const MIN_NOISE_VAR: f64 = 1e-8;

/// Kernel and noise hyperparameters of one output, stored as logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub log_sigma_f2: f64,
    /// Log length-scales; `Λ = diag(ℓ²)`.
    pub log_lengthscales: [f64; NZ],
    pub log_sigma_eps2: f64,
}

impl GpHyper {
    pub fn new(sigma_f2: f64, lengthscales: [f64; NZ], sigma_eps2: f64) -> Self {
        Self {
            log_sigma_f2: sigma_f2.ln(),
            log_lengthscales: lengthscales.map(f64::ln),
            log_sigma_eps2: sigma_eps2.ln(),
        }
    }

    pub fn sigma_f2(&self) -> f64 {
        self.log_sigma_f2.exp()
    }

    pub fn sigma_eps2(&self) -> f64 {
        self.log_sigma_eps2.exp()
    }

    /// Diagonal of `Λ⁻¹`.
    pub fn inv_lambda(&self) -> [f64; NZ] {
        self.log_lengthscales.map(|l| (-2.0 * l).exp())
    }

    pub fn to_vec(&self) -> [f64; N_HYPER] {
        let mut v = [0.0; N_HYPER];
        v[0] = self.log_sigma_f2;
        v[1..=NZ].copy_from_slice(&self.log_lengthscales);
        v[N_HYPER - 1] = self.log_sigma_eps2;
        v
    }

    pub fn from_vec(v: &[f64; N_HYPER]) -> Self {
        let mut ls = [0.0; NZ];
        ls.copy_from_slice(&v[1..=NZ]);
        Self { log_sigma_f2: v[0], log_lengthscales: ls, log_sigma_eps2: v[N_HYPER - 1] }
    }
}

/// `σf² exp(−½ (z − z')ᵀ Λ⁻¹ (z − z'))`.
pub fn kernel(z: &FeatureVec, zp: &FeatureVec, h: &GpHyper) -> f64 {
    let il = h.inv_lambda();
    h.sigma_f2() * (-0.5 * sq_dist(z.as_slice(), zp.as_slice(), &il)).exp()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64], inv_lambda: &[f64; NZ]) -> f64 {
    let mut s = 0.0;
    for k in 0..NZ {
        let d = a[k] - b[k];
        s += d * d * inv_lambda[k];
    }
    s
}

/// Training features and per-output targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub z: Vec<FeatureVec>,
    pub y: Vec<StateVec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn targets(&self, d: usize) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.y.iter().map(|y| y[d]))
    }

    /// SHA-256 over the little-endian bytes of `Z` and `Y`, row by row.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (z, y) in self.z.iter().zip(&self.y) {
            for v in z.iter().chain(y.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Builds `(Z, Y)` from recorded trials: one row per transition, using the
/// measured states and the commanded controls. Keeps at most `n_max` rows,
/// chosen uniformly without replacement.
pub fn make_dataset(trials: &[Trial], dss: &DiscreteStateSpace, n_max: usize, seed: u64) -> Result<Dataset> {
    let mut z = Vec::new();
    let mut y = Vec::new();
    for trial in trials {
        for (i, u) in trial.commanded.iter().enumerate() {
            let (x_prev, x_next) = (&trial.states[i], &trial.states[i + 1]);
            y.push(x_next - dss.step(x_prev, u));
            z.push(FeatureVec::from_iterator(x_prev.iter().chain(u.iter()).copied()));
        }
    }
    if z.is_empty() {
        return Err(Error::Dataset("no transitions to learn from".into()));
    }
    if n_max == 0 {
        return Err(Error::Dataset("n_max must be positive".into()));
    }
    if z.len() > n_max {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, z.len(), n_max).into_vec();
        idx.sort_unstable();
        z = idx.iter().map(|&i| z[i]).collect();
        y = idx.iter().map(|&i| y[i]).collect();
    }
    Ok(Dataset { z, y })
}

/// Lower Cholesky factor stored packed by rows.
#[derive(Debug, Clone, PartialEq)]
struct PackedCholesky {
    n: usize,
    rows: Vec<f64>,
}

impl PackedCholesky {
    fn from_lower(l: &DMatrix<f64>) -> Self {
        let n = l.nrows();
        let mut rows = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                rows.push(l[(i, j)]);
            }
        }
        Self { n, rows }
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.rows[start..start + i + 1]
    }

    /// Solves `L v = b` in place.
    fn solve_lower(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let row = self.row(i);
            let mut s = b[i];
            for j in 0..i {
                s -= row[j] * b[j];
            }
            b[i] = s / row[i];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    fn solve_upper(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            let row = self.row(i);
            b[i] /= row[i];
            let bi = b[i];
            for j in 0..i {
                b[j] -= row[j] * bi;
            }
        }
    }
}

/// Cholesky of `Kzz + (σε² + jitter) I` with the escalating jitter policy.
fn factorize(z: &[FeatureVec], h: &GpHyper, dim: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let n = z.len();
    let il = h.inv_lambda();
    let sf2 = h.sigma_f2();
    let mut kf = DMatrix::zeros(n, n);
    for i in 0..n {
        kf[(i, i)] = sf2;
        for j in 0..i {
            let v = sf2 * (-0.5 * sq_dist(z[i].as_slice(), z[j].as_slice(), &il)).exp();
            kf[(i, j)] = v;
            kf[(j, i)] = v;
        }
    }
    let sn2 = h.sigma_eps2();
    let mut jitter = 0.0;
    loop {
        let mut k = kf.clone();
        for i in 0..n {
            k[(i, i)] += sn2 + jitter;
        }
        if let Some(ch) = k.cholesky() {
            return Ok((kf, ch.unpack(), jitter));
        }
        jitter = if jitter == 0.0 { JITTER_START * sf2 } else { jitter * 10.0 };
        if jitter > JITTER_MAX * sf2 * (1.0 + 1e-9) {
            return Err(Error::Factorization { dim, jitter: JITTER_MAX * sf2 });
        }
    }
}

/// One trained output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GpOutput {
    pub hyper: GpHyper,
    pub y: DVector<f64>,
    pub jitter: f64,
    chol: PackedCholesky,
    alpha: Vec<f64>,
    inv_lambda: [f64; NZ],
    sigma_f2: f64,
}

/// Posterior mean, variance and mean gradient at one test point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub var: f64,
    pub dmean: FeatureVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedGp {
    pub z: Vec<FeatureVec>,
    pub outputs: Vec<GpOutput>,
}

/// Residual-dynamics model. `Disabled` predicts zero mean and zero variance.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum GpModel {
    #[default]
    Disabled,
    Trained(TrainedGp),
}

impl GpModel {
    /// Factorizes the kernel matrices for fixed hyperparameters.
    pub fn fit(dataset: &Dataset, hypers: &[GpHyper; NX]) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        let outputs = hypers
            .iter()
            .enumerate()
            .map(|(d, h)| {
                let (_, l, jitter) = factorize(&dataset.z, h, d)?;
                let chol = PackedCholesky::from_lower(&l);
                let y = dataset.targets(d);
                let mut alpha: Vec<f64> = y.iter().copied().collect();
                chol.solve_lower(&mut alpha);
                chol.solve_upper(&mut alpha);
                Ok(GpOutput {
                    hyper: *h,
                    y,
                    jitter,
                    chol,
                    alpha,
                    inv_lambda: h.inv_lambda(),
                    sigma_f2: h.sigma_f2(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GpModel::Trained(TrainedGp { z: dataset.z.clone(), outputs }))
    }

    pub fn is_enabled(&self) -> bool {
        matches!(self, GpModel::Trained(_))
    }

    pub fn len(&self) -> usize {
        match self {
            GpModel::Disabled => 0,
            GpModel::Trained(t) => t.z.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hypers(&self) -> Option<[GpHyper; NX]> {
        match self {
            GpModel::Disabled => None,
            GpModel::Trained(t) => Some(std::array::from_fn(|d| t.outputs[d].hyper)),
        }
    }

    /// Posterior mean and latent variance of output `d` at a deterministic point.
    pub fn posterior(&self, d: usize, zs: &FeatureVec) -> (f64, f64) {
        let p = self.predict(d, zs);
        (p.mean, p.var)
    }

    /// Posterior mean, variance and `∂μ/∂z*`.
    pub fn predict(&self, d: usize, zs: &FeatureVec) -> Prediction {
        let t = match self {
            GpModel::Disabled => {
                return Prediction { mean: 0.0, var: 0.0, dmean: FeatureVec::zeros() };
            }
            GpModel::Trained(t) => t,
        };
        let out = &t.outputs[d];
        let il = &out.inv_lambda;
        let zs = zs.as_slice();
        let mut kv = vec![0.0; t.z.len()];
        let mut mean = 0.0;
        let mut dmean = [0.0; NZ];
        for (i, zi) in t.z.iter().enumerate() {
            let zi = zi.as_slice();
            let mut diff = [0.0; NZ];
            let mut q = 0.0;
            for k in 0..NZ {
                diff[k] = zs[k] - zi[k];
                q += diff[k] * diff[k] * il[k];
            }
            let k = out.sigma_f2 * (-0.5 * q).exp();
            kv[i] = k;
            let w = k * out.alpha[i];
            mean += w;
            for m in 0..NZ {
                dmean[m] -= w * diff[m] * il[m];
            }
        }
        out.chol.solve_lower(&mut kv);
        let explained: f64 = kv.iter().map(|v| v * v).sum();
        Prediction {
            mean,
            var: (out.sigma_f2 - explained).max(0.0),
            dmean: FeatureVec::from(dmean),
        }
    }

    /// Kernel vector `k(z*, Z)` of output `d`.
    pub(crate) fn kernel_vector(&self, d: usize, zs: &FeatureVec) -> Vec<f64> {
        match self {
            GpModel::Disabled => Vec::new(),
            GpModel::Trained(t) => {
                let out = &t.outputs[d];
                t.z.iter()
                    .map(|zi| out.sigma_f2 * (-0.5 * sq_dist(zs.as_slice(), zi.as_slice(), &out.inv_lambda)).exp())
                    .collect()
            }
        }
    }

    /// Posterior derivatives of output `d` at `z*`: `∂μ/∂z*`, `∂Σ/∂z*` and `∂²μ/∂z*²`.
    pub fn posterior_derivatives(&self, d: usize, zs: &FeatureVec) -> (FeatureVec, FeatureVec, FeatureMat) {
        let t = match self {
            GpModel::Disabled => return (FeatureVec::zeros(), FeatureVec::zeros(), FeatureMat::zeros()),
            GpModel::Trained(t) => t,
        };
        let out = &t.outputs[d];
        let il = FeatureVec::from(out.inv_lambda);
        let kv = self.kernel_vector(d, zs);
        // β = K⁻¹ k*
        let mut beta = kv.clone();
        out.chol.solve_lower(&mut beta);
        out.chol.solve_upper(&mut beta);
        let mut dmu = FeatureVec::zeros();
        let mut dsig = FeatureVec::zeros();
        let mut outer = FeatureMat::zeros();
        let mut wsum = 0.0;
        for (i, zi) in t.z.iter().enumerate() {
            let diff = zs - zi;
            let scaled = diff.component_mul(&il);
            let w = kv[i] * out.alpha[i];
            dmu -= scaled * w;
            dsig += scaled * (2.0 * kv[i] * beta[i]);
            wsum += w;
            outer += scaled * scaled.transpose() * w;
        }
        let hess = outer - FeatureMat::from_diagonal(&il) * wsum;
        (dmu, dsig, hess)
    }

    pub fn output(&self, d: usize) -> Option<&GpOutput> {
        match self {
            GpModel::Disabled => None,
            GpModel::Trained(t) => t.outputs.get(d),
        }
    }
}

/// Log marginal likelihood of targets `y` and its gradient with respect to
/// the log-hyperparameters (`GpHyper::to_vec` order).
pub fn log_marginal_likelihood(z: &[FeatureVec], y: &DVector<f64>, h: &GpHyper) -> Result<(f64, [f64; N_HYPER])> {
    let n = z.len();
    let (kf, l, jitter) = factorize(z, h, 0)?;
    let chol = nalgebra::Cholesky::pack_dirty(l);
    let alpha = chol.solve(y);
    let value = lml_value(&chol, y, &alpha);
    let kinv = chol.inverse();

    // ∂/∂θ = ½ tr((ααᵀ − K⁻¹) ∂K/∂θ)
    let il = h.inv_lambda();
    let mut grad = [0.0; N_HYPER];
    let mut trace_w = 0.0;
    for i in 0..n {
        let wii = alpha[i] * alpha[i] - kinv[(i, i)];
        trace_w += wii;
        grad[0] += 0.5 * wii * kf[(i, i)];
        for j in 0..i {
            // Off-diagonal pairs appear twice.
            let wk = (alpha[i] * alpha[j] - kinv[(i, j)]) * kf[(i, j)];
            grad[0] += wk;
            let (zi, zj) = (z[i].as_slice(), z[j].as_slice());
            for k in 0..NZ {
                let dk = zi[k] - zj[k];
                grad[1 + k] += wk * dk * dk * il[k];
            }
        }
    }
    grad[N_HYPER - 1] = 0.5 * (h.sigma_eps2() + jitter) * trace_w;
    Ok((value, grad))
}

fn lml_value(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * y.dot(alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn log_marginal_likelihood_value(z: &[FeatureVec], y: &DVector<f64>, h: &GpHyper) -> Result<f64> {
    let (_, l, _) = factorize(z, h, 0)?;
    let chol = nalgebra::Cholesky::pack_dirty(l);
    let alpha = chol.solve(y);
    Ok(lml_value(&chol, y, &alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpTrainConfig {
    /// Number of initializations per output.
    pub starts: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Lower bound of each length-scale as a multiple of its feature's
    /// standard deviation in the dataset.
    pub min_lengthscale: f64,
}

impl Default for GpTrainConfig {
    fn default() -> Self {
        Self { starts: 2, max_iters: 60, seed: 0, min_lengthscale: 1e-3 }
    }
}

/// Box constraints on the log-hyperparameters.
#[derive(Debug, Clone, Copy)]
struct HyperBounds {
    lo: [f64; N_HYPER],
    hi: [f64; N_HYPER],
}

impl HyperBounds {
    fn new(feature_std: &[f64; NZ], target_var: f64, min_lengthscale: f64) -> Self {
        let scale = target_var.max(1e-8);
        let mut lo = [0.0; N_HYPER];
        let mut hi = [0.0; N_HYPER];
        lo[0] = (1e-10f64).ln();
        hi[0] = (1e4 * scale).ln().max(lo[0] + 1.0);
        for k in 0..NZ {
            lo[1 + k] = (min_lengthscale * feature_std[k]).ln();
            hi[1 + k] = (1e3 * feature_std[k]).ln();
        }
        lo[N_HYPER - 1] = MIN_NOISE_VAR.ln();
        hi[N_HYPER - 1] = (10.0 * scale).ln().max(lo[N_HYPER - 1] + 1.0);
        Self { lo, hi }
    }

    fn clamp(&self, v: &mut [f64; N_HYPER]) {
        for i in 0..N_HYPER {
            v[i] = v[i].clamp(self.lo[i], self.hi[i]);
        }
    }
}

fn feature_std(z: &[FeatureVec]) -> [f64; NZ] {
    let n = z.len() as f64;
    std::array::from_fn(|k| {
        let mean = z.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = z.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
        let s = var.sqrt();
        if s > 1e-12 { s } else { 1.0 }
    })
}

fn variance(y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Summary of one output's training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub log_likelihood: f64,
    pub iterations: usize,
    pub start: usize,
}

/// Projected gradient ascent with Armijo backtracking from one start.
fn ascend(
    z: &[FeatureVec],
    y: &DVector<f64>,
    start: [f64; N_HYPER],
    bounds: &HyperBounds,
    max_iters: usize,
) -> Result<(GpHyper, f64, usize)> {
    let mut x = start;
    bounds.clamp(&mut x);
    let (mut f, mut g) = log_marginal_likelihood(z, y, &GpHyper::from_vec(&x))?;
    let mut step = {
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn > 0.0 { 0.5 / gn } else { 0.0 }
    };
    let mut iters = 0;
    while iters < max_iters && step > 0.0 {
        iters += 1;
        let mut accepted = None;
        let mut alpha = step;
        for _ in 0..30 {
            let mut cand = x;
            for i in 0..N_HYPER {
                cand[i] += alpha * g[i];
            }
            bounds.clamp(&mut cand);
            let gain: f64 = (0..N_HYPER).map(|i| g[i] * (cand[i] - x[i])).sum();
            if gain <= 0.0 {
                break;
            }
            if let Ok(fc) = log_marginal_likelihood_value(z, y, &GpHyper::from_vec(&cand)) {
                if fc >= f + 1e-4 * gain {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        let improvement = fc - f;
        x = cand;
        let (fv, gv) = log_marginal_likelihood(z, y, &GpHyper::from_vec(&x))?;
        f = fv;
        g = gv;
        step = alpha * 2.0;
        if improvement <= 1e-9 * (1.0 + f.abs()) {
            break;
        }
    }
    Ok((GpHyper::from_vec(&x), f, iters))
}

/// Fits hyperparameters for every output by maximizing the log marginal
/// likelihood from several starts, then factorizes the final model.
///
/// `warm` (previous optima) is used as the first start when given.
pub fn train_hyperparameters(
    dataset: &Dataset,
    cfg: &GpTrainConfig,
    warm: Option<&[GpHyper; NX]>,
) -> Result<(GpModel, [TrainSummary; NX])> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let fstd = feature_std(&dataset.z);
    let mut hypers = [GpHyper::from_vec(&[0.0; N_HYPER]); NX];
    let mut summaries = [TrainSummary { log_likelihood: 0.0, iterations: 0, start: 0 }; NX];
    for d in 0..NX {
        let y = dataset.targets(d);
        let var = variance(&y);
        let bounds = HyperBounds::new(&fstd, var, cfg.min_lengthscale);
        let heuristic = {
            let mut v = [0.0; N_HYPER];
            v[0] = var.max(1e-10).ln();
            for k in 0..NZ {
                v[1 + k] = fstd[k].ln();
            }
            v[N_HYPER - 1] = (0.01 * var).max(MIN_NOISE_VAR).ln();
            v
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(d as u64 + 1)));
        let mut starts = Vec::with_capacity(cfg.starts.max(1));
        if let Some(w) = warm {
            starts.push(w[d].to_vec());
        }
        starts.push(heuristic);
        while starts.len() < cfg.starts.max(1) {
            let mut v = heuristic;
            for x in v.iter_mut() {
                *x += rng.gen_range(-1.0..1.0);
            }
            starts.push(v);
        }
        starts.truncate(cfg.starts.max(1));

        let mut best: Option<(GpHyper, f64, TrainSummary)> = None;
        let mut last_err = None;
        for (s, start) in starts.into_iter().enumerate() {
            match ascend(&dataset.z, &y, start, &bounds, cfg.max_iters) {
                Ok((h, f, iters)) => {
                    if best.as_ref().is_none_or(|b| f > b.1) {
                        best = Some((h, f, TrainSummary { log_likelihood: f, iterations: iters, start: s }));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        let (h, _, summary) = best.ok_or_else(|| Error::Training {
            dim: d,
            reason: format!(
                "no start produced a finite likelihood (last error: {})",
                last_err.map_or_else(|| "none".into(), |e| e.to_string())
            ),
        })?;
        log::debug!("gp output {d}: log-likelihood {:.4} after {} iterations", summary.log_likelihood, summary.iterations);
        hypers[d] = h;
        summaries[d] = summary;
    }
    Ok((GpModel::fit(dataset, &hypers)?, summaries))
}

/// Text form of a trained model: hyperparameters plus the hash of the
/// dataset they were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpDump {
    pub dataset_hash: String,
    pub n: usize,
    pub output: Vec<GpHyper>,
}

impl GpDump {
    pub fn from_model(model: &GpModel, dataset: &Dataset) -> Option<Self> {
        Some(Self {
            dataset_hash: dataset.hash(),
            n: dataset.len(),
            output: model.hypers()?.to_vec(),
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("gp dump serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let dump: Self = toml::from_str(text).map_err(|e| Error::Config(format!("gp dump: {e}")))?;
        if dump.output.len() != NX {
            return Err(Error::Config(format!("gp dump: expected {NX} outputs, found {}", dump.output.len())));
        }
        if dump.output.iter().any(|h| !h.to_vec().iter().all(|v| v.is_finite())) {
            return Err(Error::Config("gp dump: non-finite hyperparameter".into()));
        }
        Ok(dump)
    }

    /// Rebuilds the model on `dataset`, which must be the one that was dumped.
    pub fn restore(&self, dataset: &Dataset) -> Result<GpModel> {
        if dataset.hash() != self.dataset_hash || dataset.len() != self.n {
            return Err(Error::Dataset("dataset does not match the dumped model".into()));
        }
        let hypers: [GpHyper; NX] = std::array::from_fn(|d| self.output[d]);
        GpModel::fit(dataset, &hypers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn random_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<FeatureVec> = (0..n).map(|_| FeatureVec::from_fn(|_, _| rng.gen_range(-2.0..2.0))).collect();
        let y = z
            .iter()
            .map(|zi| StateVec::new(zi[0].sin(), zi[1] * zi[2], (zi[3] - zi[4]).cos(), 0.3 * zi[6]))
            .collect();
        Dataset { z, y }
    }

    fn hyper() -> GpHyper {
        GpHyper::new(1.3, [1.0, 1.5, 0.8, 2.0, 1.2, 3.0, 0.9], 0.05)
    }

    #[test]
    fn kernel_closed_forms() {
        let h = GpHyper::new(2.5, [1.0; NZ], 0.1);
        let z = FeatureVec::from_fn(|i, _| i as f64);
        assert_eq!(kernel(&z, &z, &h), 2.5);
        let unit = GpHyper::new(1.0, [1.0; NZ], 0.1);
        let mut zp = z;
        zp[0] += 1.0;
        zp[3] -= 1.0;
        assert_abs_diff_eq!(kernel(&z, &zp, &unit), (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(kernel(&z, &zp, &h), kernel(&zp, &z, &h), epsilon = 0.0);
    }

    #[test]
    fn single_point_posterior() {
        let z1 = FeatureVec::from_element(0.5);
        let ds = Dataset { z: vec![z1], y: vec![StateVec::from_element(2.0)] };
        let h = GpHyper::new(1.0, [1.0; NZ], 1.0);
        let m = GpModel::fit(&ds, &[h; NX]).unwrap();
        let (mu, var) = m.posterior(0, &z1);
        assert_abs_diff_eq!(mu, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(var, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn far_point_reverts_to_prior() {
        let ds = random_dataset(20, 1);
        let m = GpModel::fit(&ds, &[hyper(); NX]).unwrap();
        let far = FeatureVec::from_element(1e3);
        let (mu, var) = m.posterior(1, &far);
        assert!(mu.abs() < 1e-12);
        assert_abs_diff_eq!(var, hyper().sigma_f2(), epsilon = 1e-12);
    }

    /// Dense LU-based oracle for the posterior.
    fn dense_posterior(ds: &Dataset, h: &GpHyper, d: usize, zs: &FeatureVec) -> (f64, f64) {
        let n = ds.len();
        let k = DMatrix::from_fn(n, n, |i, j| kernel(&ds.z[i], &ds.z[j], h) + if i == j { h.sigma_eps2() } else { 0.0 });
        let ks = DVector::from_fn(n, |i, _| kernel(zs, &ds.z[i], h));
        let kinv = k.try_inverse().unwrap();
        let y = ds.targets(d);
        ((ks.transpose() * &kinv * y)[0], h.sigma_f2() - (ks.transpose() * kinv * &ks)[0])
    }

    #[test]
    fn posterior_matches_dense_oracle() {
        for seed in 0..5 {
            let ds = random_dataset(20, seed);
            let m = GpModel::fit(&ds, &[hyper(); NX]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for _ in 0..5 {
                let zs = FeatureVec::from_fn(|_, _| rng.gen_range(-2.0..2.0));
                for d in 0..NX {
                    let (mu, var) = m.posterior(d, &zs);
                    let (mu_o, var_o) = dense_posterior(&ds, &hyper(), d, &zs);
                    assert_abs_diff_eq!(mu, mu_o, epsilon = 1e-8);
                    assert_abs_diff_eq!(var, var_o, epsilon = 1e-8);
                    assert!(var >= 0.0 && var <= hyper().sigma_f2());
                }
            }
        }
    }

    #[test]
    fn posterior_mean_is_linear_in_targets() {
        let a = random_dataset(15, 3);
        let mut b = a.clone();
        for y in b.y.iter_mut() {
            *y = y.map(|v| 2.0 * v - 0.5);
        }
        let mut sum = a.clone();
        for (s, (ya, yb)) in sum.y.iter_mut().zip(a.y.iter().zip(&b.y)) {
            *s = ya * 3.0 + yb;
        }
        let fit = |ds: &Dataset| GpModel::fit(ds, &[hyper(); NX]).unwrap();
        let (ma, mb, ms) = (fit(&a), fit(&b), fit(&sum));
        let zs = FeatureVec::from_element(0.2);
        for d in 0..NX {
            assert_abs_diff_eq!(ms.posterior(d, &zs).0, 3.0 * ma.posterior(d, &zs).0 + mb.posterior(d, &zs).0, epsilon = 1e-10);
        }
    }

    #[test]
    fn disabled_model_predicts_nothing() {
        let m = GpModel::Disabled;
        assert_eq!(m.posterior(2, &FeatureVec::from_element(3.0)), (0.0, 0.0));
        assert!(!m.is_enabled());
    }

    #[test]
    fn single_point_likelihood_closed_form() {
        let ds = Dataset { z: vec![FeatureVec::zeros()], y: vec![StateVec::from_element(1.7)] };
        let h = GpHyper::new(0.8, [1.0; NZ], 0.3);
        let (v, _) = log_marginal_likelihood(&ds.z, &ds.targets(0), &h).unwrap();
        let s: f64 = 0.8 + 0.3;
        let expected = -0.5 * 1.7 * 1.7 / s - 0.5 * s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
    }

    #[test]
    fn zero_targets_leave_only_log_det() {
        let ds = random_dataset(12, 4);
        let y = DVector::zeros(12);
        let h = hyper();
        let (v, _) = log_marginal_likelihood(&ds.z, &y, &h).unwrap();
        let n = 12;
        let k = DMatrix::from_fn(n, n, |i, j| kernel(&ds.z[i], &ds.z[j], &h) + if i == j { h.sigma_eps2() } else { 0.0 });
        let expected = -0.5 * k.determinant().ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-9);
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        let ds = random_dataset(25, 5);
        let y = ds.targets(0);
        let h = hyper();
        let (_, g) = log_marginal_likelihood(&ds.z, &y, &h).unwrap();
        let x = h.to_vec();
        let step = 1e-5;
        for i in 0..N_HYPER {
            let mut xp = x;
            xp[i] += step;
            let mut xm = x;
            xm[i] -= step;
            let fp = log_marginal_likelihood(&ds.z, &y, &GpHyper::from_vec(&xp)).unwrap().0;
            let fm = log_marginal_likelihood(&ds.z, &y, &GpHyper::from_vec(&xm)).unwrap().0;
            let fd = (fp - fm) / (2.0 * step);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-6, "param {i}: analytic {} fd {fd} rel {rel}", g[i]);
        }
    }

    #[test]
    fn dataset_from_nominal_trial_has_zero_targets() {
        use crate::linalg::{ControlVec, InputMat, StateMat};
        let dss = DiscreteStateSpace {
            ad: StateMat::from_fn(|i, j| if i == j { 0.9 } else { 0.01 * (i + j) as f64 }),
            bd: InputMat::from_fn(|i, j| 0.1 * (i as f64 - j as f64)),
            tau0d: StateVec::new(0.0, 0.0, -0.01, 0.0),
            dt: 0.01,
        };
        let mut states = vec![StateVec::new(1.0, 2.0, 3.0, 0.1)];
        let mut commanded = Vec::new();
        for t in 0..100 {
            let u = ControlVec::new((t as f64).sin(), 1.0, 0.5);
            states.push(dss.step(states.last().unwrap(), &u));
            commanded.push(u);
        }
        let trial = Trial {
            times: (0..=100).map(|i| i as f64 * 0.01).collect(),
            reference: states.clone(),
            applied: commanded.clone(),
            states,
            commanded,
        };
        let ds = make_dataset(std::slice::from_ref(&trial), &dss, 400, 0).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.z[0].len(), 7);
        assert!(ds.y.iter().all(|y| y.amax() < 1e-12));
        let capped = make_dataset(&[trial.clone(), trial.clone(), trial], &dss, 120, 9).unwrap();
        assert_eq!(capped.len(), 120);
        assert!(make_dataset(&[], &dss, 400, 0).is_err());
    }

    /// Draws targets from a GP prior with known hyperparameters.
    fn sample_gp(n: usize, truth: &GpHyper, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<FeatureVec> = (0..n).map(|_| FeatureVec::from_fn(|_, _| rng.gen_range(-3.0..3.0))).collect();
        let k = DMatrix::from_fn(n, n, |i, j| kernel(&z[i], &z[j], truth) + if i == j { truth.sigma_eps2() + 1e-10 } else { 0.0 });
        let l = k.cholesky().unwrap().unpack();
        let w = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let f = l * w;
        let y = f.iter().map(|&v| StateVec::from_element(v)).collect();
        Dataset { z, y }
    }

    #[test]
    fn recovers_generating_lengthscales() {
        let truth = GpHyper::new(1.0, [0.8, 1.2, 1.6, 50.0, 50.0, 50.0, 50.0], 0.01);
        let ds = sample_gp(200, &truth, 4);
        let (m, _) = train_hyperparameters(&ds, &GpTrainConfig { starts: 3, max_iters: 200, ..GpTrainConfig::default() }, None).unwrap();
        let h = m.hypers().unwrap()[0];
        for k in 0..3 {
            let err = (h.log_lengthscales[k] - truth.log_lengthscales[k]).abs();
            assert!(err < 0.3, "feature {k}: log length-scale off by {err}");
        }
    }

    #[test]
    fn zero_targets_collapse_signal_variance() {
        let mut ds = random_dataset(30, 8);
        for y in ds.y.iter_mut() {
            *y = StateVec::zeros();
        }
        let (m, _) = train_hyperparameters(&ds, &GpTrainConfig { starts: 2, max_iters: 50, ..GpTrainConfig::default() }, None).unwrap();
        for h in m.hypers().unwrap() {
            assert!(h.sigma_f2() <= 1e-9, "sigma_f2 {}", h.sigma_f2());
        }
    }

    #[test]
    fn scaling_targets_scales_signal_variance() {
        let truth = GpHyper::new(1.0, [1.0, 1.5, 50.0, 50.0, 50.0, 50.0, 50.0], 0.01);
        let ds = sample_gp(80, &truth, 12);
        let mut doubled = ds.clone();
        for y in doubled.y.iter_mut() {
            *y *= 2.0;
        }
        let cfg = GpTrainConfig { starts: 1, max_iters: 200, ..GpTrainConfig::default() };
        let (m1, _) = train_hyperparameters(&ds, &cfg, None).unwrap();
        let (m2, _) = train_hyperparameters(&doubled, &cfg, None).unwrap();
        let (h1, h2) = (m1.hypers().unwrap()[0], m2.hypers().unwrap()[0]);
        let ratio = h2.sigma_f2() / h1.sigma_f2();
        assert!((ratio - 4.0).abs() < 0.4, "variance ratio {ratio}");
        for k in 0..2 {
            assert!((h1.log_lengthscales[k] - h2.log_lengthscales[k]).abs() < 0.1);
        }
    }

    #[test]
    fn dump_round_trip_and_hash_check() {
        let ds = random_dataset(10, 2);
        let m = GpModel::fit(&ds, &[hyper(); NX]).unwrap();
        let dump = GpDump::from_model(&m, &ds).unwrap();
        let back = GpDump::parse(&dump.to_text()).unwrap();
        assert_eq!(back, dump);
        assert_eq!(back.restore(&ds).unwrap(), m);
        let other = random_dataset(10, 3);
        assert!(back.restore(&other).is_err());
        assert!(GpDump::parse("n = 3").is_err());
    }

    #[test]
    fn jitter_rescues_duplicate_points() {
        let z = vec![FeatureVec::from_element(1.0); 5];
        let ds = Dataset { z, y: vec![StateVec::from_element(1.0); 5] };
        // Noise far below the jitter floor makes the kernel matrix rank one.
        let h = GpHyper { log_sigma_eps2: (1e-300f64).ln(), ..GpHyper::new(1.0, [1.0; NZ], 1.0) };
        let m = GpModel::fit(&ds, &[h; NX]).unwrap();
        assert!(m.output(0).unwrap().jitter > 0.0);
    }
}
