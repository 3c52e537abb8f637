//! The outer learning loop and the inner policy optimizer.

use std::time::Instant;

use crate::bench::{error_metrics, heuristic_feedforward, run_trial, ErrorMetrics, Trial};
use crate::config::{LearningConfig, Setup};
use crate::controller::{lqr_init, Policy, PolicyParams, N_PARAMS};
use crate::error::{Error, Result};
use crate::gp::{make_dataset, train_hyperparameters, Dataset, GpDump, GpHyper, GpModel, TrainSummary};
use crate::gradient::grad_j_fd;
use crate::linalg::NX;
use crate::rollout::{rollout_cost, RolloutContext, StateBelief};

/// A differentiable scalar function of the policy parameters.
pub trait Objective {
    fn value(&self, psi: &[f64; N_PARAMS]) -> Result<f64>;
    fn gradient(&self, psi: &[f64; N_PARAMS]) -> Result<[f64; N_PARAMS]>;
}

/// Expected rollout cost with central-difference gradients.
pub struct RolloutObjective<'a> {
    pub ctx: RolloutContext<'a>,
    pub fd_step: f64,
}

impl Objective for RolloutObjective<'_> {
    fn value(&self, psi: &[f64; N_PARAMS]) -> Result<f64> {
        let policy = Policy::new(PolicyParams::from_slice(psi), self.ctx.reference)?;
        Ok(rollout_cost(&policy, &self.ctx))
    }

    fn gradient(&self, psi: &[f64; N_PARAMS]) -> Result<[f64; N_PARAMS]> {
        grad_j_fd(&PolicyParams::from_slice(psi), &self.ctx, self.fd_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_shrinks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::from(&LearningConfig::default())
    }
}

impl From<&LearningConfig> for OptimizerConfig {
    fn from(c: &LearningConfig) -> Self {
        Self {
            max_iters: c.max_inner_iters,
            grad_tol: c.grad_tol,
            rel_tol: c.rel_tol,
            armijo_c: c.armijo_c,
            shrink: c.shrink,
            max_shrinks: c.max_shrinks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientNorm,
    RelativeImprovement,
    MaxIterations,
    /// The line search shrank the step the maximum number of times without
    /// meeting the sufficient-decrease condition.
    Stalled,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::GradientNorm => "gradient-norm",
            StopReason::RelativeImprovement => "relative-improvement",
            StopReason::MaxIterations => "max-iterations",
            StopReason::Stalled => "stalled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub psi: [f64; N_PARAMS],
    /// Objective at the start and after every accepted step.
    pub j_curve: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    /// Norm of the scaled gradient at the last point where it was evaluated.
    pub grad_norm: f64,
}

impl OptimResult {
    pub fn stalled(&self) -> bool {
        self.stop == StopReason::Stalled
    }
}

/// Per-parameter scale used to precondition the descent direction.
pub fn parameter_scale(psi: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
    psi.map(|v| v.abs().max(1.0))
}

/// Gradient descent with Armijo backtracking in coordinates scaled by `scale`.
///
/// The first trial step moves the scaled parameters by a unit distance;
/// after an accepted step the next trial step doubles.
pub fn optimize<O: Objective>(
    obj: &O,
    psi0: &[f64; N_PARAMS],
    scale: &[f64; N_PARAMS],
    cfg: &OptimizerConfig,
) -> Result<OptimResult> {
    let mut psi = *psi0;
    let mut j = obj.value(&psi)?;
    if !j.is_finite() {
        return Err(Error::Model("objective is not finite at the initial parameters".into()));
    }
    let mut j_curve = vec![j];
    let mut alpha: Option<f64> = None;
    let mut iterations = 0;
    loop {
        let g = obj.gradient(&psi)?;
        // Gradient in scaled coordinates y = ψ / s.
        let gs: [f64; N_PARAMS] = std::array::from_fn(|i| g[i] * scale[i]);
        let grad_norm = gs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let stop = if grad_norm < cfg.grad_tol {
            Some(StopReason::GradientNorm)
        } else if iterations >= cfg.max_iters {
            Some(StopReason::MaxIterations)
        } else {
            None
        };
        if let Some(stop) = stop {
            return Ok(OptimResult { psi, j_curve, iterations, stop, grad_norm });
        }
        iterations += 1;

        let mut step = alpha.unwrap_or(1.0 / grad_norm);
        let decrease = grad_norm * grad_norm;
        let mut accepted = None;
        for _ in 0..=cfg.max_shrinks {
            let cand: [f64; N_PARAMS] = std::array::from_fn(|i| psi[i] - step * scale[i] * gs[i]);
            if let Ok(jc) = obj.value(&cand) {
                if jc.is_finite() && jc <= j - cfg.armijo_c * step * decrease {
                    accepted = Some((cand, jc));
                    break;
                }
            }
            step *= cfg.shrink;
        }
        let Some((cand, jc)) = accepted else {
            return Ok(OptimResult { psi, j_curve, iterations, stop: StopReason::Stalled, grad_norm });
        };
        let improvement = (j - jc) / j.abs().max(f64::MIN_POSITIVE);
        psi = cand;
        j = jc;
        j_curve.push(j);
        alpha = Some(step * 2.0);
        log::trace!("inner iteration {iterations}: J = {j:.6e}, step {step:.3e}");
        if improvement < cfg.rel_tol {
            return Ok(OptimResult { psi, j_curve, iterations, stop: StopReason::RelativeImprovement, grad_norm });
        }
    }
}

/// Optimizes the full policy on the learned model.
pub fn optimize_policy(
    params0: &PolicyParams,
    ctx: &RolloutContext,
    learning: &LearningConfig,
) -> Result<(PolicyParams, OptimResult)> {
    if !params0.is_finite() {
        return Err(Error::Model("initial policy parameters are not finite".into()));
    }
    let psi0 = params0.to_array();
    let obj = RolloutObjective { ctx: *ctx, fd_step: learning.fd_step };
    let res = optimize(&obj, &psi0, &parameter_scale(&psi0), &OptimizerConfig::from(learning))?;
    Ok((PolicyParams::from_slice(&res.psi), res))
}

/// The learned model behind one policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct GpSummary {
    pub dump: GpDump,
    pub log_likelihood: [f64; NX],
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Policy that ran the trial.
    pub params: PolicyParams,
    pub trial: Trial,
    pub metrics: ErrorMetrics,
    /// Model trained on every trial so far; absent on the last iteration.
    pub gp: Option<GpSummary>,
    pub optimization: Option<OptimResult>,
    /// Wall time of GP training plus policy optimization (s).
    pub update_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningHistory {
    pub records: Vec<IterationRecord>,
    /// Error that ended the run early, if any.
    pub error: Option<String>,
}

impl LearningHistory {
    pub fn metrics(&self) -> Vec<ErrorMetrics> {
        self.records.iter().map(|r| r.metrics).collect()
    }

    /// Policy produced by the last completed update, or the last tested one.
    pub fn final_params(&self) -> Option<PolicyParams> {
        let last = self.records.last()?;
        Some(last.optimization.as_ref().map_or(last.params, |o| PolicyParams::from_slice(&o.psi)))
    }

    /// Fractional reduction of `‖e‖₂` from the first to the last trial.
    pub fn reduction(&self) -> Option<f64> {
        let first = self.records.first()?.metrics.e_2;
        let last = self.records.last()?.metrics.e_2;
        Some(1.0 - last / first)
    }
}

/// Seed of stream `stream` in outer iteration `i`.
pub fn derive_seed(seed: u64, i: usize, stream: u64) -> u64 {
    let mut x = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

const TRIAL_STREAM: u64 = 1;
const SUBSAMPLE_STREAM: u64 = 2;
const GP_STREAM: u64 = 3;

/// LQR gain plus bench-measured friction feedforward.
pub fn initial_policy(setup: &Setup) -> Result<PolicyParams> {
    let c = setup.learning.controller();
    let kc = lqr_init(&setup.dss, &c.q_matrix(), &c.r_matrix())?;
    let ff = heuristic_feedforward(&setup.bench, &setup.dss, &setup.reference);
    Ok(PolicyParams { ff, kc })
}

/// Runs a policy once on the bench.
pub fn bench_trial(setup: &Setup, params: &PolicyParams, seed: u64) -> Result<(Trial, ErrorMetrics)> {
    let policy = Policy::new(*params, &setup.reference)?;
    let trial = run_trial(&policy, &setup.reference, &setup.bench, &setup.dss, &setup.x0, seed)?;
    let m = error_metrics(&trial);
    Ok((trial, m))
}

/// Trial seed of outer iteration `i`.
pub fn trial_seed(learning: &LearningConfig, i: usize) -> u64 {
    derive_seed(learning.seed, i, TRIAL_STREAM)
}

/// Alternates bench trials, GP training and policy optimization.
///
/// Iteration `i` tests the current policy; every iteration but the last then
/// retrains the model on all trials so far and optimizes the next policy.
/// Failures after initialization end the loop and are recorded in the history.
pub fn run_learning(setup: &Setup) -> Result<LearningHistory> {
    let learning = &setup.learning;
    let mut params = initial_policy(setup)?;
    let mut history = LearningHistory { records: Vec::new(), error: None };
    let mut trials: Vec<Trial> = Vec::new();
    let mut warm: Option<[GpHyper; NX]> = None;
    let mut small_gains = 0;

    for i in 0..=learning.outer_iters {
        let (trial, metrics) = match bench_trial(setup, &params, trial_seed(learning, i)) {
            Ok(t) => t,
            Err(e) => {
                history.error = Some(format!("iteration {i}: {e}"));
                break;
            }
        };
        log::info!("iteration {i}: e_2 = {:.5}, e_inf = {:.5}, e_end = {:.5}", metrics.e_2, metrics.e_inf, metrics.e_end);
        trials.push(trial.clone());
        let mut record = IterationRecord {
            iteration: i,
            params,
            trial,
            metrics,
            gp: None,
            optimization: None,
            update_seconds: 0.0,
        };

        if let Some(prev) = history.records.last() {
            let gain = 1.0 - metrics.e_2 / prev.metrics.e_2;
            small_gains = if gain < 0.02 { small_gains + 1 } else { 0 };
        }
        let stop_early = learning.early_stop && small_gains >= 2;
        if i == learning.outer_iters || stop_early {
            history.records.push(record);
            break;
        }

        let started = Instant::now();
        let update = (|| -> Result<(GpSummary, PolicyParams, OptimResult, [GpHyper; NX])> {
            let (gp, dataset, summaries) = fit_model(setup, &trials, i, warm.as_ref())?;
            let hypers = gp.hypers().expect("trained model has hyperparameters");
            let ctx = rollout_context(setup, &gp);
            let (next, res) = optimize_policy(&params, &ctx, learning)?;
            let summary = GpSummary {
                dump: GpDump::from_model(&gp, &dataset).expect("trained model dumps"),
                log_likelihood: summaries.map(|s| s.log_likelihood),
            };
            Ok((summary, next, res, hypers))
        })();
        record.update_seconds = started.elapsed().as_secs_f64();
        match update {
            Ok((summary, next, res, hypers)) => {
                log::info!(
                    "iteration {i}: J {:.5} -> {:.5} in {} steps ({})",
                    res.j_curve[0],
                    res.j_curve.last().copied().unwrap_or(f64::NAN),
                    res.iterations,
                    res.stop.as_str()
                );
                record.gp = Some(summary);
                record.optimization = Some(res);
                warm = Some(hypers);
                params = next;
                history.records.push(record);
            }
            Err(e) => {
                history.records.push(record);
                history.error = Some(format!("iteration {i}: {e}"));
                break;
            }
        }
    }
    Ok(history)
}

/// Builds the dataset of outer iteration `i` from `trials` and trains the GP on it.
pub fn fit_model(
    setup: &Setup,
    trials: &[Trial],
    i: usize,
    warm: Option<&[GpHyper; NX]>,
) -> Result<(GpModel, Dataset, [TrainSummary; NX])> {
    let learning = &setup.learning;
    let dataset = make_dataset(trials, &setup.dss, learning.n_max, derive_seed(learning.seed, i, SUBSAMPLE_STREAM))?;
    let (gp, summaries) = train_hyperparameters(&dataset, &learning.gp_train(derive_seed(learning.seed, i, GP_STREAM)), warm)?;
    Ok((gp, dataset, summaries))
}

/// Rollout inputs for `setup` with model `gp`, starting from the bench's
/// initial state.
pub fn rollout_context<'a>(setup: &'a Setup, gp: &'a GpModel) -> RolloutContext<'a> {
    RolloutContext {
        dss: &setup.dss,
        reference: &setup.reference,
        gp,
        cost: &setup.cost,
        x0: StateBelief::isotropic(setup.x0, setup.learning.sigma0),
    }
}
