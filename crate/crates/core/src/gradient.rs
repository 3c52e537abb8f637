//! Policy gradients of the rollout cost.
//!
//! The generic path differentiates the cost numerically over all twelve
//! parameters; the analytic path accumulates exact derivatives of the
//! belief chain for the eight feedback gains and serves as its oracle.

use std::fmt::Write as _;

use nalgebra::SMatrix;

use crate::controller::{Policy, PolicyParams, FEEDBACK_CHANNELS, N_PARAMS, PARAM_NAMES};
use crate::driveline::DiscreteStateSpace;
use crate::error::{Error, Result};
use crate::gp::{kernel, GpHyper, GpModel};
use crate::linalg::{FeatureMat, FeatureVec, StateMat, StateVec, NX, NZ};
use crate::reference::ReferenceTrajectory;
use crate::rollout::{
    closed_loop, cost_terms, joint_map, joint_z_moments, propagate, rollout_cost, CostConfig, Propagation,
    RolloutContext, StateBelief,
};

/// Number of feedback gain entries.
pub const N_KC: usize = 8;

/// Index of the first gain in the policy parameter vector.
const KC_OFFSET: usize = N_PARAMS - N_KC;

/// Central differences of `f` at `psi`, step `h_rel · max(|ψ_i|, 1)`.
pub fn central_difference<F>(psi: &[f64; N_PARAMS], h_rel: f64, mut f: F) -> Result<[f64; N_PARAMS]>
where
    F: FnMut(&[f64; N_PARAMS]) -> Result<f64>,
{
    let mut grad = [0.0; N_PARAMS];
    for i in 0..N_PARAMS {
        let h = h_rel * psi[i].abs().max(1.0);
        let mut v = *psi;
        v[i] = psi[i] + h;
        let jp = f(&v)?;
        v[i] = psi[i] - h;
        let jm = f(&v)?;
        grad[i] = (jp - jm) / (2.0 * h);
        if !grad[i].is_finite() {
            return Err(Error::Gradient { param: PARAM_NAMES[i] });
        }
    }
    Ok(grad)
}

/// Central-difference gradient of the rollout cost over all policy parameters.
pub fn grad_j_fd(params: &PolicyParams, ctx: &RolloutContext, h_rel: f64) -> Result<[f64; N_PARAMS]> {
    central_difference(&params.to_array(), h_rel, |v| {
        let pol = Policy::new(PolicyParams::from_slice(v), ctx.reference)?;
        Ok(rollout_cost(&pol, ctx))
    })
}

/// First and second derivatives of the kernel with respect to its first argument.
pub fn grad_kernel(zs: &FeatureVec, z1: &FeatureVec, h: &GpHyper) -> (FeatureVec, FeatureMat) {
    let il = FeatureVec::from(h.inv_lambda());
    let k = kernel(zs, z1, h);
    let scaled = (zs - z1).component_mul(&il);
    let d1 = -scaled * k;
    let d2 = (scaled * scaled.transpose() - FeatureMat::from_diagonal(&il)) * k;
    (d1, d2)
}

/// `∂μ/∂z*`, `∂Σ/∂z*` and `∂²μ/∂z*²` of output `d`.
pub fn grad_posterior(model: &GpModel, d: usize, zs: &FeatureVec) -> (FeatureVec, FeatureVec, FeatureMat) {
    model.posterior_derivatives(d, zs)
}

/// Partial derivatives of one belief step `(μ, Σ) → (μ', Σ')`, holding the
/// other inputs fixed. Matrix arguments are perturbed entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPartials {
    /// `∂μ'/∂μ`.
    pub dmu_dmu: StateMat,
    /// `∂μ'/∂Σ_ab`; identically zero.
    pub dmu_dsigma: [[StateVec; NX]; NX],
    pub dmu_dkc: [StateVec; N_KC],
    /// `∂Σ'/∂μ_j`.
    pub dsigma_dmu: [StateMat; NX],
    /// `∂Σ'/∂Σ_ab`.
    pub dsigma_dsigma: [[StateMat; NX]; NX],
    pub dsigma_dkc: [StateMat; N_KC],
}

/// Plant input channel and state column of gain `p` (row-major over `Kc`).
fn gain_position(p: usize) -> (usize, usize) {
    (FEEDBACK_CHANNELS[p / NX], p % NX)
}

pub fn grad_state_distribution(
    bx: &StateBelief,
    policy: &Policy,
    t: usize,
    gp: &GpModel,
    dss: &DiscreteStateSpace,
    reference: &ReferenceTrajectory,
    mode: Propagation,
) -> LocalPartials {
    let bz = joint_z_moments(bx, policy, t, reference);
    let p = joint_map(policy);
    let acl = closed_loop(dss, policy);
    let e = reference.xbar[t] - bx.mu;

    let mut g = SMatrix::<f64, NX, NZ>::zeros();
    let mut dsig = [FeatureVec::zeros(); NX];
    let mut hess = [FeatureMat::zeros(); NX];
    if gp.is_enabled() {
        for d in 0..NX {
            let (dm, ds, h) = grad_posterior(gp, d, &bz.mu);
            g.set_row(d, &dm.transpose());
            dsig[d] = ds;
            hess[d] = h;
        }
    }
    let gp_rows = g * p;
    let m = acl + gp_rows;
    let correlated = mode == Propagation::Correlated;
    // Σz ∇μ_dᵀ, reused by every diagonal-mode variance derivative.
    let sz_g: [FeatureVec; NX] = std::array::from_fn(|d| bz.sigma * g.row(d).transpose());

    // ∂v_d along a direction `w` of the joint mean.
    let dv_dmean = |d: usize, w: &FeatureVec| {
        let taylor = if correlated { 0.0 } else { 2.0 * sz_g[d].dot(&(hess[d] * w)) };
        dsig[d].dot(w) + taylor
    };
    // Change of `∇μ P` when the joint mean moves along `w`.
    let dg_along = |w: &FeatureVec| SMatrix::<f64, NX, NZ>::from_fn(|d, k| (hess[d] * w)[k]);
    // d(M Σ Mᵀ) for a change `dm` of M.
    let congruence = |dm: &StateMat| {
        let a = dm * bx.sigma * m.transpose();
        a + a.transpose()
    };

    let dsigma_dmu = std::array::from_fn(|j| {
        let col = p.column(j).into_owned();
        let diag = StateMat::from_diagonal(&StateVec::from_fn(|d, _| dv_dmean(d, &col)));
        if correlated {
            congruence(&(dg_along(&col) * p)) + diag
        } else {
            diag
        }
    });
    let dsigma_dsigma = std::array::from_fn(|a| {
        std::array::from_fn(|b| {
            if correlated {
                m.column(a) * m.column(b).transpose()
            } else {
                acl.column(a) * acl.column(b).transpose()
                    + StateMat::from_diagonal(&StateVec::from_fn(|d, _| gp_rows[(d, a)] * gp_rows[(d, b)]))
            }
        })
    });

    let mut dmu_dkc = [StateVec::zeros(); N_KC];
    let mut dsigma_dkc = [StateMat::zeros(); N_KC];
    for k in 0..N_KC {
        let (ch, c) = gain_position(k);
        let bcol = dss.bd.column(ch).into_owned();
        // Joint mean moves along the control channel by the tracking error.
        let mut w = FeatureVec::zeros();
        w[NX + ch] = e[c];
        dmu_dkc[k] = bcol * e[c] + g * w;

        // d(Ad − Bd K̃c) = −b_ch e_cᵀ
        let mut da = StateMat::zeros();
        da.set_column(c, &(-bcol));
        let mut dp = SMatrix::<f64, NZ, NX>::zeros();
        dp[(NX + ch, c)] = -1.0;
        dsigma_dkc[k] = if correlated {
            let dm = da + dg_along(&w) * p + g * dp;
            let dv = StateVec::from_fn(|d, _| dv_dmean(d, &w));
            congruence(&dm) + StateMat::from_diagonal(&dv)
        } else {
            let dsz = dp * bx.sigma * p.transpose() + p * bx.sigma * dp.transpose();
            let dv = StateVec::from_fn(|d, _| {
                let gd = g.row(d).transpose();
                dv_dmean(d, &w) + gd.dot(&(dsz * gd))
            });
            da * bx.sigma * acl.transpose() + acl * bx.sigma * da.transpose() + StateMat::from_diagonal(&dv)
        };
    }

    LocalPartials {
        dmu_dmu: m,
        dmu_dsigma: [[StateVec::zeros(); NX]; NX],
        dmu_dkc,
        dsigma_dmu,
        dsigma_dsigma,
        dsigma_dkc,
    }
}

/// `∂E/∂μ` and `∂E/∂Σ` of the expected cost.
pub fn grad_cost(bx: &StateBelief, xbar: &StateVec, cost: &CostConfig) -> (StateVec, StateMat) {
    let ct = cost_terms(bx, xbar, cost);
    let keep = 1.0 - ct.value;
    let se = ct.s * ct.e;
    (se * keep, (ct.s - se * se.transpose()) * (0.5 * keep))
}

/// Analytic `dJ/dKc` by forward accumulation of `dμ/dKc`, `dΣ/dKc` along the rollout.
pub fn grad_j_analytic_kc(policy: &Policy, ctx: &RolloutContext) -> [f64; N_KC] {
    analytic_kc(policy, ctx, false)
}

fn analytic_kc(policy: &Policy, ctx: &RolloutContext, corrupt: bool) -> [f64; N_KC] {
    let horizon = ctx.reference.horizon();
    let mut dmu = [StateVec::zeros(); N_KC];
    let mut dsigma = [StateMat::zeros(); N_KC];
    let mut grad = [0.0; N_KC];
    let mut b = ctx.x0;
    for t in 0..=horizon {
        let (ge_mu, ge_sigma) = grad_cost(&b, &ctx.reference.xbar[t], ctx.cost);
        for k in 0..N_KC {
            grad[k] += ge_mu.dot(&dmu[k]) + ge_sigma.component_mul(&dsigma[k]).sum();
        }
        if t == horizon {
            break;
        }
        let lp = grad_state_distribution(&b, policy, t, ctx.gp, ctx.dss, ctx.reference, ctx.cost.propagation);
        for k in 0..N_KC {
            let mut sig = lp.dsigma_dkc[k];
            for j in 0..NX {
                sig += lp.dsigma_dmu[j] * dmu[k][j];
            }
            for a in 0..NX {
                for c in 0..NX {
                    sig += lp.dsigma_dsigma[a][c] * dsigma[k][(a, c)];
                }
            }
            let mut direct = lp.dmu_dkc[k];
            if corrupt {
                direct *= 1.01;
            }
            dmu[k] = lp.dmu_dmu * dmu[k] + direct;
            dsigma[k] = sig;
        }
        b = propagate(&b, policy, t, ctx.gp, ctx.dss, ctx.reference, ctx.cost.propagation);
    }
    grad
}

/// Finite-difference gradient next to the analytic gains.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub grad_fd: [f64; N_PARAMS],
    pub grad_analytic_kc: [f64; N_KC],
    pub rel_err: [f64; N_KC],
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn compute(params: &PolicyParams, ctx: &RolloutContext, h_rel: f64) -> Result<Self> {
        Self::build(params, ctx, h_rel, false)
    }

    /// Same as [`GradReport::compute`] with a deliberate error in the analytic chain.
    #[doc(hidden)]
    pub fn compute_corrupted(params: &PolicyParams, ctx: &RolloutContext, h_rel: f64) -> Result<Self> {
        Self::build(params, ctx, h_rel, true)
    }

    fn build(params: &PolicyParams, ctx: &RolloutContext, h_rel: f64, corrupt: bool) -> Result<Self> {
        let grad_fd = grad_j_fd(params, ctx, h_rel)?;
        let policy = Policy::new(*params, ctx.reference)?;
        let grad_analytic_kc = analytic_kc(&policy, ctx, corrupt);
        let rel_err: [f64; N_KC] = std::array::from_fn(|k| relative_error(grad_analytic_kc[k], grad_fd[KC_OFFSET + k]));
        let max_rel_err = rel_err.iter().fold(0.0, |m: f64, v| m.max(*v));
        Ok(Self { grad_fd, grad_analytic_kc, rel_err, max_rel_err })
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:>16} {:>16} {:>10}\n", "param", "finite-diff", "analytic", "rel-err");
        for i in 0..N_PARAMS {
            let _ = if i < KC_OFFSET {
                writeln!(out, "{:<8} {:>16.8e} {:>16} {:>10}", PARAM_NAMES[i], self.grad_fd[i], "-", "-")
            } else {
                let k = i - KC_OFFSET;
                writeln!(
                    out,
                    "{:<8} {:>16.8e} {:>16.8e} {:>10.2e}",
                    PARAM_NAMES[i], self.grad_fd[i], self.grad_analytic_kc[k], self.rel_err[k]
                )
            };
        }
        let _ = writeln!(out, "max relative error: {:.3e}", self.max_rel_err);
        out
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
