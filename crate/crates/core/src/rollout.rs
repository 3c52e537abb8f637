//! Gaussian belief rollouts of a policy through the nominal model plus the
//! learned residual, and the saturating tracking cost.

use std::fmt::Write as _;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::controller::Policy;
use crate::driveline::DiscreteStateSpace;
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::linalg::{psd_floor, symmetrize, FeatureVec, StateMat, StateVec, NU, NX, NZ};
use crate::reference::ReferenceTrajectory;

/// Eigenvalue floor applied to propagated covariances.
pub const PSD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBelief<const N: usize> {
    pub mu: SVector<f64, N>,
    pub sigma: SMatrix<f64, N, N>,
}

pub type StateBelief = GaussianBelief<NX>;
pub type JointBelief = GaussianBelief<NZ>;

impl<const N: usize> GaussianBelief<N> {
    pub fn new(mu: SVector<f64, N>, sigma: SMatrix<f64, N, N>) -> Self {
        Self { mu, sigma }
    }

    pub fn point(mu: SVector<f64, N>) -> Self {
        Self { mu, sigma: SMatrix::zeros() }
    }

    pub fn isotropic(mu: SVector<f64, N>, var: f64) -> Self {
        Self { mu, sigma: SMatrix::identity() * var }
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(self.sigma.iter()).all(|v| v.is_finite())
    }
}

/// How the GP input uncertainty enters the next state covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// `Σ' = Acl Σ Aclᵀ + diag(Σ_d(μz) + ∇μ_d Σz ∇μ_dᵀ)`. The Taylor term is
    /// added as independent noise, so a strongly sloped GP inflates Σ.
    Diagonal,
    /// `Σ' = M Σ Mᵀ + diag(Σ_d(μz))` with `M = Acl + ∇μ P`: the same first-order
    /// expansion, keeping its correlation with the nominal part.
    #[default]
    Correlated,
}

/// Widths of the saturating cost, as `L⁻¹ = diag(l_inv)`, and the belief
/// propagation mode used by rollouts scored with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub l_inv: [f64; NX],
    pub propagation: Propagation,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { l_inv: [0.25, 1.0, 25.0, 100.0], propagation: Propagation::default() }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_inv.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("cost: l_inv entries must be finite and non-negative, got {:?}", self.l_inv)))
        }
    }

    pub fn l_inv_matrix(&self) -> StateMat {
        StateMat::from_diagonal(&StateVec::from(self.l_inv))
    }
}

/// `P = [I; −K̃c]`, the map from state deviations to joint deviations.
pub fn joint_map(policy: &Policy) -> SMatrix<f64, NZ, NX> {
    let mut p = SMatrix::<f64, NZ, NX>::zeros();
    p.fixed_view_mut::<NX, NX>(0, 0).fill_with_identity();
    p.fixed_view_mut::<NU, NX>(NX, 0).copy_from(&(-policy.gain));
    p
}

/// Joint belief over `z = [x; u]` under the linear policy.
pub fn joint_z_moments(bx: &StateBelief, policy: &Policy, t: usize, reference: &ReferenceTrajectory) -> JointBelief {
    let u = policy.control(&bx.mu, t, reference);
    let mu = FeatureVec::from_iterator(bx.mu.iter().chain(u.iter()).copied());
    let p = joint_map(policy);
    let mut sigma = p * bx.sigma * p.transpose();
    symmetrize(&mut sigma);
    JointBelief { mu, sigma }
}

/// GP output `d` at an uncertain input, linearized at the input mean:
/// mean `μ_d(μz)` and variance `Σ_d(μz) + ∇μ_d Σz ∇μ_dᵀ`.
pub fn gp_taylor_moments(model: &GpModel, d: usize, bz: &JointBelief) -> (f64, f64) {
    let p = model.predict(d, &bz.mu);
    (p.mean, p.var + (p.dmean.transpose() * bz.sigma * p.dmean)[0])
}

/// One belief step: nominal model, linear policy and GP residual.
pub fn propagate(
    bx: &StateBelief,
    policy: &Policy,
    t: usize,
    gp: &GpModel,
    dss: &DiscreteStateSpace,
    reference: &ReferenceTrajectory,
    mode: Propagation,
) -> StateBelief {
    let bz = joint_z_moments(bx, policy, t, reference);
    let u = bz.mu.fixed_rows::<NU>(NX).into_owned();
    let acl = closed_loop(dss, policy);
    let mut f = StateVec::zeros();
    let mut v = StateVec::zeros();
    let mut m = acl;
    if gp.is_enabled() {
        match mode {
            Propagation::Diagonal => {
                for d in 0..NX {
                    (f[d], v[d]) = gp_taylor_moments(gp, d, &bz);
                }
            }
            Propagation::Correlated => {
                let p = joint_map(policy);
                for d in 0..NX {
                    let pr = gp.predict(d, &bz.mu);
                    f[d] = pr.mean;
                    v[d] = pr.var;
                    let row = pr.dmean.transpose() * p;
                    for j in 0..NX {
                        m[(d, j)] += row[j];
                    }
                }
            }
        }
    }
    let mu = dss.ad * bx.mu + dss.bd * u + f + dss.tau0d;
    let mut sigma = m * bx.sigma * m.transpose() + StateMat::from_diagonal(&v);
    symmetrize(&mut sigma);
    psd_floor(&mut sigma, PSD_TOL);
    StateBelief { mu, sigma }
}

/// `Ad − Bd K̃c`.
pub fn closed_loop(dss: &DiscreteStateSpace, policy: &Policy) -> StateMat {
    dss.ad - dss.bd * policy.gain
}

/// Quantities shared by the cost and its derivatives.
pub(crate) struct CostTerms {
    pub value: f64,
    /// `S̃ = L⁻¹ (I + Σ L⁻¹)⁻¹`.
    pub s: StateMat,
    pub e: StateVec,
}

pub(crate) fn cost_terms(bx: &StateBelief, xbar: &StateVec, cost: &CostConfig) -> CostTerms {
    let e = bx.mu - xbar;
    let saturated = CostTerms { value: 1.0, s: StateMat::zeros(), e };
    let w = cost.l_inv_matrix();
    let det = (StateMat::identity() + bx.sigma * w).determinant();
    if !(det.is_finite() && det > 0.0) {
        return saturated;
    }
    // S̃ = W (I + Σ W)⁻¹ = W½ (I + W½ Σ W½)⁻¹ W½, factored in the symmetric form.
    let half = StateMat::from_diagonal(&StateVec::from(cost.l_inv.map(f64::sqrt)));
    let Some(chol) = (StateMat::identity() + half * bx.sigma * half).cholesky() else {
        return saturated;
    };
    let mut s = half * chol.inverse() * half;
    symmetrize(&mut s);
    let q = (e.transpose() * s * e)[0].max(0.0);
    CostTerms { value: 1.0 - det.powf(-0.5) * (-0.5 * q).exp(), s, e }
}

/// `E[1 − exp(−½ (x − x̄)ᵀ L⁻¹ (x − x̄))]` for `x ~ N(μ, Σ)`.
pub fn expected_cost(bx: &StateBelief, xbar: &StateVec, cost: &CostConfig) -> f64 {
    cost_terms(bx, xbar, cost).value
}

/// Deterministic cost at a single state.
pub fn immediate_cost(x: &StateVec, xbar: &StateVec, cost: &CostConfig) -> f64 {
    let e = x - xbar;
    1.0 - (-0.5 * e.dot(&(cost.l_inv_matrix() * e))).exp()
}

/// Fixed inputs of a rollout.
#[derive(Debug, Clone, Copy)]
pub struct RolloutContext<'a> {
    pub dss: &'a DiscreteStateSpace,
    pub reference: &'a ReferenceTrajectory,
    pub gp: &'a GpModel,
    pub cost: &'a CostConfig,
    pub x0: StateBelief,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub beliefs: Vec<StateBelief>,
    pub step_costs: Vec<f64>,
    pub total: f64,
}

/// Propagates the initial belief over the reference horizon and sums the
/// expected cost of every belief, the initial one included.
pub fn simulate_rollout(policy: &Policy, ctx: &RolloutContext) -> RolloutResult {
    let horizon = ctx.reference.horizon();
    let mut beliefs = Vec::with_capacity(horizon + 1);
    let mut step_costs = Vec::with_capacity(horizon + 1);
    let mut b = ctx.x0;
    for t in 0..=horizon {
        step_costs.push(expected_cost(&b, &ctx.reference.xbar[t], ctx.cost));
        beliefs.push(b);
        if t < horizon {
            b = propagate(&b, policy, t, ctx.gp, ctx.dss, ctx.reference, ctx.cost.propagation);
        }
    }
    let total = step_costs.iter().sum();
    RolloutResult { beliefs, step_costs, total }
}

/// Cost-only rollout, for line searches and finite differences.
pub fn rollout_cost(policy: &Policy, ctx: &RolloutContext) -> f64 {
    let horizon = ctx.reference.horizon();
    let mut b = ctx.x0;
    let mut total = 0.0;
    for t in 0..=horizon {
        total += expected_cost(&b, &ctx.reference.xbar[t], ctx.cost);
        if t < horizon {
            b = propagate(&b, policy, t, ctx.gp, ctx.dss, ctx.reference, ctx.cost.propagation);
        }
    }
    total
}

impl RolloutResult {
    /// `t, mu_0..3, var_0..3, step_cost`.
    pub fn to_csv(&self, times: &[f64]) -> String {
        let mut out = String::from("t,mu_0,mu_1,mu_2,mu_3,var_0,var_1,var_2,var_3,step_cost\n");
        for ((t, b), c) in times.iter().zip(&self.beliefs).zip(&self.step_costs) {
            let _ = write!(out, "{t}");
            for v in b.mu.iter().chain(b.sigma.diagonal().iter()) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{c}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{run_trial, BenchConfig};
    use crate::config::Setup;
    use crate::controller::PolicyParams;
    use crate::gp::{Dataset, GpHyper};
    use crate::linalg::{min_eigenvalue, FeatureMat, GainMat};
    use crate::reference::FeedforwardParams;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn setup() -> Setup {
        Setup::defaults().unwrap()
    }

    fn policy(s: &Setup, kc: GainMat) -> Policy {
        Policy::new(PolicyParams { ff: FeedforwardParams { a1: 0.1, a2: 0.2, a3: 0.95, a4: 1.05 }, kc }, &s.reference).unwrap()
    }

    fn lqr(s: &Setup) -> GainMat {
        let c = s.learning.controller();
        crate::controller::lqr_init(&s.dss, &c.q_matrix(), &c.r_matrix()).unwrap()
    }

    fn random_psd<const N: usize>(rng: &mut ChaCha8Rng, scale: f64) -> SMatrix<f64, N, N> {
        let a = SMatrix::<f64, N, N>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        a * a.transpose() * scale
    }

    fn toy_gp(seed: u64) -> GpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<FeatureVec> = (0..30)
            .map(|_| {
                FeatureVec::from_column_slice(&[
                    rng.gen_range(17.0..23.0),
                    rng.gen_range(9.0..11.0),
                    rng.gen_range(9.0..11.0),
                    rng.gen_range(0.2..0.35),
                    rng.gen_range(0.0..5.0),
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..4.0),
                ])
            })
            .collect();
        let y = z.iter().map(|zi| StateVec::new(-0.01 * zi[0].sin(), 0.002 * zi[4], 0.003 * zi[6].cos(), 1e-4 * zi[1])).collect();
        let h = GpHyper::new(1e-4, [2.0, 1.0, 1.0, 0.05, 2.0, 1.0, 2.0], 1e-6);
        GpModel::fit(&Dataset { z, y }, &[h; NX]).unwrap()
    }

    #[test]
    fn deterministic_joint_moments() {
        let s = setup();
        let pol = policy(&s, lqr(&s));
        let x = StateVec::new(20.5, 10.1, 9.9, 0.28);
        let bz = joint_z_moments(&StateBelief::point(x), &pol, 10, &s.reference);
        assert_eq!(bz.sigma, FeatureMat::zeros());
        let u = pol.control(&x, 10, &s.reference);
        assert_eq!(bz.mu.fixed_rows::<NU>(NX).into_owned(), u);
    }

    #[test]
    fn zero_gain_joint_moments_are_block_diagonal() {
        let s = setup();
        let pol = policy(&s, GainMat::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sig = random_psd::<NX>(&mut rng, 0.1);
        let bz = joint_z_moments(&StateBelief::new(s.x0, sig), &pol, 0, &s.reference);
        let mut expected = FeatureMat::zeros();
        expected.fixed_view_mut::<NX, NX>(0, 0).copy_from(&sig);
        assert_eq!(bz.sigma, expected);
    }

    #[test]
    fn joint_covariance_stays_psd() {
        let s = setup();
        let pol = policy(&s, lqr(&s));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let sig = random_psd::<NX>(&mut rng, 1.0);
            let bz = joint_z_moments(&StateBelief::new(s.x0, sig), &pol, 5, &s.reference);
            assert!(min_eigenvalue(&bz.sigma) > -1e-10 * bz.sigma.amax().max(1.0));
            assert_eq!(bz.sigma, bz.sigma.transpose());
        }
    }

    #[test]
    fn taylor_moments_reduce_to_posterior() {
        let gp = toy_gp(3);
        let mu = FeatureVec::from_column_slice(&[20.0, 10.0, 10.0, 0.28, 2.0, 1.0, 1.0]);
        for d in 0..NX {
            let (m, v) = gp_taylor_moments(&gp, d, &JointBelief::point(mu));
            assert_eq!((m, v), gp.posterior(d, &mu));
        }
        assert_eq!(gp_taylor_moments(&GpModel::Disabled, 1, &JointBelief::isotropic(mu, 1.0)), (0.0, 0.0));
    }

    #[test]
    fn taylor_increment_is_linear_in_input_covariance() {
        let gp = toy_gp(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = FeatureVec::from_column_slice(&[19.0, 10.2, 9.8, 0.3, 1.0, 1.5, 2.0]);
        let sig = random_psd::<NZ>(&mut rng, 0.01);
        for d in 0..NX {
            let (_, v0) = gp.posterior(d, &mu);
            let (_, v1) = gp_taylor_moments(&gp, d, &JointBelief::new(mu, sig));
            let (_, v2) = gp_taylor_moments(&gp, d, &JointBelief::new(mu, sig * 2.0));
            assert!(v1 >= v0);
            assert_abs_diff_eq!(v2 - v0, 2.0 * (v1 - v0), epsilon = 1e-15 + 1e-12 * v1.abs());
        }
    }

    #[test]
    fn taylor_moments_match_monte_carlo() {
        let gp = toy_gp(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mu = FeatureVec::from_column_slice(&[20.0, 10.0, 10.0, 0.27, 2.5, 1.0, 2.0]);
        let ls = gp.hypers().unwrap()[0].log_lengthscales.map(|l| (2.0 * l).exp());
        // Correlated covariance scaled to 1% of the squared length-scales.
        let corr = random_psd::<NZ>(&mut rng, 1.0) + FeatureMat::identity();
        let scale = FeatureMat::from_diagonal(&FeatureVec::from_fn(|i, _| (0.01 * ls[i] / corr[(i, i)]).sqrt()));
        let sig = scale * corr * scale;
        let chol = sig.cholesky().unwrap().unpack();
        let n = 100_000;
        for d in 0..NX {
            let (m, v) = gp_taylor_moments(&gp, d, &JointBelief::new(mu, sig));
            let (mut s1, mut s2) = (0.0, 0.0);
            let mut r = ChaCha8Rng::seed_from_u64(100 + d as u64);
            for _ in 0..n {
                let w = FeatureVec::from_fn(|_, _| StandardNormal.sample(&mut r));
                let z = mu + chol * w;
                let (pm, pv) = gp.posterior(d, &z);
                s1 += pm;
                s2 += pm * pm + pv;
            }
            let mc_mean = s1 / n as f64;
            let mc_var = s2 / n as f64 - mc_mean * mc_mean;
            assert!((m - mc_mean).abs() <= 0.15 * mc_mean.abs().max(mc_var.sqrt()), "d={d} mean {m} vs {mc_mean}");
            assert!((v - mc_var).abs() <= 0.15 * mc_var, "d={d} var {v} vs {mc_var}");
        }
    }

    #[test]
    fn disabled_gp_point_belief_is_nominal_step() {
        let s = setup();
        let pol = policy(&s, lqr(&s));
        let x = StateVec::new(20.3, 10.0, 9.95, 0.29);
        let u = pol.control(&x, 3, &s.reference);
        for mode in [Propagation::Diagonal, Propagation::Correlated] {
            let b = propagate(&StateBelief::point(x), &pol, 3, &GpModel::Disabled, &s.dss, &s.reference, mode);
            assert_eq!(b.mu, s.dss.step(&x, &u));
            assert_eq!(b.sigma, StateMat::zeros());
        }
    }

    #[test]
    fn disabled_gp_covariance_is_closed_loop_congruence() {
        let s = setup();
        let pol = policy(&s, lqr(&s));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sig = random_psd::<NX>(&mut rng, 0.01) + StateMat::identity() * 1e-3;
        let acl = s.dss.ad - s.dss.bd * pol.gain;
        for mode in [Propagation::Diagonal, Propagation::Correlated] {
            let b = propagate(&StateBelief::new(s.x0, sig), &pol, 0, &GpModel::Disabled, &s.dss, &s.reference, mode);
            assert_abs_diff_eq!(b.sigma, acl * sig * acl.transpose(), epsilon = 1e-12);
        }
    }

    #[test]
    fn gp_variance_adds_to_diagonal() {
        let s = setup();
        let pol = policy(&s, lqr(&s));
        let gp = toy_gp(9);
        let bx = StateBelief::new(s.x0, StateMat::identity() * 1e-3);
        let b = propagate(&bx, &pol, 0, &gp, &s.dss, &s.reference, Propagation::Diagonal);
        let bz = joint_z_moments(&bx, &pol, 0, &s.reference);
        for d in 0..NX {
            let (_, v) = gp_taylor_moments(&gp, d, &bz);
            assert!(b.sigma[(d, d)] >= v);
        }
        assert!(min_eigenvalue(&b.sigma) >= -PSD_TOL);
    }

    #[test]
    fn correlated_covariance_is_mean_map_linearization() {
        let s = setup();
        let pol = policy(&s, lqr(&s));
        let gp = toy_gp(9);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sig = random_psd::<NX>(&mut rng, 1e-3) + StateMat::identity() * 1e-4;
        let bx = StateBelief::new(s.x0, sig);
        let b = propagate(&bx, &pol, 2, &gp, &s.dss, &s.reference, Propagation::Correlated);
        let mean_of = |x: StateVec| propagate(&StateBelief::point(x), &pol, 2, &gp, &s.dss, &s.reference, Propagation::Correlated);
        // Jacobian of the mean map by central differences.
        let h = 1e-6;
        let mut jac = StateMat::zeros();
        for j in 0..NX {
            let mut xp = s.x0;
            let mut xm = s.x0;
            xp[j] += h;
            xm[j] -= h;
            jac.set_column(j, &((mean_of(xp).mu - mean_of(xm).mu) / (2.0 * h)));
        }
        let point = mean_of(s.x0);
        assert_eq!(b.mu, point.mu);
        let expected = jac * sig * jac.transpose() + StateMat::from_diagonal(&point.sigma.diagonal());
        assert_relative_eq!(b.sigma, expected, max_relative = 1e-6, epsilon = 1e-12);
        assert!(min_eigenvalue(&b.sigma) >= -PSD_TOL);
    }

    #[test]
    fn cost_closed_forms() {
        let cost = CostConfig::default();
        let xbar = StateVec::new(21.0, 10.0, 10.0, 0.28);
        assert_eq!(expected_cost(&StateBelief::point(xbar), &xbar, &cost), 0.0);
        // Σ L⁻¹ = I in four dimensions.
        let sig = StateMat::from_diagonal(&StateVec::from(cost.l_inv.map(|w| 1.0 / w)));
        assert_eq!(expected_cost(&StateBelief::new(xbar, sig), &xbar, &cost), 0.75);
        let x = xbar + StateVec::new(0.5, -0.2, 0.1, 0.01);
        let e = x - xbar;
        let det_oracle = 1.0 - (-0.5 * (0.25 * e[0] * e[0] + e[1] * e[1] + 25.0 * e[2] * e[2] + 100.0 * e[3] * e[3])).exp();
        assert_abs_diff_eq!(expected_cost(&StateBelief::point(x), &xbar, &cost), det_oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(immediate_cost(&x, &xbar, &cost), det_oracle, epsilon = 1e-15);
    }

    #[test]
    fn infinitely_wide_cost_is_zero() {
        let s = setup();
        let pol = policy(&s, lqr(&s));
        let cost = CostConfig { l_inv: [0.0; NX], ..CostConfig::default() };
        let ctx = RolloutContext {
            dss: &s.dss,
            reference: &s.reference,
            gp: &GpModel::Disabled,
            cost: &cost,
            x0: StateBelief::isotropic(s.x0, 1e-4),
        };
        assert_eq!(simulate_rollout(&pol, &ctx).total, 0.0);
    }

    #[test]
    fn rollout_bookkeeping() {
        let s = setup();
        let pol = policy(&s, lqr(&s));
        let gp = toy_gp(10);
        let ctx = RolloutContext { dss: &s.dss, reference: &s.reference, gp: &gp, cost: &s.cost, x0: StateBelief::isotropic(s.x0, 1e-4) };
        let r = simulate_rollout(&pol, &ctx);
        assert_eq!(r.beliefs.len(), 101);
        assert_eq!(r.step_costs.len(), 101);
        assert_eq!(r.total, r.step_costs.iter().sum::<f64>());
        assert_eq!(r.total, rollout_cost(&pol, &ctx));
        assert!(r.total >= 0.0 && r.total < 101.0);
        for (b, c) in r.beliefs.iter().zip(&r.step_costs) {
            assert!((0.0..1.0).contains(c));
            assert_eq!(b.sigma, b.sigma.transpose());
            assert!(min_eigenvalue(&b.sigma) >= -PSD_TOL);
        }
        let csv = r.to_csv(&s.reference.t_grid);
        assert_eq!(csv.lines().count(), 102);
        assert!(csv.starts_with("t,mu_0"));
    }

    #[test]
    fn deterministic_chain_matches_ideal_bench() {
        let s = setup();
        let pol = policy(&s, lqr(&s));
        let x0 = s.reference.xbar[0];
        let ctx = RolloutContext { dss: &s.dss, reference: &s.reference, gp: &GpModel::Disabled, cost: &s.cost, x0: StateBelief::point(x0) };
        let r = simulate_rollout(&pol, &ctx);
        let trial = run_trial(&pol, &s.reference, &BenchConfig::ideal(), &s.dss, &x0, 0).unwrap();
        for (c, a) in trial.commanded.iter().zip(&trial.applied) {
            assert!((c - a).amax() < 1e-12, "saturation must stay inactive in this comparison");
        }
        for (b, x) in r.beliefs.iter().zip(&trial.states) {
            assert!((b.mu - x).amax() < 1e-9);
        }
    }

    #[test]
    fn exact_nominal_command_keeps_cost_near_zero() {
        let s = setup();
        let pol = Policy::new(PolicyParams { ff: FeedforwardParams::IDENTITY, kc: lqr(&s) }, &s.reference).unwrap();
        let ctx = RolloutContext {
            dss: &s.dss,
            reference: &s.reference,
            gp: &GpModel::Disabled,
            cost: &s.cost,
            x0: StateBelief::point(s.reference.xbar[0]),
        };
        let r = simulate_rollout(&pol, &ctx);
        assert_eq!(r.step_costs[0], 0.0);
        // Only the sampled-data mismatch of the continuous command remains.
        assert!(r.step_costs.iter().all(|c| *c < 1e-3), "max step cost {:?}", r.step_costs.iter().cloned().fold(0.0, f64::max));
    }
}
