//! Simulated test bench.
//!
//! The "true" plant is the nominal discrete model plus effects the controller
//! does not know about: viscous and Coulomb friction on the motor shaft,
//! clutch torque gain errors, saturation of the clutch commands at zero, and
//! additive Gaussian measurement noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::Policy;
use crate::driveline::DiscreteStateSpace;
use crate::error::{Error, Result};
use crate::linalg::{ControlVec, StateVec};
use crate::reference::{FeedforwardParams, ReferenceTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Motor viscous friction (Nm·s/rad).
    pub viscous: f64,
    /// Motor Coulomb friction level (Nm).
    pub coulomb: f64,
    /// Speed scale of the tanh blending of the Coulomb term (rad/s).
    pub coulomb_blend: f64,
    /// Clutch 1 torque gain error (applied / commanded).
    pub g1: f64,
    /// Clutch 2 torque gain error.
    pub g2: f64,
    /// Measurement noise standard deviation on the three speeds (rad/s).
    pub noise_speed: f64,
    /// Measurement noise standard deviation on the elongation (rad).
    pub noise_elongation: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            viscous: 0.02,
            coulomb: 0.3,
            coulomb_blend: 0.5,
            g1: 0.85,
            g2: 0.85,
            noise_speed: 0.02,
            noise_elongation: 2e-4,
        }
    }
}

impl BenchConfig {
    /// A bench that behaves exactly like the nominal model.
    pub fn ideal() -> Self {
        Self {
            viscous: 0.0,
            coulomb: 0.0,
            coulomb_blend: 1.0,
            g1: 1.0,
            g2: 1.0,
            noise_speed: 0.0,
            noise_elongation: 0.0,
        }
    }

    /// Default perturbations without measurement noise.
    pub fn noiseless(self) -> Self {
        Self { noise_speed: 0.0, noise_elongation: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_speed >= 0.0
            && self.noise_elongation >= 0.0
            && self.g1 > 0.0
            && self.g2 > 0.0
            && self.coulomb_blend > 0.0
            && self.viscous.is_finite()
            && self.coulomb.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid bench configuration: {self:?}")))
        }
    }

    /// Friction torque opposing the motor at speed `w`.
    pub fn motor_loss(&self, w: f64) -> f64 {
        self.viscous * w + self.coulomb * (w / self.coulomb_blend).tanh()
    }

    fn noise_std(&self) -> StateVec {
        StateVec::new(self.noise_speed, self.noise_speed, self.noise_speed, self.noise_elongation)
    }
}

/// Clutch commands saturated at zero; the motor channel is unlimited.
pub fn saturate(u: &ControlVec) -> ControlVec {
    ControlVec::new(u[0], u[1].max(0.0), u[2].max(0.0))
}

/// One step of the true plant. Returns the next state and the saturated command.
pub fn step_true(
    x: &StateVec,
    u_cmd: &ControlVec,
    bench: &BenchConfig,
    dss: &DiscreteStateSpace,
) -> (StateVec, ControlVec) {
    let applied = saturate(u_cmd);
    let effective = ControlVec::new(
        applied[0] - bench.motor_loss(x[0]),
        bench.g1 * applied[1],
        bench.g2 * applied[2],
    );
    (dss.step(x, &effective), applied)
}

/// One recorded gearshift on the bench.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub times: Vec<f64>,
    /// Measured states, `T + 1` samples.
    pub states: Vec<StateVec>,
    /// Commanded controls, `T` samples.
    pub commanded: Vec<ControlVec>,
    /// Saturated controls sent to the actuators, `T` samples.
    pub applied: Vec<ControlVec>,
    /// Reference states used by the controller, `T + 1` samples.
    pub reference: Vec<StateVec>,
}

/// Runs the policy over the full reference horizon starting from `x0`.
pub fn run_trial(
    policy: &Policy,
    reference: &ReferenceTrajectory,
    bench: &BenchConfig,
    dss: &DiscreteStateSpace,
    x0: &StateVec,
    seed: u64,
) -> Result<Trial> {
    let horizon = reference.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = bench.noise_std();
    let mut trial = Trial {
        times: reference.t_grid.clone(),
        states: Vec::with_capacity(horizon + 1),
        commanded: Vec::with_capacity(horizon),
        applied: Vec::with_capacity(horizon),
        reference: reference.xbar.clone(),
    };
    let mut x = *x0;
    for t in 0..=horizon {
        let noise = StateVec::from_fn(|i, _| {
            let n: f64 = StandardNormal.sample(&mut rng);
            std[i] * n
        });
        let y = x + noise;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::TrialAborted { step: t, partial: Box::new(trial) });
        }
        trial.states.push(y);
        if t == horizon {
            break;
        }
        let u = policy.control(&y, t, reference);
        let (next, applied) = step_true(&x, &u, bench, dss);
        trial.commanded.push(u);
        trial.applied.push(applied);
        x = next;
    }
    Ok(trial)
}

/// Tracking-error norms of the vehicle speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub e_inf: f64,
    pub e_end: f64,
    pub e_2: f64,
}

impl ErrorMetrics {
    pub fn from_errors(e: &[f64]) -> Self {
        Self {
            e_inf: e.iter().fold(0.0, |m, v| m.max(v.abs())),
            e_end: e.last().map_or(0.0, |v| v.abs()),
            e_2: e.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

/// Vehicle speed error `ω_v,measured − ω_v,ref` over the trial; the end-point
/// error is taken at the last sample, i.e. the end of the shift.
pub fn error_metrics(trial: &Trial) -> ErrorMetrics {
    let e: Vec<f64> = trial
        .states
        .iter()
        .zip(&trial.reference)
        .map(|(x, r)| x[2] - r[2])
        .collect();
    ErrorMetrics::from_errors(&e)
}

/// Motor torque deficit at constant speed `w`, measured as the one-step
/// residual of the bench against the nominal model with all torques at zero.
pub fn measure_motor_deficit(bench: &BenchConfig, dss: &DiscreteStateSpace, w: f64) -> f64 {
    let x = StateVec::new(w, 0.0, 0.0, 0.0);
    let u = ControlVec::zeros();
    let (measured, _) = step_true(&x, &u, bench, dss);
    let nominal = dss.step(&x, &u);
    -(measured[0] - nominal[0]) / dss.bd[(0, 0)]
}

/// Initial feedforward: `a1`, `a2` from a least-squares fit of the motor
/// torque deficit at the two extreme reference motor speeds, clutch scales at one.
pub fn heuristic_feedforward(
    bench: &BenchConfig,
    dss: &DiscreteStateSpace,
    reference: &ReferenceTrajectory,
) -> FeedforwardParams {
    let (lo, hi) = reference
        .xbar
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x[0]), hi.max(x[0])));
    let w_out = reference.xbar[0][1];
    let samples: Vec<(f64, f64)> = [lo, hi]
        .iter()
        .map(|&w| (w / w_out, measure_motor_deficit(bench, dss, w)))
        .collect();
    // Normal equations for deficit ≈ a1·ratio + a2.
    let n = samples.len() as f64;
    let sx: f64 = samples.iter().map(|s| s.0).sum();
    let sy: f64 = samples.iter().map(|s| s.1).sum();
    let sxx: f64 = samples.iter().map(|s| s.0 * s.0).sum();
    let sxy: f64 = samples.iter().map(|s| s.0 * s.1).sum();
    let det = n * sxx - sx * sx;
    let (a1, a2) = if det.abs() > 1e-12 {
        let a1 = (n * sxy - sx * sy) / det;
        (a1, (sy - a1 * sx) / n)
    } else {
        (0.0, sy / n)
    };
    FeedforwardParams { a1, a2, a3: 1.0, a4: 1.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DrivelineConfig, LearningConfig};
    use crate::controller::PolicyParams;
    use crate::driveline::{build_state_space, discretize};
    use crate::linalg::GainMat;
    use crate::reference::{build_reference, nominal_command};
    use approx::assert_abs_diff_eq;

    struct Setup {
        dss: DiscreteStateSpace,
        reference: ReferenceTrajectory,
        x0: StateVec,
        policy: Policy,
    }

    fn setup() -> Setup {
        let p = DrivelineConfig::default().calibrated().unwrap().0;
        let ss = build_state_space(&p).unwrap();
        let dss = discretize(&ss, 0.01).unwrap();
        let cfg = LearningConfig::default();
        let rc = cfg.reference_config(&p);
        let mut reference = build_reference(&p, &rc).unwrap();
        nominal_command(&mut reference, &p, &ss).unwrap();
        let kc = crate::controller::lqr_init(&dss, &cfg.controller().q_matrix(), &cfg.controller().r_matrix()).unwrap();
        let policy = Policy::new(PolicyParams { ff: FeedforwardParams::IDENTITY, kc }, &reference).unwrap();
        Setup { dss, reference, x0: rc.x0, policy }
    }

    #[test]
    fn ideal_bench_is_nominal() {
        let s = setup();
        let x = StateVec::new(20.0, 10.0, 9.8, 0.3);
        let u = ControlVec::new(1.0, 2.0, 0.5);
        let (next, _) = step_true(&x, &u, &BenchConfig::ideal(), &s.dss);
        assert_eq!(next, s.dss.step(&x, &u));
    }

    #[test]
    fn clutch_commands_saturate_at_zero() {
        let s = setup();
        let x = StateVec::new(20.0, 10.0, 10.0, 0.3);
        let (_, applied) = step_true(&x, &ControlVec::new(-1.0, 0.5, -1.0), &BenchConfig::default(), &s.dss);
        assert_eq!(applied, ControlVec::new(-1.0, 0.5, 0.0));
    }

    #[test]
    fn constant_speed_deficit_is_friction_sum() {
        let s = setup();
        let b = BenchConfig::default();
        for w in [5.0, 10.0, 21.0] {
            let expected = 0.02 * w + 0.3 * (w / 0.5f64).tanh();
            assert_abs_diff_eq!(measure_motor_deficit(&b, &s.dss, w), expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn heuristic_recovers_linear_friction() {
        let s = setup();
        let b = BenchConfig::default();
        let ff = heuristic_feedforward(&b, &s.dss, &s.reference);
        // Coulomb friction is saturated at both speeds, so the fit is exact.
        let w_out = s.reference.xbar[0][1];
        assert_abs_diff_eq!(ff.a1, 0.02 * w_out, epsilon = 1e-6);
        assert_abs_diff_eq!(ff.a2, 0.3, epsilon = 1e-6);
        assert_eq!((ff.a3, ff.a4), (1.0, 1.0));
    }

    #[test]
    fn same_seed_same_trial() {
        let s = setup();
        let b = BenchConfig::default();
        let t1 = run_trial(&s.policy, &s.reference, &b, &s.dss, &s.x0, 7).unwrap();
        let t2 = run_trial(&s.policy, &s.reference, &b, &s.dss, &s.x0, 7).unwrap();
        assert_eq!(t1, t2);
        let t3 = run_trial(&s.policy, &s.reference, &b, &s.dss, &s.x0, 8).unwrap();
        assert_ne!(t1.states, t3.states);
        assert_eq!(t1.states.len(), 101);
        assert_eq!(t1.commanded.len(), 100);
        assert!(t1.applied.iter().all(|u| u[1] >= 0.0 && u[2] >= 0.0));
    }

    #[test]
    fn noiseless_trial_commands_follow_policy() {
        let s = setup();
        let b = BenchConfig::default().noiseless();
        let t = run_trial(&s.policy, &s.reference, &b, &s.dss, &s.x0, 0).unwrap();
        for (i, u) in t.commanded.iter().enumerate() {
            assert_eq!(*u, s.policy.control(&t.states[i], i, &s.reference));
        }
        assert_eq!(t.states[0], s.x0);
    }

    #[test]
    fn motor_channel_never_saturates_by_default() {
        let s = setup();
        let t = run_trial(&s.policy, &s.reference, &BenchConfig::default(), &s.dss, &s.x0, 3).unwrap();
        for (c, a) in t.commanded.iter().zip(&t.applied) {
            assert_eq!(c[0], a[0]);
        }
    }

    #[test]
    fn diverging_policy_aborts_with_partial_trace() {
        let s = setup();
        let params = PolicyParams { ff: FeedforwardParams::IDENTITY, kc: GainMat::from_element(-1e3) };
        let policy = Policy::new(params, &s.reference).unwrap();
        match run_trial(&policy, &s.reference, &BenchConfig::default(), &s.dss, &s.x0, 0) {
            Err(Error::TrialAborted { step, partial }) => {
                assert_eq!(partial.states.len(), step);
                assert!(step > 0);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn metrics_closed_forms() {
        let zero = ErrorMetrics::from_errors(&[0.0; 50]);
        assert_eq!((zero.e_inf, zero.e_end, zero.e_2), (0.0, 0.0, 0.0));
        let ones = ErrorMetrics::from_errors(&[1.0; 100]);
        assert_eq!(ones.e_inf, 1.0);
        assert_eq!(ones.e_end, 1.0);
        assert_abs_diff_eq!(ones.e_2, 10.0, epsilon = 1e-12);
    }
}
