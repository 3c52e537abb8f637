//! Configuration files and the assembled problem they describe.
//!
//! Every file is flat TOML; missing keys take their defaults and unknown keys
//! are rejected.

use std::path::Path;

use nalgebra::Matrix2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::driveline::{
    build_state_space, calibrate_driveline, discretize, Calibration, CalibrationTargets, DiscreteStateSpace,
    DrivelineParams, StateSpace,
};
use crate::error::{Error, Result};
use crate::gp::GpTrainConfig;
use crate::linalg::{StateMat, StateVec};
use crate::reference::{build_reference, nominal_command, ReferenceConfig, ReferenceTrajectory};
use crate::rollout::CostConfig;

/// Driveline coefficients, gear ratios, load and calibration targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrivelineConfig {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
    pub c8: f64,
    pub r1: f64,
    pub r2: f64,
    /// Vehicle load torque (Nm).
    pub tv: f64,
    pub natural_frequency_hz: f64,
    pub damping_ratio: f64,
    pub inertia_ratio: f64,
}

impl Default for DrivelineConfig {
    /// Reduced-scale transmission: motor 2e-3, output 4e-3 and carrier
    /// 0.5e-3 kg·m², gear ratios 2 and 1.
    fn default() -> Self {
        Self {
            c1: 516.129_032_258_064_5,
            c2: 64.516_129_032_258_06,
            c3: -645.161_290_322_580_6,
            c4: -580.645_161_290_322_6,
            c5: -64.516_129_032_258_06,
            c6: -258.064_516_129_032_26,
            c7: 580.645_161_290_322_6,
            c8: 322.580_645_161_290_3,
            r1: 2.0,
            r2: 1.0,
            tv: 3.5,
            natural_frequency_hz: 5.0,
            damping_ratio: 0.15,
            inertia_ratio: 0.1,
        }
    }
}

impl DrivelineConfig {
    pub fn coefficients(&self) -> [f64; 8] {
        [self.c1, self.c2, self.c3, self.c4, self.c5, self.c6, self.c7, self.c8]
    }

    pub fn targets(&self) -> CalibrationTargets {
        CalibrationTargets {
            natural_frequency_hz: self.natural_frequency_hz,
            damping_ratio: self.damping_ratio,
            inertia_ratio: self.inertia_ratio,
        }
    }

    /// Calibrates `I_v`, `k`, `d` and returns the full parameter set.
    pub fn calibrated(&self) -> Result<(DrivelineParams, Calibration)> {
        let c = self.coefficients();
        let cal = calibrate_driveline(&c, self.r1, &self.targets())?;
        let p = DrivelineParams {
            c,
            vehicle_inertia: cal.vehicle_inertia,
            stiffness: cal.stiffness,
            damping: cal.damping,
            load_torque: self.tv,
            ratio1: self.r1,
            ratio2: self.r2,
        };
        p.validate()?;
        Ok((p, cal))
    }
}

/// LQR weights: `Q = diag(q)`, `R = diag(r)` over the motor and clutch 2 channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub q: [f64; 4],
    pub r: [f64; 2],
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { q: [1.0, 1.0, 50.0, 50.0], r: [0.1, 0.1] }
    }
}

impl ControllerConfig {
    pub fn q_matrix(&self) -> StateMat {
        StateMat::from_diagonal(&StateVec::from(self.q))
    }

    pub fn r_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.r[0], 0.0, 0.0, self.r[1])
    }
}

/// Shift definition, initial belief, optimizer and GP settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningConfig {
    pub seed: u64,
    /// Control period (s).
    pub dt: f64,
    /// Shift duration (s).
    pub duration: f64,
    pub torque_fraction: f64,
    /// Motor speed at the start of the shift (rad/s).
    pub motor_speed: f64,
    pub outer_iters: usize,
    /// Stop when the trial error improves by less than 2% twice in a row.
    pub early_stop: bool,
    pub lqr_q: [f64; 4],
    pub lqr_r: [f64; 2],
    /// Initial belief covariance `σ0 I`.
    pub sigma0: f64,
    pub max_inner_iters: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_shrinks: usize,
    /// Relative central-difference step.
    pub fd_step: f64,
    pub n_max: usize,
    pub gp_starts: usize,
    pub gp_max_iters: usize,
    /// Length-scale floor relative to each feature's standard deviation.
    pub gp_min_lengthscale: f64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dt: 0.01,
            duration: 1.0,
            torque_fraction: 0.5,
            motor_speed: 20.0,
            outer_iters: 5,
            early_stop: false,
            lqr_q: ControllerConfig::default().q,
            lqr_r: ControllerConfig::default().r,
            sigma0: 1e-4,
            max_inner_iters: 200,
            grad_tol: 1e-6,
            rel_tol: 1e-8,
            armijo_c: 1e-4,
            shrink: 0.5,
            max_shrinks: 30,
            fd_step: 1e-5,
            n_max: 400,
            gp_starts: 2,
            gp_max_iters: 60,
            gp_min_lengthscale: 1.0,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.dt > 0.0, "dt must be positive"),
            (self.duration > 0.0 && self.duration.is_finite(), "duration must be positive"),
            (self.torque_fraction > 0.0 && self.torque_fraction < 1.0, "torque_fraction must lie in (0, 1)"),
            (self.motor_speed > 0.0 && self.motor_speed.is_finite(), "motor_speed must be positive"),
            (self.lqr_q.iter().all(|v| *v >= 0.0), "lqr_q entries must be non-negative"),
            (self.lqr_r.iter().all(|v| *v > 0.0), "lqr_r entries must be positive"),
            (self.sigma0 >= 0.0, "sigma0 must be non-negative"),
            (self.grad_tol >= 0.0 && self.rel_tol >= 0.0, "tolerances must be non-negative"),
            (self.armijo_c > 0.0 && self.armijo_c < 1.0, "armijo_c must lie in (0, 1)"),
            (self.shrink > 0.0 && self.shrink < 1.0, "shrink must lie in (0, 1)"),
            (self.fd_step > 0.0, "fd_step must be positive"),
            (self.n_max > 0, "n_max must be positive"),
            (self.gp_starts > 0, "gp_starts must be positive"),
            (self.gp_min_lengthscale > 0.0 && self.gp_min_lengthscale < 1e3, "gp_min_lengthscale must lie in (0, 1000)"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(format!("learning: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig { q: self.lqr_q, r: self.lqr_r }
    }

    /// Reference settings starting from the gear 1 steady state at `motor_speed`.
    pub fn reference_config(&self, p: &DrivelineParams) -> ReferenceConfig {
        let w_out = self.motor_speed / p.ratio1;
        ReferenceConfig {
            duration: self.duration,
            torque_fraction: self.torque_fraction,
            dt: self.dt,
            x0: StateVec::new(self.motor_speed, w_out, w_out, p.load_torque / p.stiffness),
        }
    }

    pub fn gp_train(&self, seed: u64) -> GpTrainConfig {
        GpTrainConfig {
            starts: self.gp_starts,
            max_iters: self.gp_max_iters,
            seed,
            min_lengthscale: self.gp_min_lengthscale,
        }
    }
}

/// Reads and parses a TOML configuration file; any failure is a configuration error.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// [`load`] when a path is given, the type's defaults otherwise.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load)
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
}

/// Off-training evaluation conditions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scenario {
    pub duration: Option<f64>,
    /// Multiplies the initial motor speed.
    pub speed_scale: Option<f64>,
    /// Multiplies the vehicle load torque.
    pub load_scale: Option<f64>,
}

/// Everything derived from the configuration files: calibrated plant,
/// reference with its nominal command, bench and cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub driveline: DrivelineConfig,
    pub params: DrivelineParams,
    pub calibration: Calibration,
    pub ss: StateSpace,
    pub dss: DiscreteStateSpace,
    pub reference: ReferenceTrajectory,
    /// True initial state of the bench.
    pub x0: StateVec,
    pub bench: BenchConfig,
    pub cost: CostConfig,
    pub learning: LearningConfig,
}

impl Setup {
    pub fn new(
        driveline: &DrivelineConfig,
        bench: &BenchConfig,
        cost: &CostConfig,
        learning: &LearningConfig,
    ) -> Result<Self> {
        learning.validate()?;
        bench.validate()?;
        cost.validate()?;
        let (params, calibration) = driveline.calibrated()?;
        let ss = build_state_space(&params)?;
        let dss = discretize(&ss, learning.dt)?;
        let rc = learning.reference_config(&params);
        let mut reference = build_reference(&params, &rc)?;
        nominal_command(&mut reference, &params, &ss)?;
        Ok(Self {
            driveline: *driveline,
            params,
            calibration,
            ss,
            dss,
            reference,
            x0: rc.x0,
            bench: *bench,
            cost: *cost,
            learning: *learning,
        })
    }

    pub fn defaults() -> Result<Self> {
        Self::new(
            &DrivelineConfig::default(),
            &BenchConfig::default(),
            &CostConfig::default(),
            &LearningConfig::default(),
        )
    }

    /// The same plant under different shift conditions.
    pub fn with_scenario(&self, s: &Scenario) -> Result<Self> {
        let mut driveline = self.driveline;
        let mut learning = self.learning;
        if let Some(d) = s.duration {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("scenario duration must be positive, got {d}")));
            }
            learning.duration = d;
        }
        if let Some(k) = s.speed_scale {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::Config(format!("scenario speed scale must be positive, got {k}")));
            }
            learning.motor_speed *= k;
        }
        if let Some(k) = s.load_scale {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::Config(format!("scenario load scale must be non-negative, got {k}")));
            }
            driveline.tv *= k;
        }
        Self::new(&driveline, &self.bench, &self.cost, &learning)
    }
}
