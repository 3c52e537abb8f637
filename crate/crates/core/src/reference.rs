//! Prescribed gearshift trajectory and the nominal (feedforward) command.
//!
//! The shift starts with a torque phase, during which the motor is held 1 rad/s
//! above the gear 1 synchronization speed while clutch 1 torque ramps to zero,
//! followed by an inertia phase that brings the motor down to the gear 2
//! synchronization speed along a quintic blend. Output and vehicle speeds stay
//! constant and the driveshaft carries the load torque throughout.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::driveline::{DrivelineParams, StateSpace};
use crate::error::{Error, Result};
use crate::linalg::{ControlVec, StateVec};

/// Motor speed offset above the gear 1 synchronization speed during the torque phase (rad/s).
pub const TORQUE_PHASE_SLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceConfig {
    /// Total shift duration (s).
    pub duration: f64,
    /// Fraction of the duration spent in the torque phase.
    pub torque_fraction: f64,
    /// Sampling step of the reference grid (s).
    pub dt: f64,
    /// Gear 1 steady state at the start of the shift.
    pub x0: StateVec,
}

impl ReferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config(format!("shift duration must be positive, got {}", self.duration)));
        }
        if !(self.torque_fraction > 0.0 && self.torque_fraction < 1.0) {
            return Err(Error::Config(format!(
                "torque fraction must lie in (0, 1), got {}",
                self.torque_fraction
            )));
        }
        if !(self.dt > 0.0) || self.steps() == 0 {
            return Err(Error::Config(format!("invalid reference step {}", self.dt)));
        }
        Ok(())
    }

    /// Number of control steps `T`; the grid has `T + 1` points.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub t_grid: Vec<f64>,
    pub xbar: Vec<StateVec>,
    /// Analytic time derivative of `xbar`.
    pub xbar_dot: Vec<StateVec>,
    /// Idealized nominal command `[T_m0, T_10, T_20]`; empty until
    /// [`nominal_command`] fills it.
    pub ubar0: Vec<ControlVec>,
    pub t_torque_end: f64,
    pub t_shift_end: f64,
}

impl ReferenceTrajectory {
    /// Number of control steps `T`.
    pub fn horizon(&self) -> usize {
        self.t_grid.len() - 1
    }
}

/// Feedforward correction parameters `a1..a4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

impl FeedforwardParams {
    pub const IDENTITY: Self = Self { a1: 0.0, a2: 0.0, a3: 1.0, a4: 1.0 };
}

/// Quintic smoothstep `h(s) = 10s³ − 15s⁴ + 6s⁵` and its first derivative.
fn quintic(s: f64) -> (f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        s3 * (10.0 - 15.0 * s + 6.0 * s2),
        30.0 * s2 * (1.0 - 2.0 * s + s2),
    )
}

pub fn build_reference(p: &DrivelineParams, cfg: &ReferenceConfig) -> Result<ReferenceTrajectory> {
    cfg.validate()?;
    if !(p.stiffness > 0.0) {
        return Err(Error::ParameterDomain("reference elongation needs k > 0".into()));
    }
    let n = cfg.steps();
    let w_out = cfg.x0[1];
    let t_te = cfg.torque_fraction * cfg.duration;
    let t_end = cfg.duration;
    let w_hi = p.ratio1 * w_out + TORQUE_PHASE_SLIP;
    let w_lo = p.ratio2 * w_out;
    let elong = p.load_torque / p.stiffness;

    let mut t_grid = Vec::with_capacity(n + 1);
    let mut xbar = Vec::with_capacity(n + 1);
    let mut xbar_dot = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = if i == n { t_end } else { i as f64 * cfg.dt };
        let (wm, wm_dot) = if t <= t_te {
            (w_hi, 0.0)
        } else {
            let span = t_end - t_te;
            let s = ((t - t_te) / span).min(1.0);
            let (h, dh) = quintic(s);
            (w_hi + (w_lo - w_hi) * h, (w_lo - w_hi) * dh / span)
        };
        t_grid.push(t);
        xbar.push(StateVec::new(wm, w_out, w_out, elong));
        xbar_dot.push(StateVec::new(wm_dot, 0.0, 0.0, 0.0));
    }
    Ok(ReferenceTrajectory {
        t_grid,
        xbar,
        xbar_dot,
        ubar0: Vec::new(),
        t_torque_end: t_te,
        t_shift_end: t_end,
    })
}

fn actuation_matrix(p: &DrivelineParams) -> Matrix2<f64> {
    Matrix2::new(p.c(1), p.c(4), p.c(5), p.c(8))
}

/// Clutch 1 torque holding the gear 1 steady state (no acceleration, `T_2 = 0`,
/// driveshaft carrying the load torque).
pub fn initial_clutch1_torque(p: &DrivelineParams) -> Result<f64> {
    // [c1 c3; c5 c7] [T_m; T_1] = -[c2; c6] T_v
    let m = Matrix2::new(p.c(1), p.c(3), p.c(5), p.c(7));
    let rhs = -Vector2::new(p.c(2), p.c(6)) * p.load_torque;
    let sol = m
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Model("gear 1 torque balance is singular".into()))?;
    Ok(sol[1])
}

/// Fills `reference.ubar0`: `T_10` ramps linearly to zero over the torque
/// phase, and `(T_m0, T_20)` make the motor and output rows of the continuous
/// dynamics hold exactly along `xbar`.
pub fn nominal_command(reference: &mut ReferenceTrajectory, p: &DrivelineParams, ss: &StateSpace) -> Result<()> {
    let t1_start = initial_clutch1_torque(p)?;
    let lu = actuation_matrix(p).lu();
    if lu.determinant().abs() < 1e-12 * actuation_matrix(p).amax().powi(2) {
        return Err(Error::Model("motor and clutch 2 actuation is not independent".into()));
    }
    let mut ubar0 = Vec::with_capacity(reference.t_grid.len());
    for ((&t, xb), xd) in reference.t_grid.iter().zip(&reference.xbar).zip(&reference.xbar_dot) {
        let t1 = if t < reference.t_torque_end {
            t1_start * (1.0 - t / reference.t_torque_end)
        } else {
            0.0
        };
        let ax = ss.a * xb;
        let rhs = Vector2::new(
            xd[0] - ax[0] - p.c(3) * t1,
            xd[1] - ax[1] - p.c(7) * t1,
        );
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Model("motor and clutch 2 actuation is not independent".into()))?;
        ubar0.push(ControlVec::new(sol[0], t1, sol[1]));
    }
    reference.ubar0 = ubar0;
    Ok(())
}

/// Actual feedforward `ū` from the idealized command and `a1..a4`.
pub fn apply_feedforward(
    ubar0: &[ControlVec],
    a: &FeedforwardParams,
    reference: &ReferenceTrajectory,
) -> Result<Vec<ControlVec>> {
    if ubar0.len() != reference.xbar.len() {
        return Err(Error::Model(format!(
            "command grid has {} points, reference has {}",
            ubar0.len(),
            reference.xbar.len()
        )));
    }
    ubar0
        .iter()
        .zip(&reference.xbar)
        .map(|(u0, xb)| {
            if xb[1] == 0.0 {
                return Err(Error::ParameterDomain(
                    "reference output speed is zero; speed ratio undefined".into(),
                ));
            }
            Ok(ControlVec::new(
                u0[0] + a.a1 * (xb[0] / xb[1]) + a.a2,
                a.a3 * u0[1],
                a.a4 * u0[2],
            ))
        })
        .collect()
}
