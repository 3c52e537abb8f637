//! Linear driveline and vehicle model.
//!
//! States are `[ω_m, ω_out, ω_v, θ_out − θ_v]` (motor speed, output shaft speed,
//! vehicle speed, driveshaft elongation) and inputs are `[T_m, T_1, T_2]`
//! (motor torque and the two clutch torques). The driveshaft couples the
//! transmission output to an equivalent vehicle inertia through a spring `k`
//! and a damper `d`.

use nalgebra::{Complex, DMatrix, Matrix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{zoh, InputMat, StateMat, StateVec, NU, NX};

/// Physical parameters of the driveline.
///
/// `c` are the lumped dynamic coefficients of the two transmission equations
/// of motion: `ω̇_m = c1 T_m + c2 T_s + c3 T_1 + c4 T_2` and
/// `ω̇_out = c5 T_m + c6 T_s + c7 T_1 + c8 T_2`, with `T_s = k δ + d (ω_out − ω_v)`
/// the driveshaft torque.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivelineParams {
    pub c: [f64; 8],
    pub vehicle_inertia: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub load_torque: f64,
    /// Gear 1 speed ratio `ω_m / ω_out`.
    pub ratio1: f64,
    /// Gear 2 speed ratio `ω_m / ω_out`.
    pub ratio2: f64,
}

impl DrivelineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.vehicle_inertia > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "vehicle inertia must be positive, got {}",
                self.vehicle_inertia
            )));
        }
        if !(self.stiffness >= 0.0) {
            return Err(Error::ParameterDomain(format!(
                "driveline stiffness must be non-negative, got {}",
                self.stiffness
            )));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::ParameterDomain(format!(
                "driveline damping must be non-negative, got {}",
                self.damping
            )));
        }
        if !(self.ratio1 > self.ratio2 && self.ratio2 > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "gear ratios must satisfy r1 > r2 > 0, got r1 = {}, r2 = {}",
                self.ratio1, self.ratio2
            )));
        }
        if self.c.iter().any(|c| !c.is_finite()) || !self.load_torque.is_finite() {
            return Err(Error::ParameterDomain("non-finite coefficient".into()));
        }
        Ok(())
    }

    pub fn c(&self, i: usize) -> f64 {
        self.c[i - 1]
    }
}

/// Continuous-time model `ẋ = A x + B u + τ0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSpace {
    pub a: StateMat,
    pub b: InputMat,
    pub tau0: StateVec,
}

/// Zero-order-hold discretization `x⁺ = A_d x + B_d u + τ0_d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteStateSpace {
    pub ad: StateMat,
    pub bd: InputMat,
    pub tau0d: StateVec,
    pub dt: f64,
}

impl DiscreteStateSpace {
    /// One nominal step.
    pub fn step(&self, x: &StateVec, u: &crate::linalg::ControlVec) -> StateVec {
        self.ad * x + self.bd * u + self.tau0d
    }
}

pub fn build_state_space(p: &DrivelineParams) -> Result<StateSpace> {
    p.validate()?;
    let (k, d, iv) = (p.stiffness, p.damping, p.vehicle_inertia);
    let c = |i| p.c(i);
    #[rustfmt::skip]
    let a = StateMat::new(
        0.0, c(2) * d,  -c(2) * d,  c(2) * k,
        0.0, c(6) * d,  -c(6) * d,  c(6) * k,
        0.0, d / iv,    -d / iv,    k / iv,
        0.0, 1.0,       -1.0,       0.0,
    );
    #[rustfmt::skip]
    let b = InputMat::new(
        c(1), c(3), c(4),
        c(5), c(7), c(8),
        0.0,  0.0,  0.0,
        0.0,  0.0,  0.0,
    );
    let tau0 = StateVec::new(0.0, 0.0, -p.load_torque / iv, 0.0);
    Ok(StateSpace { a, b, tau0 })
}

pub fn discretize(ss: &StateSpace, dt: f64) -> Result<DiscreteStateSpace> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::ParameterDomain(format!("time step must be positive, got {dt}")));
    }
    // τ0 is handled as a fourth, constant input.
    let a = DMatrix::from_iterator(NX, NX, ss.a.iter().copied());
    let mut b = DMatrix::zeros(NX, NU + 1);
    b.view_mut((0, 0), (NX, NU)).copy_from(&ss.b);
    b.view_mut((0, NU), (NX, 1)).copy_from(&ss.tau0);
    let (ad, bd) = zoh(&a, &b, dt);
    Ok(DiscreteStateSpace {
        ad: StateMat::from_iterator(ad.iter().copied()),
        bd: InputMat::from_iterator(bd.columns(0, NU).iter().copied()),
        tau0d: StateVec::from_iterator(bd.column(NU).iter().copied()),
        dt,
    })
}

/// Targets for the simulated part of the driveline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub natural_frequency_hz: f64,
    pub damping_ratio: f64,
    /// Reflected motor + transmission inertia in first gear, as a fraction of `I_v`.
    pub inertia_ratio: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self {
            natural_frequency_hz: 5.0,
            damping_ratio: 0.15,
            inertia_ratio: 0.1,
        }
    }
}

/// Outcome of [`calibrate_driveline`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub vehicle_inertia: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub natural_frequency_hz: f64,
    pub damping_ratio: f64,
    pub inertia_ratio: f64,
    pub iterations: usize,
}

/// Inertia of every body upstream of the driveshaft spring, reflected to the
/// output shaft with clutch 1 locked (`ω_m = r1 ω_out`).
///
/// Locking clutch 1 makes `T_1` a constraint torque; eliminating it from the
/// two transmission equations leaves `ω̇_out = -T_s / J`.
pub fn reflected_inertia_gear1(c: &[f64; 8], r1: f64) -> Result<f64> {
    let [_, c2, c3, _, _, c6, c7, _] = *c;
    let num = r1 * c7 - c3;
    let den = c3 * c6 - c2 * c7;
    if den == 0.0 || !(num / den).is_finite() {
        return Err(Error::Model("first-gear constraint is singular".into()));
    }
    let j = num / den;
    if !(j > 0.0) {
        return Err(Error::Model(format!(
            "coefficients give a non-positive reflected inertia ({j})"
        )));
    }
    Ok(j)
}

/// State matrix with clutch 1 locked and no external torques.
///
/// The motor row follows the output row scaled by `r1`; the remaining rows are
/// the output inertia `J`, the vehicle inertia and the driveshaft.
pub fn first_gear_matrix(c: &[f64; 8], r1: f64, iv: f64, k: f64, d: f64) -> Result<Matrix4<f64>> {
    let g = -1.0 / reflected_inertia_gear1(c, r1)?;
    #[rustfmt::skip]
    let a = Matrix4::new(
        0.0, r1 * g * d, -r1 * g * d, r1 * g * k,
        0.0, g * d,      -g * d,      g * k,
        0.0, d / iv,     -d / iv,     k / iv,
        0.0, 1.0,        -1.0,        0.0,
    );
    Ok(a)
}

/// Oscillatory eigenvalue with positive imaginary part, if any.
fn oscillatory_pair(a: &Matrix4<f64>) -> Option<Complex<f64>> {
    a.complex_eigenvalues()
        .iter()
        .copied()
        .filter(|l| l.im > 1e-9)
        .max_by(|x, y| x.im.total_cmp(&y.im))
}

/// Undamped natural frequency (Hz) and damping ratio of the first-gear
/// driveline mode.
pub fn first_gear_mode(c: &[f64; 8], r1: f64, iv: f64, k: f64, d: f64) -> Result<(f64, f64)> {
    let a = first_gear_matrix(c, r1, iv, k, d)?;
    let l = oscillatory_pair(&a).ok_or_else(|| {
        Error::Calibration(format!("no oscillatory mode at k = {k}, d = {d}"))
    })?;
    let wn = l.norm();
    Ok((wn / (2.0 * std::f64::consts::PI), -l.re / wn))
}

/// Sets `I_v` from the inertia ratio, then solves for `(k, d)` so the
/// first-gear driveline mode has the target frequency and damping ratio.
///
/// `(k, d)` come from a damped Newton iteration on the eigenvalue residual,
/// started from the rigid two-inertia estimate.
pub fn calibrate_driveline(c: &[f64; 8], r1: f64, targets: &CalibrationTargets) -> Result<Calibration> {
    let CalibrationTargets {
        natural_frequency_hz: fn_t,
        damping_ratio: zeta_t,
        inertia_ratio,
    } = *targets;
    if !(fn_t > 0.0 && zeta_t > 0.0 && zeta_t < 1.0 && inertia_ratio > 0.0) {
        return Err(Error::Calibration(format!(
            "targets out of range: f_n = {fn_t}, zeta = {zeta_t}, ratio = {inertia_ratio}"
        )));
    }
    let j = reflected_inertia_gear1(c, r1).map_err(|e| Error::Calibration(e.to_string()))?;
    let iv = j / inertia_ratio;
    let jeq = 1.0 / (1.0 / j + 1.0 / iv);
    let wn = 2.0 * std::f64::consts::PI * fn_t;

    let residual = |k: f64, d: f64| -> Result<[f64; 2]> {
        let (f, z) = first_gear_mode(c, r1, iv, k, d)?;
        // Scale both components to order one.
        Ok([(f - fn_t) / fn_t, z - zeta_t])
    };
    let norm = |r: &[f64; 2]| r[0].hypot(r[1]);

    let mut x = [wn * wn * jeq, 2.0 * zeta_t * wn * jeq];
    let mut r = residual(x[0], x[1])?;
    let mut iterations = 0;
    const MAX_ITER: usize = 50;
    while norm(&r) > 1e-13 {
        if iterations == MAX_ITER {
            return Err(Error::Calibration(format!(
                "Newton did not converge after {MAX_ITER} iterations: k = {}, d = {}, residual = {:?}",
                x[0], x[1], r
            )));
        }
        iterations += 1;
        // Forward-difference Jacobian in relative coordinates.
        let mut jac = nalgebra::Matrix2::zeros();
        for col in 0..2 {
            let h = 1e-7 * x[col].abs().max(1e-12);
            let mut xp = x;
            xp[col] += h;
            let rp = residual(xp[0], xp[1])?;
            jac[(0, col)] = (rp[0] - r[0]) / h;
            jac[(1, col)] = (rp[1] - r[1]) / h;
        }
        let step = jac
            .lu()
            .solve(&nalgebra::Vector2::new(-r[0], -r[1]))
            .ok_or_else(|| Error::Calibration(format!("singular Jacobian at k = {}, d = {}", x[0], x[1])))?;
        let mut lambda = 1.0;
        loop {
            let trial = [x[0] + lambda * step[0], x[1] + lambda * step[1]];
            if trial[0] > 0.0 && trial[1] >= 0.0 {
                if let Ok(rt) = residual(trial[0], trial[1]) {
                    if norm(&rt) < norm(&r) {
                        x = trial;
                        r = rt;
                        break;
                    }
                }
            }
            lambda *= 0.5;
            if lambda < 1e-10 {
                // No further decrease is possible; accept if already tight.
                if norm(&r) < 1e-9 {
                    break;
                }
                return Err(Error::Calibration(format!(
                    "line search stalled at k = {}, d = {}, residual = {:?}",
                    x[0], x[1], r
                )));
            }
        }
        if lambda < 1e-10 {
            break;
        }
    }
    let (f, z) = first_gear_mode(c, r1, iv, x[0], x[1])?;
    Ok(Calibration {
        vehicle_inertia: iv,
        stiffness: x[0],
        damping: x[1],
        natural_frequency_hz: f,
        damping_ratio: z,
        inertia_ratio: j / iv,
        iterations,
    })
}
