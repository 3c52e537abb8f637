//! Feedforward plus full-state feedback gearshift policy.
//!
//! `u = ū_t + K̃c (x̄_t − x)`, where only the motor and clutch 2 channels carry
//! feedback; clutch 1 is driven by its feedforward signal alone.

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::driveline::DiscreteStateSpace;
use crate::error::{Error, Result};
use crate::linalg::{dlqr, spectral_radius, ControlVec, FullGainMat, GainMat, StateMat, StateVec, NX};
use crate::reference::{apply_feedforward, FeedforwardParams, ReferenceTrajectory};

/// Number of tunable policy parameters.
pub const N_PARAMS: usize = 12;

/// Parameter names in vector order.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "a1", "a2", "a3", "a4", "kc_00", "kc_01", "kc_02", "kc_03", "kc_10", "kc_11", "kc_12", "kc_13",
];

/// Plant input columns driven by the feedback rows of `Kc`.
pub const FEEDBACK_CHANNELS: [usize; 2] = [0, 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyParams {
    pub ff: FeedforwardParams,
    /// Rows are the motor and clutch 2 channels.
    pub kc: GainMat,
}

impl PolicyParams {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let mut v = [0.0; N_PARAMS];
        v[0] = self.ff.a1;
        v[1] = self.ff.a2;
        v[2] = self.ff.a3;
        v[3] = self.ff.a4;
        for r in 0..2 {
            for c in 0..NX {
                v[4 + r * NX + c] = self.kc[(r, c)];
            }
        }
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), N_PARAMS, "policy vector must have {N_PARAMS} entries");
        Self {
            ff: FeedforwardParams { a1: v[0], a2: v[1], a3: v[2], a4: v[3] },
            kc: GainMat::from_fn(|r, c| v[4 + r * NX + c]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Plain-text form of a policy, one `name = value` line per parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    a1: f64,
    a2: f64,
    a3: f64,
    a4: f64,
    kc_00: f64,
    kc_01: f64,
    kc_02: f64,
    kc_03: f64,
    kc_10: f64,
    kc_11: f64,
    kc_12: f64,
    kc_13: f64,
}

impl PolicyParams {
    pub fn to_text(&self) -> String {
        let v = self.to_array();
        let f = PolicyFile {
            a1: v[0], a2: v[1], a3: v[2], a4: v[3],
            kc_00: v[4], kc_01: v[5], kc_02: v[6], kc_03: v[7],
            kc_10: v[8], kc_11: v[9], kc_12: v[10], kc_13: v[11],
        };
        toml::to_string(&f).expect("policy serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: PolicyFile = toml::from_str(text).map_err(|e| Error::Config(format!("policy: {e}")))?;
        let p = Self::from_slice(&[
            f.a1, f.a2, f.a3, f.a4, f.kc_00, f.kc_01, f.kc_02, f.kc_03, f.kc_10, f.kc_11, f.kc_12, f.kc_13,
        ]);
        if !p.is_finite() {
            return Err(Error::Config("policy: non-finite parameter".into()));
        }
        Ok(p)
    }
}

/// `Kc` (2×4) into the 3×4 plant-input layout with a zero clutch 1 row.
pub fn embed_gain(kc: &GainMat) -> FullGainMat {
    let mut k = FullGainMat::zeros();
    k.set_row(0, &kc.row(0));
    k.set_row(2, &kc.row(1));
    k
}

pub fn extract_gain(k: &FullGainMat) -> GainMat {
    let mut kc = GainMat::zeros();
    kc.set_row(0, &k.row(0));
    kc.set_row(1, &k.row(2));
    kc
}

/// LQR feedback gain for the motor and clutch 2 channels of the nominal plant.
pub fn lqr_init(dss: &DiscreteStateSpace, q: &StateMat, r: &Matrix2<f64>) -> Result<GainMat> {
    let a = DMatrix::from_iterator(NX, NX, dss.ad.iter().copied());
    let mut b = DMatrix::zeros(NX, 2);
    for (j, &col) in FEEDBACK_CHANNELS.iter().enumerate() {
        b.set_column(j, &dss.bd.column(col));
    }
    let qd = DMatrix::from_iterator(NX, NX, q.iter().copied());
    let rd = DMatrix::from_iterator(2, 2, r.iter().copied());
    let (k, _) = dlqr(&a, &b, &qd, &rd, 1e-12, 100_000)
        .ok_or_else(|| Error::Synthesis("Riccati recursion did not converge".into()))?;
    let rho = spectral_radius(&(&a - &b * &k));
    if !(rho < 1.0) {
        return Err(Error::Synthesis(format!("closed loop is not stable (spectral radius {rho})")));
    }
    Ok(GainMat::from_iterator(k.iter().copied()))
}

/// A policy bound to a reference: the feedforward sequence is precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub params: PolicyParams,
    pub ubar: Vec<ControlVec>,
    pub gain: FullGainMat,
}

impl Policy {
    pub fn new(params: PolicyParams, reference: &ReferenceTrajectory) -> Result<Self> {
        Ok(Self {
            params,
            ubar: apply_feedforward(&reference.ubar0, &params.ff, reference)?,
            gain: embed_gain(&params.kc),
        })
    }

    /// Control at step `t` for state `x`; no saturation is applied here.
    pub fn control(&self, x: &StateVec, t: usize, reference: &ReferenceTrajectory) -> ControlVec {
        self.ubar[t] + self.gain * (reference.xbar[t] - x)
    }
}
