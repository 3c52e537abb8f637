//! On-disk layout of a learning run and the metrics summary table.
//!
//! ```text
//! out/
//!   summary.txt          metrics table with reduction row
//!   final_policy.toml
//!   error.txt            only when the run ended early
//!   iter_000/
//!     policy.toml        policy that ran the trial
//!     trial.csv
//!     metrics.toml
//!     gp.toml            model behind the next update (absent on the last iteration)
//!     j_curve.csv        predicted cost per optimizer step (ditto)
//! ```
//!
//! Files hold no wall-clock data, so identical runs give identical trees.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{ErrorMetrics, Trial};
use crate::error::{Error, Result};
use crate::learner::{IterationRecord, LearningHistory};
use crate::reference::ReferenceTrajectory;

/// Contents of `metrics.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsFile {
    pub iteration: usize,
    pub e_inf: f64,
    pub e_end: f64,
    pub e_2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimization: Option<OptimizationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationSummary {
    pub steps: usize,
    pub stop: String,
    pub j_initial: f64,
    pub j_final: f64,
    pub grad_norm: f64,
}

impl MetricsFile {
    pub fn from_record(r: &IterationRecord) -> Self {
        Self {
            iteration: r.iteration,
            e_inf: r.metrics.e_inf,
            e_end: r.metrics.e_end,
            e_2: r.metrics.e_2,
            optimization: r.optimization.as_ref().map(|o| OptimizationSummary {
                steps: o.iterations,
                stop: o.stop.as_str().to_string(),
                j_initial: o.j_curve[0],
                j_final: *o.j_curve.last().expect("cost curve is never empty"),
                grad_norm: o.grad_norm,
            }),
        }
    }

    pub fn metrics(&self) -> ErrorMetrics {
        ErrorMetrics { e_inf: self.e_inf, e_end: self.e_end, e_2: self.e_2 }
    }
}

/// Trial CSV: measured states, commanded and applied controls.
pub fn trial_csv(trial: &Trial) -> String {
    let mut out = String::from("t,x0,x1,x2,x3,uc_Tm,uc_T1,uc_T2,ua_Tm,ua_T1,ua_T2\n");
    for (k, t) in trial.times.iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in trial.states[k].iter() {
            let _ = write!(out, ",{v}");
        }
        // No control is issued at the final sample.
        match (trial.commanded.get(k), trial.applied.get(k)) {
            (Some(c), Some(a)) => {
                for v in c.iter().chain(a.iter()) {
                    let _ = write!(out, ",{v}");
                }
            }
            _ => out.push_str(",,,,,,"),
        }
        out.push('\n');
    }
    out
}

/// Reference CSV: target states and the idealized nominal command.
pub fn reference_csv(reference: &ReferenceTrajectory) -> String {
    let mut out = String::from("t,xbar_0,xbar_1,xbar_2,xbar_3,u0_Tm,u0_T1,u0_T2\n");
    for (k, t) in reference.t_grid.iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in reference.xbar[k].iter() {
            let _ = write!(out, ",{v}");
        }
        match reference.ubar0.get(k) {
            Some(u) => {
                for v in u.iter() {
                    let _ = write!(out, ",{v}");
                }
            }
            None => out.push_str(",,,"),
        }
        out.push('\n');
    }
    out
}

pub fn j_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,J\n");
    for (k, j) in curve.iter().enumerate() {
        let _ = writeln!(out, "{k},{j}");
    }
    out
}

/// Fixed-width metrics table with a final row of percentage reductions
/// from the first to the last iteration.
pub fn metrics_table(rows: &[(usize, ErrorMetrics)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>6}  {:>12}  {:>12}  {:>12}", "iter", "|e|_inf", "|e(end)|", "|e|_2");
    for (i, m) in rows {
        let _ = writeln!(out, "{:>6}  {:>12.5}  {:>12.5}  {:>12.5}", i, m.e_inf, m.e_end, m.e_2);
    }
    if let (Some((_, first)), Some((_, last))) = (rows.first(), rows.last()) {
        let pct = |a: f64, b: f64| if a != 0.0 { format!("{:.1} %", 100.0 * (1.0 - b / a)) } else { "n/a".to_string() };
        let _ = writeln!(
            out,
            "{:>6}  {:>12}  {:>12}  {:>12}",
            "red.",
            pct(first.e_inf, last.e_inf),
            pct(first.e_end, last.e_end),
            pct(first.e_2, last.e_2)
        );
    }
    out
}

pub fn iteration_dir(out: &Path, i: usize) -> PathBuf {
    out.join(format!("iter_{i:03}"))
}

/// Writes the whole run below `out`, creating it if needed.
pub fn write_history(out: &Path, history: &LearningHistory) -> Result<()> {
    fs::create_dir_all(out)?;
    for r in &history.records {
        let dir = iteration_dir(out, r.iteration);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("policy.toml"), r.params.to_text())?;
        fs::write(dir.join("trial.csv"), trial_csv(&r.trial))?;
        let metrics = toml::to_string(&MetricsFile::from_record(r)).expect("metrics serialize");
        fs::write(dir.join("metrics.toml"), metrics)?;
        if let Some(gp) = &r.gp {
            fs::write(dir.join("gp.toml"), gp.dump.to_text())?;
        }
        if let Some(o) = &r.optimization {
            fs::write(dir.join("j_curve.csv"), j_curve_csv(&o.j_curve))?;
        }
    }
    let rows: Vec<_> = history.records.iter().map(|r| (r.iteration, r.metrics)).collect();
    fs::write(out.join("summary.txt"), metrics_table(&rows))?;
    if let Some(p) = history.final_params() {
        fs::write(out.join("final_policy.toml"), p.to_text())?;
    }
    if let Some(e) = &history.error {
        fs::write(out.join("error.txt"), format!("{e}\n"))?;
    }
    Ok(())
}

/// Reads every `iter_*/metrics.toml` below `out`, ordered by iteration.
pub fn read_metrics(out: &Path) -> Result<Vec<MetricsFile>> {
    let mut rows = Vec::new();
    for entry in fs::read_dir(out)? {
        let path = entry?.path();
        let is_iter = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("iter_"));
        if !is_iter || !path.is_dir() {
            continue;
        }
        let file = path.join("metrics.toml");
        let text = fs::read_to_string(&file)?;
        let m: MetricsFile =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
        rows.push(m);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no iteration directories found", out.display())));
    }
    rows.sort_by_key(|m| m.iteration);
    Ok(rows)
}
