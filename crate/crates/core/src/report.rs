//! Comparison of solutions, forward re-simulation, timing and export.
//!
//! A [`Solution`] bundles what a single solve produced: the trajectory on
//! the shooting grid, the solver outcome and the NLP dimensions. Everything
//! in this module works on solutions rather than on raw variable vectors so
//! that results of different transcriptions can be set side by side.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FullDynamics, OcpModel};
use crate::nlpsolve::{self, SolveError, SolverOptions, SolverResult, SolverStatus};
use crate::odeint::{self, Integrator, NewtonOptions, OdeError};
use crate::transcribe::{Trajectory, TranscribeError, TranscribedOcp, TranscriptionSummary, Variant};

pub const SCHEMA: &str = "simshoot/v1";

/// Reference samples below `max(RELATIVE_FLOOR, RELATIVE_FLOOR_SCALED ·
/// ‖reference‖∞)` are left out of relative errors.
pub const RELATIVE_FLOOR: f64 = 1e-6;
pub const RELATIVE_FLOOR_SCALED: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("results are not comparable: {0}")]
    Incomparable(String),
    #[error("forward simulation failed on interval {interval}: {source}")]
    Integration { interval: usize, source: OdeError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Transcribe(#[from] TranscribeError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Outcome of one solve, detached from the NLP it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub model: String,
    pub variant: Variant,
    #[serde(rename = "N")]
    pub intervals: usize,
    pub epsilon: f64,
    pub sim: Option<String>,
    pub objective: f64,
    pub status: SolverStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Median wall time of the solve call in seconds.
    pub wall_time_s: f64,
    pub n_vars: usize,
    pub n_constraints: usize,
    pub trajectory: Trajectory,
}

impl Solution {
    /// Collects a solver result. The trajectory falls back to the raw node
    /// values when the final interval cannot be simulated (typically after
    /// a failed solve).
    pub fn from_result(ocp: &TranscribedOcp, result: &SolverResult, wall_time_s: f64) -> Self {
        let summary: TranscriptionSummary = ocp.summary();
        let trajectory = ocp
            .extract_solution(&result.variables)
            .unwrap_or_else(|_| node_values(ocp, &result.variables));
        Self {
            model: summary.model,
            variant: summary.variant,
            intervals: summary.intervals,
            epsilon: ocp.model.epsilon,
            sim: summary.sim,
            objective: result.objective,
            status: result.status,
            kkt_residual: result.kkt_residual,
            iterations: result.iterations,
            wall_time_s,
            n_vars: summary.n_vars,
            n_constraints: summary.n_constraints,
            trajectory,
        }
    }
}

fn node_values(ocp: &TranscribedOcp, vars: &[f64]) -> Trajectory {
    let layout = &ocp.layout;
    Trajectory {
        state_names: ocp.model.state_names.clone(),
        control_names: ocp.model.control_names.clone(),
        times: ocp.grid.node_times()[..ocp.grid.intervals].to_vec(),
        states: layout
            .state_vars
            .iter()
            .map(|row| row.iter().map(|v| v.map_or(f64::NAN, |v| vars[v])).collect())
            .collect(),
        controls: layout
            .control_vars
            .iter()
            .map(|row| row.iter().map(|&v| vars[v]).collect())
            .collect(),
    }
}

/// Solves `repeats` times from the same start and keeps the median wall
/// time. Transcription is not part of the timing.
pub fn timed_solve(
    ocp: &TranscribedOcp,
    opts: &SolverOptions,
    repeats: usize,
) -> Result<(SolverResult, f64), ReportError> {
    let mut times = Vec::with_capacity(repeats.max(1));
    let mut last = None;
    for _ in 0..repeats.max(1) {
        ocp.reset_inner_solve_count();
        let start = Instant::now();
        let r = nlpsolve::solve(&ocp.nlp, opts, None)?;
        times.push(start.elapsed().as_secs_f64());
        last = Some(r);
    }
    Ok((last.expect("at least one run"), median(&mut times)))
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Solve and wrap in one call.
pub fn solve_timed(ocp: &TranscribedOcp, opts: &SolverOptions, repeats: usize) -> Result<Solution, ReportError> {
    let (r, t) = timed_solve(ocp, opts, repeats)?;
    Ok(Solution::from_result(ocp, &r, t))
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    State,
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalDiff {
    pub name: String,
    pub kind: SignalKind,
    /// `max_k |a_k − b_k|`.
    pub abs_inf: f64,
    /// Node attaining `abs_inf`.
    pub at_node: usize,
    /// `max_k |a_k − b_k| / |a_k|` over nodes whose reference is above the
    /// floor; `None` when every reference sample is below it.
    pub rel_inf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimensions {
    pub label: String,
    pub n_vars: usize,
    pub n_constraints: usize,
}

/// Differences of `b` measured against the reference `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub signals: Vec<SignalDiff>,
    pub max_state_abs: f64,
    pub max_control_abs: f64,
    /// Signal with the largest absolute difference.
    pub worst_signal: Option<String>,
    pub objective_a: f64,
    pub objective_b: f64,
    pub objective_abs_delta: f64,
    pub objective_rel_delta: f64,
    pub dimensions: [Dimensions; 2],
    pub wall_time_a: f64,
    pub wall_time_b: f64,
    /// `wall_time_a / wall_time_b`.
    pub speedup: f64,
}

impl ComparisonReport {
    pub fn max_abs(&self) -> f64 {
        self.max_state_abs.max(self.max_control_abs)
    }

    /// Largest relative difference over all signals.
    pub fn max_rel(&self) -> f64 {
        self.signals.iter().filter_map(|s| s.rel_inf).fold(0.0, f64::max)
    }

    pub fn signal(&self, name: &str) -> Option<&SignalDiff> {
        self.signals.iter().find(|s| s.name == name)
    }
}

fn label(s: &Solution) -> String {
    match &s.sim {
        Some(sim) => format!("{} {} ({sim})", s.model, s.variant),
        None => format!("{} {}", s.model, s.variant),
    }
}

fn series_diff(name: &str, kind: SignalKind, a: &[f64], b: &[f64]) -> SignalDiff {
    let mut abs_inf = 0.0;
    let mut at_node = 0;
    let mut rel: Option<f64> = None;
    let floor = RELATIVE_FLOOR.max(RELATIVE_FLOOR_SCALED * a.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        let d = (x - y).abs();
        if d > abs_inf {
            abs_inf = d;
            at_node = k;
        }
        if x.abs() >= floor {
            let r = d / x.abs();
            rel = Some(rel.map_or(r, |m| m.max(r)));
        }
    }
    SignalDiff {
        name: name.to_string(),
        kind,
        abs_inf,
        at_node,
        rel_inf: rel,
    }
}

/// Node-by-node comparison of two solutions on the same grid; `a` is the
/// reference for relative errors and the numerator of the speedup.
pub fn compare(a: &Solution, b: &Solution) -> Result<ComparisonReport, ReportError> {
    let (ta, tb) = (&a.trajectory, &b.trajectory);
    if ta.state_names != tb.state_names || ta.control_names != tb.control_names {
        return Err(ReportError::Incomparable(format!(
            "{} and {} have different signals",
            a.model, b.model
        )));
    }
    if ta.times.len() != tb.times.len() || ta.controls.len() != tb.controls.len() {
        return Err(ReportError::Incomparable(format!(
            "grids differ ({} vs {} intervals)",
            a.intervals, b.intervals
        )));
    }
    let horizon = ta.times.last().copied().unwrap_or(0.0).abs().max(1.0);
    if ta
        .times
        .iter()
        .zip(&tb.times)
        .any(|(x, y)| (x - y).abs() > 1e-12 * horizon)
    {
        return Err(ReportError::Incomparable("node times differ".into()));
    }

    let mut signals = Vec::new();
    for (i, name) in ta.state_names.iter().enumerate() {
        signals.push(series_diff(
            name,
            SignalKind::State,
            &ta.state_series(i),
            &tb.state_series(i),
        ));
    }
    for (j, name) in ta.control_names.iter().enumerate() {
        signals.push(series_diff(
            name,
            SignalKind::Control,
            &ta.control_series(j),
            &tb.control_series(j),
        ));
    }
    let max_of = |kind| {
        signals
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.abs_inf)
            .fold(0.0, f64::max)
    };
    let worst_signal = signals
        .iter()
        .max_by(|x, y| x.abs_inf.total_cmp(&y.abs_inf))
        .map(|s| s.name.clone());
    let objective_abs_delta = (a.objective - b.objective).abs();
    let speedup = if b.wall_time_s > 0.0 {
        a.wall_time_s / b.wall_time_s
    } else {
        f64::INFINITY
    };
    Ok(ComparisonReport {
        max_state_abs: max_of(SignalKind::State),
        max_control_abs: max_of(SignalKind::Control),
        worst_signal,
        signals,
        objective_a: a.objective,
        objective_b: b.objective,
        objective_abs_delta,
        objective_rel_delta: objective_abs_delta / a.objective.abs().max(f64::MIN_POSITIVE),
        dimensions: [
            Dimensions {
                label: label(a),
                n_vars: a.n_vars,
                n_constraints: a.n_constraints,
            },
            Dimensions {
                label: label(b),
                n_vars: b.n_vars,
                n_constraints: b.n_constraints,
            },
        ],
        wall_time_a: a.wall_time_s,
        wall_time_b: b.wall_time_s,
        speedup,
    })
}

impl std::fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [da, db] = &self.dimensions;
        writeln!(f, "{:<40} {:>8} {:>8} {:>12}", "method", "vars", "cons", "time [s]")?;
        writeln!(
            f,
            "{:<40} {:>8} {:>8} {:>12.4}",
            da.label, da.n_vars, da.n_constraints, self.wall_time_a
        )?;
        writeln!(
            f,
            "{:<40} {:>8} {:>8} {:>12.4}",
            db.label, db.n_vars, db.n_constraints, self.wall_time_b
        )?;
        writeln!(f, "speedup             {:.2}x", self.speedup)?;
        writeln!(
            f,
            "objective           {:.7} vs {:.7} (abs {:.3e}, rel {:.3}%)",
            self.objective_a,
            self.objective_b,
            self.objective_abs_delta,
            100.0 * self.objective_rel_delta
        )?;
        writeln!(
            f,
            "max |diff|          {:.4e} on {}",
            self.max_abs(),
            self.worst_signal.as_deref().unwrap_or("-")
        )?;
        for s in &self.signals {
            let rel = s.rel_inf.map_or("-".to_string(), |r| format!("{:.3}%", 100.0 * r));
            writeln!(
                f,
                "  {:<10} abs {:.4e} (node {:>4})  rel {rel}",
                s.name, s.abs_inf, s.at_node
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Forward check
// ---------------------------------------------------------------------------

/// Re-simulation of the full model under the optimal controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardCheck {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `‖x_sim(t_k) − x_k‖_∞` per node, against the trajectory's node values.
    pub node_deviation: Vec<f64>,
    pub max_deviation: f64,
}

/// Integrates the full model with Radau IIA from `x0` under the piecewise
/// constant `controls`, `steps` steps per interval of length `dt`.
pub fn forward_simulate(
    model: &OcpModel,
    x0: &[f64],
    controls: &[Vec<f64>],
    dt: f64,
    steps: usize,
    newton: NewtonOptions,
) -> Result<Vec<Vec<f64>>, ReportError> {
    let sys = FullDynamics(model);
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.to_vec());
    for (k, u) in controls.iter().enumerate() {
        let x = states.last().expect("nonempty");
        let next = if dt == 0.0 {
            x.clone()
        } else {
            odeint::integrate(&sys, x, u, dt, steps, Integrator::Radau, newton)
                .map_err(|source| ReportError::Integration { interval: k, source })?
                .state_next
        };
        states.push(next);
    }
    Ok(states)
}

/// Forward simulation from the trajectory's first node, compared with every
/// node of the trajectory.
pub fn forward_check(
    model: &OcpModel,
    traj: &Trajectory,
    steps: usize,
    newton: NewtonOptions,
) -> Result<ForwardCheck, ReportError> {
    let Some(x0) = traj.states.first() else {
        return Err(ReportError::Incomparable("empty trajectory".into()));
    };
    let n = traj.controls.len();
    let dt = if n == 0 {
        0.0
    } else {
        (traj.times[n] - traj.times[0]) / n as f64
    };
    let states = forward_simulate(model, x0, &traj.controls, dt, steps, newton)?;
    let node_deviation: Vec<f64> = states
        .iter()
        .zip(&traj.states)
        .map(|(s, x)| s.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .collect();
    Ok(ForwardCheck {
        times: traj.times.clone(),
        max_deviation: node_deviation.iter().copied().fold(0.0, f64::max),
        node_deviation,
        states,
    })
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// The versioned JSON document written for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDocument {
    pub schema: String,
    #[serde(flatten)]
    pub solution: Solution,
    /// Settings the run was made with, enough to replay it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonReport>,
}

impl RunDocument {
    pub fn new(solution: Solution) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            solution,
            config: None,
            comparison: None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// 17 significant digits, enough for an exact round trip.
fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// One row per node: `t`, the states, then the controls. The controls cells
/// of the final node are empty.
pub fn write_csv(traj: &Trajectory, path: &Path) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let header: Vec<&str> = std::iter::once("t")
        .chain(traj.state_names.iter().map(String::as_str))
        .chain(traj.control_names.iter().map(String::as_str))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for (k, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
        let mut row = vec![fmt_value(*t)];
        row.extend(x.iter().map(|v| fmt_value(*v)));
        match traj.controls.get(k) {
            Some(u) => row.extend(u.iter().map(|v| fmt_value(*v))),
            None => row.extend(traj.control_names.iter().map(|_| String::new())),
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Trajectory, ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let bad = |message: String| ReportError::Format {
        path: path.display().to_string(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(bad("first column must be `t`".into()));
    }
    let mut times = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let mut vals = Vec::with_capacity(rec.len());
        for cell in rec.iter() {
            vals.push(if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|e| bad(format!("`{cell}`: {e}")))?)
            });
        }
        times.push(vals[0].ok_or_else(|| bad("missing time".into()))?);
        rows.push(vals[1..].to_vec());
    }
    // The states are the columns filled on every row; with at least two rows
    // the controls are the ones left empty on the last.
    let n_cols = header.len() - 1;
    let n_states = match rows.last() {
        Some(last) if rows.len() > 1 => last.iter().take_while(|v| v.is_some()).count(),
        _ => n_cols,
    };
    let states = rows
        .iter()
        .map(|r| {
            r[..n_states]
                .iter()
                .map(|v| v.ok_or_else(|| bad("missing state value".into())))
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>, _>>()?;
    let controls = rows[..rows.len().saturating_sub(1)]
        .iter()
        .map(|r| {
            r[n_states..]
                .iter()
                .map(|v| v.ok_or_else(|| bad("missing control value".into())))
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>, _>>()?;
    Ok(Trajectory {
        state_names: header[1..=n_states].to_vec(),
        control_names: header[n_states + 1..].to_vec(),
        times,
        states,
        controls,
    })
}

pub fn write_json(doc: &RunDocument, path: &Path) -> Result<(), ReportError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, doc).map_err(|source| ReportError::Json {
        path: path.display().to_string(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json(path: &Path) -> Result<RunDocument, ReportError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let doc: RunDocument = serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.display().to_string(),
        source,
    })?;
    if doc.schema != SCHEMA {
        return Err(ReportError::Format {
            path: path.display().to_string(),
            message: format!("unsupported schema `{}`", doc.schema),
        });
    }
    Ok(doc)
}

/// Writes a run as JSON or as the trajectory CSV.
pub fn export(doc: &RunDocument, path: &Path, format: Format) -> Result<(), ReportError> {
    match format {
        Format::Json => write_json(doc, path),
        Format::Csv => write_csv(&doc.solution.trajectory, path),
    }
}

// ---------------------------------------------------------------------------
// Benchmark tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub suite: String,
    pub method: String,
    pub runtime_s: f64,
    pub n_vars: usize,
    pub n_constraints: usize,
    pub status: SolverStatus,
    pub objective: f64,
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<8} {:<28} {:>12} {:>8} {:>8} {:>18} {:>16}\n",
        "suite", "method", "runtime [s]", "vars", "cons", "status", "objective"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:<28} {:>12.4} {:>8} {:>8} {:>18} {:>16.7}\n",
            r.suite,
            r.method,
            r.runtime_s,
            r.n_vars,
            r.n_constraints,
            r.status.to_string(),
            r.objective
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::enzyme_model;

    fn traj(scale: f64) -> Trajectory {
        Trajectory {
            state_names: vec!["a".into(), "b".into()],
            control_names: vec!["u".into()],
            times: vec![0.0, 0.5, 1.0],
            states: vec![vec![1.0, 0.5 * scale], vec![0.8, 0.4], vec![0.6, 0.3]],
            controls: vec![vec![2.0], vec![1e-9 * scale]],
        }
    }

    fn solution(t: Trajectory, objective: f64, time: f64) -> Solution {
        Solution {
            model: "toy".into(),
            variant: Variant::Full,
            intervals: t.controls.len(),
            epsilon: 1e-6,
            sim: None,
            objective,
            status: SolverStatus::Converged,
            kkt_residual: 0.0,
            iterations: 1,
            wall_time_s: time,
            n_vars: 7,
            n_constraints: 4,
            trajectory: t,
        }
    }

    #[test]
    fn self_comparison_is_zero() {
        let a = solution(traj(1.0), -3.0, 0.2);
        let r = compare(&a, &a).unwrap();
        assert_eq!(r.max_abs(), 0.0);
        assert_eq!(r.objective_abs_delta, 0.0);
        assert_eq!(r.speedup, 1.0);
    }

    #[test]
    fn absolute_deltas_are_symmetric() {
        let a = solution(traj(1.0), -3.0, 0.2);
        let b = solution(traj(1.2), -2.9, 0.05);
        let ab = compare(&a, &b).unwrap();
        let ba = compare(&b, &a).unwrap();
        for (x, y) in ab.signals.iter().zip(&ba.signals) {
            assert_eq!(x.abs_inf, y.abs_inf);
        }
        assert!((ab.max_state_abs - 0.1).abs() < 1e-15);
        assert_eq!(ab.worst_signal.as_deref(), Some("b"));
        assert!((ab.speedup - 4.0).abs() < 1e-12);
    }

    #[test]
    fn relative_error_skips_tiny_reference() {
        let a = solution(traj(1.0), -3.0, 0.2);
        let b = solution(traj(3.0), -3.0, 0.2);
        let r = compare(&a, &b).unwrap();
        // The second control sample (1e-9) is below the floor.
        assert_eq!(r.signal("u").unwrap().rel_inf, Some(0.0));
        assert!((r.signal("b").unwrap().rel_inf.unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = solution(traj(1.0), -3.0, 0.2);
        let mut t = traj(1.0);
        t.times.push(1.5);
        t.states.push(vec![0.5, 0.2]);
        t.controls.push(vec![0.0]);
        let b = solution(t, -3.0, 0.2);
        assert!(matches!(compare(&a, &b), Err(ReportError::Incomparable(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = traj(1.0);
        t.states[1][0] = std::f64::consts::PI * 1e-13;
        t.controls[0][0] = 1.0 / 3.0;
        write_csv(&t, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), t);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().last().unwrap().ends_with(','));
    }

    #[test]
    fn empty_trajectory_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let t = Trajectory {
            state_names: vec!["x".into()],
            control_names: vec!["u".into()],
            times: vec![],
            states: vec![],
            controls: vec![],
        };
        write_csv(&t, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "t,x,u\n");
    }

    #[test]
    fn json_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let a = solution(traj(1.0), -3.0, 0.2);
        let mut doc = RunDocument::new(a.clone());
        doc.comparison = Some(compare(&a, &a).unwrap());
        doc.config = Some(serde_json::json!({"N": 2}));
        write_json(&doc, &path).unwrap();
        let back = read_json(&path).unwrap();
        assert_eq!(back, doc);
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in [
            "schema",
            "model",
            "variant",
            "N",
            "epsilon",
            "objective",
            "status",
            "wall_time_s",
            "trajectory",
        ] {
            assert!(raw.get(key).is_some(), "missing {key}");
        }
        assert_eq!(raw["schema"], SCHEMA);
    }

    #[test]
    fn zero_horizon_forward_check_keeps_initial_state() {
        let m = enzyme_model();
        let t = Trajectory {
            state_names: m.state_names.clone(),
            control_names: m.control_names.clone(),
            times: vec![0.0, 0.0, 0.0],
            states: vec![vec![1.0, 0.5]; 3],
            controls: vec![vec![3.0]; 2],
        };
        let fc = forward_check(&m, &t, 1, NewtonOptions::default()).unwrap();
        assert!(fc.states.iter().all(|x| x == &vec![1.0, 0.5]));
        assert_eq!(fc.max_deviation, 0.0);
    }

    #[test]
    fn median_of_odd_and_even_samples() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0, 9.0, 0.5]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0]), 2.5);
    }
}
