//! Primal-dual interior-point solver for [`NlpProblem`]s.
//!
//! Bounds are handled by a logarithmic barrier on the variables themselves
//! (no slacks), the barrier parameter decreases monotonically, and steps
//! are globalized by a backtracking filter line search with second-order
//! corrections. Nonconvexity is handled by adding `δ_w I`
//! to the Hessian block until the KKT matrix has the inertia of a local
//! minimizer.
//!
//! Pinned variables (`x_i = v`) are removed from the Newton systems and
//! their multipliers recovered at the end. When the constraint violation
//! stalls, a Levenberg-Marquardt phase minimizes `½‖c(x)‖²` inside the
//! bounds; if that phase stalls as well, the point is reported as locally
//! infeasible.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kkt::{Envelope, Inertia};
use crate::nlp::{Derivatives, EvalError, NlpProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Tolerance on stationarity, feasibility and complementarity.
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub mu_init: f64,
    /// Linear barrier reduction factor.
    pub mu_linear: f64,
    /// Superlinear barrier reduction exponent.
    pub mu_superlinear: f64,
    /// Lower bound on the fraction-to-boundary parameter.
    pub tau_min: f64,
    /// First nonzero Hessian regularization.
    pub reg_init: f64,
    /// Growth factor of the Hessian regularization.
    pub reg_growth: f64,
    /// Relative distance by which the start is pushed inside the bounds.
    pub bound_push: f64,
    /// Window, minimum decrease and threshold of the stall test on the
    /// constraint violation.
    pub infeasibility_window: usize,
    pub infeasibility_decrease: f64,
    pub infeasibility_threshold: f64,
    /// Spot-check derivatives against finite differences before solving.
    pub derivative_check: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iter: 300,
            mu_init: 0.1,
            mu_linear: 0.2,
            mu_superlinear: 1.5,
            tau_min: 0.995,
            reg_init: 1e-4,
            reg_growth: 10.0,
            bound_push: 1e-2,
            infeasibility_window: 10,
            infeasibility_decrease: 1e-10,
            infeasibility_threshold: 1e-6,
            derivative_check: cfg!(debug_assertions),
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolveError> {
        let positive = [self.kkt_tol, self.mu_init, self.reg_init, self.bound_push];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(SolveError::Problem(
                "tolerances and barrier parameters must be positive".into(),
            ));
        }
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) || !(self.mu_linear > 0.0 && self.mu_linear < 1.0) {
            return Err(SolveError::Problem(
                "fraction-to-boundary and barrier factors must lie in (0, 1)".into(),
            ));
        }
        if self.mu_superlinear <= 1.0 || self.reg_growth <= 1.0 {
            return Err(SolveError::Problem(
                "barrier exponent and regularization growth must exceed 1".into(),
            ));
        }
        if self.max_iter == 0 || self.infeasibility_window == 0 {
            return Err(SolveError::Problem("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Converged,
    MaxIter,
    LocallyInfeasible,
    LineSearchFailure,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Converged => "Converged",
            Self::MaxIter => "MaxIter",
            Self::LocallyInfeasible => "LocallyInfeasible",
            Self::LineSearchFailure => "LineSearchFailure",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub inf_pr: f64,
    pub inf_du: f64,
    pub mu: f64,
    pub alpha_pr: f64,
    pub alpha_du: f64,
    pub reg: f64,
    pub restoration: bool,
}

impl std::fmt::Display for IterationRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:4}{} {:+.8e} {:.2e} {:.2e} {:.1e} {:.2e} {:.2e} {:.1e}",
            self.iter,
            if self.restoration { 'r' } else { ' ' },
            self.objective,
            self.inf_pr,
            self.inf_du,
            self.mu,
            self.alpha_pr,
            self.alpha_du,
            self.reg
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverResult {
    pub variables: Vec<f64>,
    /// Equality multipliers, one per constraint row (pins included).
    pub lambda: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    pub objective: f64,
    /// Largest of stationarity, feasibility and complementarity errors of
    /// the barrier-free problem.
    pub kkt_residual: f64,
    pub primal_infeasibility: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub wall_time: f64,
    #[serde(skip)]
    pub log: Vec<IterationRecord>,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Filter of `(θ, φ)` pairs (constraint violation, barrier objective)
/// with the switching rule of Wächter and Biegler: steps that promise
/// enough objective decrease at nearly feasible points must satisfy Armijo
/// on `φ`, all others must improve `θ` or `φ` against the current point and
/// every filter entry.
struct Filter {
    entries: Vec<(f64, f64)>,
    theta_max: f64,
    theta_min: f64,
}

const GAMMA_THETA: f64 = 1e-5;
const GAMMA_PHI: f64 = 1e-8;
const GAMMA_ALPHA: f64 = 0.05;
const S_THETA: f64 = 1.1;
const S_PHI: f64 = 2.3;
const ARMIJO: f64 = 1e-4;

impl Filter {
    fn new(theta_max: f64, theta_min: f64) -> Self {
        Self {
            entries: Vec::new(),
            theta_max,
            theta_min,
        }
    }

    fn clear(&mut self) {
        self.entries.clear();
    }

    /// Adds the margin-shifted current point.
    fn add(&mut self, (theta, phi): (f64, f64)) {
        let entry = ((1.0 - GAMMA_THETA) * theta, phi - GAMMA_PHI * theta);
        self.entries.retain(|&(t, p)| t < entry.0 || p < entry.1);
        self.entries.push(entry);
    }

    fn switching(theta: f64, alpha: f64, gp: f64) -> bool {
        gp < 0.0 && alpha * (-gp).powf(S_PHI) > theta.powf(S_THETA)
    }

    /// Smallest step worth trying before falling back to restoration.
    fn min_step(&self, theta: f64, gp: f64) -> f64 {
        let mut a = GAMMA_THETA;
        if gp < 0.0 {
            a = a.min(GAMMA_PHI * theta / -gp);
            if theta <= self.theta_min {
                a = a.min(theta.powf(S_THETA) / (-gp).powf(S_PHI));
            }
        }
        (GAMMA_ALPHA * a).max(1e-14)
    }

    /// `Some(f_type)` if `trial` is acceptable; `f_type` marks steps that
    /// passed the Armijo test and do not augment the filter.
    fn accepts(&self, current: (f64, f64), trial: (f64, f64), alpha: f64, gp: f64) -> Option<bool> {
        let (theta, phi) = current;
        let (tt, pt) = trial;
        if !(tt.is_finite() && pt.is_finite()) || tt > self.theta_max {
            return None;
        }
        if self.entries.iter().any(|&(t, p)| tt >= t && pt >= p) {
            return None;
        }
        let noise = 10.0 * f64::EPSILON * phi.abs();
        if theta <= self.theta_min && Self::switching(theta, alpha, gp) {
            return (pt - phi <= ARMIJO * alpha * gp + noise).then_some(true);
        }
        (tt <= (1.0 - GAMMA_THETA) * theta || pt - phi <= -GAMMA_PHI * theta + noise).then_some(false)
    }
}

/// Structure of the reduced KKT system: free variables and non-pin rows,
/// ordered by their elimination keys.
struct KktStructure {
    free: Vec<usize>,
    /// Global variable → position in `free`.
    var_slot: Vec<Option<usize>>,
    rows: Vec<usize>,
    row_slot: Vec<Option<usize>>,
    /// Item index of each free variable and of each row in the envelope.
    var_item: Vec<usize>,
    row_item: Vec<usize>,
    env: Envelope,
    /// Envelope offset of every Hessian / Jacobian triplet that survives
    /// the reduction, indexed like the triplet vectors.
    hess_pos: Vec<Option<usize>>,
    jac_pos: Vec<Option<usize>>,
    var_diag: Vec<usize>,
    row_diag: Vec<usize>,
}

impl KktStructure {
    fn new(nlp: &NlpProblem, fixed: &[Option<f64>], d: &Derivatives) -> Self {
        let free: Vec<usize> = (0..nlp.n_vars).filter(|&v| fixed[v].is_none()).collect();
        let mut var_slot = vec![None; nlp.n_vars];
        for (k, &v) in free.iter().enumerate() {
            var_slot[v] = Some(k);
        }
        let mut is_pin_row = vec![false; nlp.n_eq];
        for p in &nlp.pins {
            is_pin_row[p.row] = true;
        }
        let rows: Vec<usize> = (0..nlp.n_eq).filter(|&r| !is_pin_row[r]).collect();
        let mut row_slot = vec![None; nlp.n_eq];
        for (k, &r) in rows.iter().enumerate() {
            row_slot[r] = Some(k);
        }

        let mut items: Vec<(usize, usize, bool, usize)> = Vec::with_capacity(free.len() + rows.len());
        for (k, &v) in free.iter().enumerate() {
            let (s, t) = nlp.var_order[v];
            items.push((s, t, false, k));
        }
        for (k, &r) in rows.iter().enumerate() {
            let (s, t) = nlp.con_order[r];
            items.push((s, t, true, k));
        }
        items.sort();
        let mut row_vars: Vec<Vec<usize>> = vec![Vec::new(); rows.len()];
        for &(r, v, _) in &d.jacobian {
            if let (Some(a), Some(b)) = (row_slot[r], var_slot[v]) {
                row_vars[a].push(b);
            }
        }
        let mut partner: Vec<Option<usize>> = vec![None; rows.len()];
        let mut paired = vec![false; free.len()];
        for &(r, v) in &nlp.pivot_pairs {
            if let (Some(a), Some(b)) = (row_slot[r], var_slot[v]) {
                if partner[a].is_none() && !paired[b] && row_vars[a].contains(&b) {
                    partner[a] = Some(b);
                    paired[b] = true;
                }
            }
        }
        let order = Self::cover_rows(&items, &row_vars, &partner, &paired);
        let mut var_item = vec![0; free.len()];
        let mut row_item = vec![0; rows.len()];
        for (pos, &(is_con, k)) in order.iter().enumerate() {
            if is_con {
                row_item[k] = pos;
            } else {
                var_item[k] = pos;
            }
        }

        let hess_items: Vec<Option<(usize, usize)>> = d
            .hessian
            .iter()
            .map(|&(i, j, _)| Some((var_item[var_slot[i]?], var_item[var_slot[j]?])))
            .collect();
        let jac_items: Vec<Option<(usize, usize)>> = d
            .jacobian
            .iter()
            .map(|&(r, v, _)| Some((row_item[row_slot[r]?], var_item[var_slot[v]?])))
            .collect();
        let pairs: Vec<usize> = partner
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_some())
            .map(|(k, _)| row_item[k])
            .collect();
        let env = Envelope::new(
            items.len(),
            hess_items.iter().chain(&jac_items).filter_map(|e| *e),
            &pairs,
        );
        let hess_pos = hess_items.iter().map(|e| e.map(|(i, j)| env.position(i, j))).collect();
        let jac_pos = jac_items.iter().map(|e| e.map(|(i, j)| env.position(i, j))).collect();
        let var_diag = var_item.iter().map(|&i| env.position(i, i)).collect();
        let row_diag = row_item.iter().map(|&i| env.position(i, i)).collect();
        Self {
            free,
            var_slot,
            rows,
            row_slot,
            var_item,
            row_item,
            env,
            hess_pos,
            jac_pos,
            var_diag,
            row_diag,
        }
    }

    /// Final elimination order. A paired row is eliminated together with
    /// its partner variable, which follows it directly. A block of unpaired
    /// rows sharing an order key is eliminated only once it touches at
    /// least as many already eliminated variables as it has rows, or once
    /// all its variables are in; eliminated earlier, such rows meet
    /// structurally zero pivots (continuity rows whose left node is fixed).
    fn cover_rows(
        items: &[(usize, usize, bool, usize)],
        row_vars: &[Vec<usize>],
        partner: &[Option<usize>],
        paired: &[bool],
    ) -> Vec<(bool, usize)> {
        let mut order = Vec::with_capacity(items.len());
        let mut placed = vec![false; paired.len()];
        let mut waiting: Vec<Vec<usize>> = Vec::new();
        let release = |order: &mut Vec<(bool, usize)>, waiting: &mut Vec<Vec<usize>>, placed: &[bool]| {
            let mut w = 0;
            while w < waiting.len() {
                if waiting[w].iter().all(|&r| row_vars[r].iter().all(|&v| placed[v])) {
                    order.extend(waiting.remove(w).into_iter().map(|r| (true, r)));
                } else {
                    w += 1;
                }
            }
        };
        let mut i = 0;
        while i < items.len() {
            let (s, t, is_con, k) = items[i];
            if !is_con {
                if !paired[k] {
                    order.push((false, k));
                    placed[k] = true;
                    release(&mut order, &mut waiting, &placed);
                }
                i += 1;
                continue;
            }
            let mut block = Vec::new();
            while i < items.len() && items[i].2 && (items[i].0, items[i].1) == (s, t) {
                let r = items[i].3;
                match partner[r] {
                    Some(v) => {
                        order.push((true, r));
                        order.push((false, v));
                        placed[v] = true;
                    }
                    None => block.push(r),
                }
                i += 1;
            }
            let mut seen: Vec<usize> = block
                .iter()
                .flat_map(|&r| row_vars[r].iter().copied())
                .filter(|&v| placed[v])
                .collect();
            seen.sort_unstable();
            seen.dedup();
            let all_placed = block.iter().all(|&r| row_vars[r].iter().all(|&v| placed[v]));
            if seen.len() >= block.len() || all_placed {
                order.extend(block.into_iter().map(|r| (true, r)));
            } else if !block.is_empty() {
                waiting.push(block);
            }
            release(&mut order, &mut waiting, &placed);
        }
        order.extend(waiting.into_iter().flatten().map(|r| (true, r)));
        order
    }

    fn n_free(&self) -> usize {
        self.free.len()
    }

    fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Fills `[[H·h_scale + diag(dv), Jᵀ], [J, -diag(dc)]]`.
    fn fill(&mut self, d: &Derivatives, h_scale: f64, dv: &[f64], dc: &[f64]) {
        self.env.clear();
        if h_scale != 0.0 {
            for (t, pos) in self.hess_pos.iter().enumerate() {
                if let Some(p) = pos {
                    self.env.add_at(*p, h_scale * d.hessian[t].2);
                }
            }
        }
        for (t, pos) in self.jac_pos.iter().enumerate() {
            if let Some(p) = pos {
                self.env.add_at(*p, d.jacobian[t].2);
            }
        }
        for (k, &p) in self.var_diag.iter().enumerate() {
            self.env.add_at(p, dv[k]);
        }
        for (k, &p) in self.row_diag.iter().enumerate() {
            self.env.add_at(p, -dc[k]);
        }
    }

    /// Product of the matrix described by `fill`'s arguments with `(x, y)`
    /// given in (free-variable, row) coordinates.
    fn apply(
        &self,
        d: &Derivatives,
        h_scale: f64,
        dv: &[f64],
        dc: &[f64],
        x: &[f64],
        y: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut ox: Vec<f64> = dv.iter().zip(x).map(|(a, b)| a * b).collect();
        let mut oy: Vec<f64> = dc.iter().zip(y).map(|(a, b)| -a * b).collect();
        if h_scale != 0.0 {
            for (t, pos) in self.hess_pos.iter().enumerate() {
                if pos.is_some() {
                    let (i, j, v) = d.hessian[t];
                    let (a, b) = (self.var_slot[i].unwrap(), self.var_slot[j].unwrap());
                    ox[a] += h_scale * v * x[b];
                    if a != b {
                        ox[b] += h_scale * v * x[a];
                    }
                }
            }
        }
        for (t, pos) in self.jac_pos.iter().enumerate() {
            if pos.is_some() {
                let (r, v, val) = d.jacobian[t];
                let (a, b) = (self.row_slot[r].unwrap(), self.var_slot[v].unwrap());
                oy[a] += val * x[b];
                ox[b] += val * y[a];
            }
        }
        (ox, oy)
    }

    /// Solves with the current factorization, `(rx, ry)` in reduced
    /// coordinates.
    fn solve(&self, rx: &[f64], ry: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut b = vec![0.0; self.env.dim()];
        for (k, &i) in self.var_item.iter().enumerate() {
            b[i] = rx[k];
        }
        for (k, &i) in self.row_item.iter().enumerate() {
            b[i] = ry[k];
        }
        self.env.solve(&mut b);
        (
            self.var_item.iter().map(|&i| b[i]).collect(),
            self.row_item.iter().map(|&i| b[i]).collect(),
        )
    }

    /// Solve followed by iterative refinement against the matrix with
    /// diagonal `dc_exact` in the constraint block.
    #[allow(clippy::too_many_arguments)]
    fn solve_refined(
        &self,
        d: &Derivatives,
        h_scale: f64,
        dv: &[f64],
        dc_exact: &[f64],
        rx: &[f64],
        ry: &[f64],
        sweeps: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let (mut x, mut y) = self.solve(rx, ry);
        let scale = inf_norm(rx).max(inf_norm(ry)).max(1.0);
        for _ in 0..sweeps {
            let (ax, ay) = self.apply(d, h_scale, dv, dc_exact, &x, &y);
            let ex: Vec<f64> = rx.iter().zip(&ax).map(|(a, b)| a - b).collect();
            let ey: Vec<f64> = ry.iter().zip(&ay).map(|(a, b)| a - b).collect();
            let err = inf_norm(&ex).max(inf_norm(&ey));
            if err <= 1e-15 * scale || !err.is_finite() {
                break;
            }
            let (cx, cy) = self.solve(&ex, &ey);
            x.iter_mut().zip(&cx).for_each(|(a, b)| *a += b);
            y.iter_mut().zip(&cy).for_each(|(a, b)| *a += b);
        }
        (x, y)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn one_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Primal-dual iterate on the free variables.
#[derive(Clone)]
struct Iterate {
    x: Vec<f64>,
    lambda: Vec<f64>,
    zl: Vec<f64>,
    zu: Vec<f64>,
}

struct Solver<'a> {
    nlp: &'a NlpProblem,
    opts: &'a SolverOptions,
    s: KktStructure,
    /// Bounds of the free variables.
    lo: Vec<f64>,
    hi: Vec<f64>,
    has_lo: Vec<bool>,
    has_hi: Vec<bool>,
    log: Vec<IterationRecord>,
    iter: usize,
    last_reg: f64,
    /// Constraint scaling factors, one per row of the NLP.
    row_scale: Vec<f64>,
    /// Violation history for the stall tests.
    theta_hist: Vec<f64>,
}

const KAPPA_SIGMA: f64 = 1e10;
const ROW_GRADIENT_MAX: f64 = 100.0;
const ALPHA_MIN: f64 = 1e-12;
const SOC_MAX: usize = 4;
const SOC_DECREASE: f64 = 0.99;
const DELTA_C: f64 = 0.0;

impl<'a> Solver<'a> {
    fn full_x(&self, xf: &[f64], template: &[f64]) -> Vec<f64> {
        let mut x = template.to_vec();
        for (k, &v) in self.s.free.iter().enumerate() {
            x[v] = xf[k];
        }
        x
    }

    /// Multipliers of the original (unscaled) rows.
    fn full_lambda(&self, lr: &[f64]) -> Vec<f64> {
        let mut l = vec![0.0; self.nlp.n_eq];
        for (k, &r) in self.s.rows.iter().enumerate() {
            l[r] = lr[k] * self.row_scale[r];
        }
        l
    }

    fn rows_of(&self, c: &[f64]) -> Vec<f64> {
        self.s.rows.iter().map(|&r| c[r]).collect()
    }

    /// `∇f + Jᵀλ` on the free variables.
    fn lagrangian_gradient(&self, d: &Derivatives, lr: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = self.s.free.iter().map(|&v| d.gradient[v]).collect();
        for (t, pos) in self.s.jac_pos.iter().enumerate() {
            if pos.is_some() {
                let (r, v, val) = d.jacobian[t];
                g[self.s.var_slot[v].unwrap()] += val * lr[self.s.row_slot[r].unwrap()];
            }
        }
        g
    }

    fn slack_lo(&self, x: &[f64], k: usize) -> f64 {
        x[k] - self.lo[k]
    }

    fn slack_hi(&self, x: &[f64], k: usize) -> f64 {
        self.hi[k] - x[k]
    }

    fn barrier(&self, x: &[f64], mu: f64) -> f64 {
        let mut b = 0.0;
        for k in 0..x.len() {
            if self.has_lo[k] {
                b -= mu * self.slack_lo(x, k).ln();
            }
            if self.has_hi[k] {
                b -= mu * self.slack_hi(x, k).ln();
            }
        }
        b
    }

    fn barrier_gradient(&self, x: &[f64], mu: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut g = 0.0;
                if self.has_lo[k] {
                    g -= mu / self.slack_lo(x, k);
                }
                if self.has_hi[k] {
                    g += mu / self.slack_hi(x, k);
                }
                g
            })
            .collect()
    }

    /// Largest step in `(0, 1]` keeping `x + α dx` a fraction `tau` inside
    /// the bounds.
    fn max_step_primal(&self, x: &[f64], dx: &[f64], tau: f64) -> f64 {
        let mut a: f64 = 1.0;
        for (k, &d) in dx.iter().enumerate().take(x.len()) {
            if self.has_lo[k] && d < 0.0 {
                a = a.min(-tau * self.slack_lo(x, k) / d);
            }
            if self.has_hi[k] && d > 0.0 {
                a = a.min(tau * self.slack_hi(x, k) / d);
            }
        }
        a
    }

    fn max_step_dual(z: &[f64], dz: &[f64], tau: f64) -> f64 {
        z.iter()
            .zip(dz)
            .filter(|(_, d)| **d < 0.0)
            .fold(1.0f64, |a, (zi, di)| a.min(-tau * zi / di))
    }

    fn evaluate(&self, xf: &[f64], template: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        let x = self.full_x(xf, template);
        let (f, c) = self.nlp.eval(&x)?;
        Ok((f, self.s.rows.iter().map(|&r| c[r] * self.row_scale[r]).collect()))
    }

    /// Derivatives of the row-scaled problem.
    fn derivatives(&self, xf: &[f64], template: &[f64], lr: &[f64], obj_factor: f64) -> Result<Derivatives, EvalError> {
        let x = self.full_x(xf, template);
        let mut d = self.nlp.derivatives(&x, &self.full_lambda(lr), obj_factor)?;
        for (r, c) in d.constraints.iter_mut().enumerate() {
            *c *= self.row_scale[r];
        }
        for (r, _, v) in d.jacobian.iter_mut() {
            *v *= self.row_scale[*r];
        }
        Ok(d)
    }

    /// Least-squares equality multipliers for the given bound duals.
    fn estimate_lambda(&mut self, d: &Derivatives, it: &Iterate) -> Vec<f64> {
        let n = self.s.n_free();
        let m = self.s.n_rows();
        if m == 0 {
            return Vec::new();
        }
        let rx: Vec<f64> = (0..n)
            .map(|k| -(d.gradient[self.s.free[k]] - it.zl[k] + it.zu[k]))
            .collect();
        self.s.fill(d, 0.0, &vec![1.0; n], &vec![1e-8; m]);
        self.s.env.factor(0.0);
        let (_, lambda) = self.s.solve(&rx, &vec![0.0; m]);
        if inf_norm(&lambda) > 1e3 || lambda.iter().any(|v| !v.is_finite()) {
            vec![0.0; m]
        } else {
            lambda
        }
    }

    fn push_inside(&self, x: &mut [f64]) {
        let kappa = self.opts.bound_push;
        for (k, xk) in x.iter_mut().enumerate() {
            let (l, u) = (self.lo[k], self.hi[k]);
            let pl = kappa * l.abs().max(1.0);
            let pu = kappa * u.abs().max(1.0);
            match (self.has_lo[k], self.has_hi[k]) {
                (true, true) => {
                    let pl = pl.min(kappa * (u - l));
                    let pu = pu.min(kappa * (u - l));
                    *xk = xk.max(l + pl).min(u - pu);
                }
                (true, false) => *xk = xk.max(l + pl),
                (false, true) => *xk = xk.min(u - pu),
                (false, false) => {}
            }
        }
    }

    fn record(&mut self, rec: IterationRecord) {
        log::debug!("{rec}");
        self.log.push(rec);
    }

    /// True when the violation failed to drop by the configured amount over
    /// the stall window while still above the threshold.
    fn stalled(&self) -> bool {
        let w = self.opts.infeasibility_window;
        let h = &self.theta_hist;
        if h.len() <= w {
            return false;
        }
        let now = h[h.len() - 1];
        let then = h[h.len() - 1 - w];
        now > self.opts.infeasibility_threshold && then - now < self.opts.infeasibility_decrease
    }

    /// True when the violation has not moved over the stall window while
    /// above the threshold.
    fn stuck(&self) -> bool {
        let w = self.opts.infeasibility_window;
        let h = &self.theta_hist;
        if h.len() <= w {
            return false;
        }
        let now = h[h.len() - 1];
        let then = h[h.len() - 1 - w];
        now > self.opts.infeasibility_threshold && (then - now).abs() < self.opts.infeasibility_decrease
    }

    /// Levenberg-Marquardt minimization of `½‖c‖²` inside the bounds.
    /// Returns `Ok(true)` once the violation has been halved and `Ok(false)`
    /// when it stalls or the iteration budget runs out.
    fn restore(&mut self, it: &mut Iterate, template: &[f64], mu: f64) -> Result<bool, SolveError> {
        let n = self.s.n_free();
        let m = self.s.n_rows();
        let (_, c0) = self.evaluate(&it.x, template)?;
        let theta0 = inf_norm(&c0);
        let target = 0.5 * theta0;
        let mut rho = 1e-6;
        self.theta_hist.clear();
        self.theta_hist.push(theta0);
        log::debug!("restoration phase from violation {theta0:.3e}");
        loop {
            if self.iter >= self.opts.max_iter {
                return Ok(false);
            }
            let d = self.derivatives(&it.x, template, &vec![0.0; m], 0.0)?;
            let c = self.rows_of(&d.constraints);
            let theta = inf_norm(&c);
            if theta <= target {
                return Ok(true);
            }
            let merit = |c: &[f64]| 0.5 * c.iter().map(|v| v * v).sum::<f64>();
            // Damping grows near the bounds so that the step stays
            // well inside them.
            let dv: Vec<f64> = (0..n)
                .map(|k| {
                    let mut s = 1.0;
                    if self.has_lo[k] {
                        s += self.slack_lo(&it.x, k).powi(-2);
                    }
                    if self.has_hi[k] {
                        s += self.slack_hi(&it.x, k).powi(-2);
                    }
                    rho * s
                })
                .collect();
            let ones = vec![1.0; m];
            self.s.fill(&d, 0.0, &dv, &ones);
            self.s.env.factor(0.0);
            let ry: Vec<f64> = c.iter().map(|v| -v).collect();
            let (dx, _) = self.s.solve_refined(&d, 0.0, &dv, &ones, &vec![0.0; n], &ry, 2);
            let mut grad = vec![0.0; n];
            for (t, pos) in self.s.jac_pos.iter().enumerate() {
                if pos.is_some() {
                    let (r, v, val) = d.jacobian[t];
                    grad[self.s.var_slot[v].unwrap()] += val * c[self.s.row_slot[r].unwrap()];
                }
            }
            let slope: f64 = grad.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let phi0 = merit(&c);
            let mut alpha = self.max_step_primal(&it.x, &dx, 0.995);
            let mut accepted = None;
            while alpha >= ALPHA_MIN && slope < 0.0 {
                let xt: Vec<f64> = it.x.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
                if let Ok((_, ct)) = self.evaluate(&xt, template) {
                    let phit = merit(&ct);
                    if phit <= phi0 + ARMIJO * alpha * slope {
                        accepted = Some((xt, ct));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            self.iter += 1;
            let (step, theta_new) = match accepted {
                Some((xt, ct)) => {
                    it.x = xt;
                    rho = (rho / 10.0).max(1e-12);
                    (alpha, inf_norm(&ct))
                }
                None => {
                    rho *= 100.0;
                    (0.0, theta)
                }
            };
            self.record(IterationRecord {
                iter: self.iter,
                objective: d.objective,
                inf_pr: theta_new,
                inf_du: 0.0,
                mu,
                alpha_pr: step,
                alpha_du: 0.0,
                reg: rho,
                restoration: true,
            });
            self.theta_hist.push(theta_new);
            if self.stalled() || rho > 1e20 {
                return Ok(false);
            }
        }
    }

    fn reset_bound_duals(&self, it: &mut Iterate, mu: f64) {
        for k in 0..it.x.len() {
            if self.has_lo[k] {
                it.zl[k] = mu / self.slack_lo(&it.x, k);
            }
            if self.has_hi[k] {
                it.zu[k] = mu / self.slack_hi(&it.x, k);
            }
        }
    }

    /// Keeps the bound duals within a factor `κ_Σ` of their centered values.
    fn clamp_bound_duals(&self, it: &mut Iterate, mu: f64) {
        for k in 0..it.x.len() {
            if self.has_lo[k] {
                let c = mu / self.slack_lo(&it.x, k);
                it.zl[k] = it.zl[k].clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA);
            }
            if self.has_hi[k] {
                let c = mu / self.slack_hi(&it.x, k);
                it.zu[k] = it.zu[k].clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA);
            }
        }
    }

    /// Errors of the barrier problem with parameter `mu`:
    /// `(stationarity, feasibility, complementarity)`.
    fn errors(&self, it: &Iterate, d: &Derivatives, mu: f64) -> (f64, f64, f64) {
        let g = self.lagrangian_gradient(d, &it.lambda);
        let stat = g
            .iter()
            .enumerate()
            .fold(0.0f64, |m, (k, gk)| m.max((gk - it.zl[k] + it.zu[k]).abs()));
        let feas = self.s.rows.iter().fold(0.0f64, |m, &r| m.max(d.constraints[r].abs()));
        let mut comp: f64 = 0.0;
        for k in 0..it.x.len() {
            if self.has_lo[k] {
                comp = comp.max((it.zl[k] * self.slack_lo(&it.x, k) - mu).abs());
            }
            if self.has_hi[k] {
                comp = comp.max((it.zu[k] * self.slack_hi(&it.x, k) - mu).abs());
            }
        }
        (stat, feas, comp)
    }

    /// Factors the Newton matrix, raising `δ_w` until the inertia is that
    /// of a local minimizer. Returns `δ_w` and the diagonal used.
    fn factor_newton(
        &mut self,
        d: &Derivatives,
        sigma: &[f64],
        mu: f64,
    ) -> Result<(f64, Vec<f64>, Vec<f64>), SolveError> {
        let n = self.s.n_free();
        let m = self.s.n_rows();
        let mut delta_w = 0.0;
        let mut delta_c = DELTA_C;
        loop {
            let dv: Vec<f64> = sigma.iter().map(|s| s + delta_w).collect();
            let dc = vec![delta_c; m];
            self.s.fill(d, 1.0, &dv, &dc);
            let inertia = self.s.env.factor(1e-14);
            if inertia
                == (Inertia {
                    positive: n,
                    negative: m,
                    zero: 0,
                })
            {
                if delta_w > 0.0 {
                    self.last_reg = delta_w;
                }
                return Ok((delta_w, dv, dc));
            }
            if inertia.zero > 0 && delta_c < 1e-8 * mu.powf(0.25) {
                delta_c = 1e-8 * mu.powf(0.25);
            }
            delta_w = if delta_w == 0.0 {
                if self.last_reg == 0.0 {
                    self.opts.reg_init
                } else {
                    (self.last_reg / 3.0).max(1e-20)
                }
            } else {
                delta_w * self.opts.reg_growth
            };
            if delta_w > 1e40 {
                return Err(SolveError::Problem("KKT matrix could not be regularized".into()));
            }
        }
    }

    /// Bound-dual steps that go with the primal step `dx`.
    fn bound_dual_steps(&self, it: &Iterate, dx: &[f64], mu: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.s.n_free();
        let dzl = (0..n)
            .map(|k| {
                if self.has_lo[k] {
                    let s = self.slack_lo(&it.x, k);
                    mu / s - it.zl[k] - it.zl[k] / s * dx[k]
                } else {
                    0.0
                }
            })
            .collect();
        let dzu = (0..n)
            .map(|k| {
                if self.has_hi[k] {
                    let s = self.slack_hi(&it.x, k);
                    mu / s - it.zu[k] + it.zu[k] / s * dx[k]
                } else {
                    0.0
                }
            })
            .collect();
        (dzl, dzu)
    }

    fn failed_restoration(&self) -> SolverStatus {
        if self.iter >= self.opts.max_iter {
            SolverStatus::MaxIter
        } else {
            SolverStatus::LocallyInfeasible
        }
    }

    /// Fresh duals after a restoration phase: `z = μ/s` and least-squares
    /// equality multipliers.
    fn after_restoration(&mut self, it: &mut Iterate, template: &[f64], mu: f64) -> Result<(), SolveError> {
        self.reset_bound_duals(it, mu);
        let d = self.derivatives(&it.x, template, &vec![0.0; self.s.n_rows()], 1.0)?;
        it.lambda = self.estimate_lambda(&d, it);
        self.theta_hist.clear();
        Ok(())
    }

    fn run(&mut self, x_start: Vec<f64>, template: &[f64]) -> Result<(Iterate, SolverStatus, f64), SolveError> {
        let n = self.s.n_free();
        let m = self.s.n_rows();
        let mut mu = self.opts.mu_init;
        let mut x = x_start;
        self.push_inside(&mut x);
        let mut it = Iterate {
            zl: self.has_lo.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            zu: self.has_hi.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            lambda: vec![0.0; m],
            x,
        };
        let d0 = self.derivatives(&it.x, template, &it.lambda, 1.0)?;
        it.lambda = self.estimate_lambda(&d0, &it);

        let (_, c_start) = self.evaluate(&it.x, template)?;
        let theta_scale = one_norm(&c_start).max(1.0);
        let mut filter = Filter::new(1e4 * theta_scale, 1e-4 * theta_scale);
        self.theta_hist.clear();
        loop {
            let d = self.derivatives(&it.x, template, &it.lambda, 1.0)?;
            let (stat, feas, comp0) = self.errors(&it, &d, 0.0);
            let e0 = stat.max(feas).max(comp0);
            if e0 <= self.opts.kkt_tol {
                return Ok((it, SolverStatus::Converged, mu));
            }
            if self.iter >= self.opts.max_iter {
                return Ok((it, SolverStatus::MaxIter, mu));
            }
            self.theta_hist.push(feas);
            if self.stuck() {
                if !self.restore(&mut it, template, mu)? {
                    return Ok((it, self.failed_restoration(), mu));
                }
                self.after_restoration(&mut it, template, mu)?;
                filter.clear();
                continue;
            }

            // Barrier update.
            let mu_floor = self.opts.kkt_tol / 10.0;
            loop {
                let (s, f, c) = self.errors(&it, &d, mu);
                if s.max(f).max(c) > 10.0 * mu || mu <= mu_floor {
                    break;
                }
                mu = mu_floor.max((self.opts.mu_linear * mu).min(mu.powf(self.opts.mu_superlinear)));
                filter.clear();
            }
            let tau = self.opts.tau_min.max(1.0 - mu);

            // Newton step.
            let sigma: Vec<f64> = (0..n)
                .map(|k| {
                    let mut s = 0.0;
                    if self.has_lo[k] {
                        s += it.zl[k] / self.slack_lo(&it.x, k);
                    }
                    if self.has_hi[k] {
                        s += it.zu[k] / self.slack_hi(&it.x, k);
                    }
                    s
                })
                .collect();
            let (delta_w, dv, dc) = self.factor_newton(&d, &sigma, mu)?;
            let g_lag = self.lagrangian_gradient(&d, &it.lambda);
            let bg = self.barrier_gradient(&it.x, mu);
            let rx: Vec<f64> = g_lag.iter().zip(&bg).map(|(a, b)| -(a + b)).collect();
            let c = self.rows_of(&d.constraints);
            let ry: Vec<f64> = c.iter().map(|v| -v).collect();
            let (dx, dlam) = self.s.solve_refined(&d, 1.0, &dv, &dc, &rx, &ry, 3);

            // Filter line search. Values at the current point come from the
            // same evaluation path as the trial points, so integrator
            // round-off cannot pass for progress.
            let gp: f64 = self
                .s
                .free
                .iter()
                .enumerate()
                .map(|(k, &v)| (d.gradient[v] + bg[k]) * dx[k])
                .sum();
            let (f_cur, c_cur) = self.evaluate(&it.x, template)?;
            let current = (one_norm(&c_cur), f_cur + self.barrier(&it.x, mu));
            let alpha_max = self.max_step_primal(&it.x, &dx, tau);
            let alpha_min = filter.min_step(current.0, gp);
            let mut alpha = alpha_max;
            let mut accepted = None;
            while alpha >= alpha_min {
                let xt: Vec<f64> = it.x.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
                if let Ok((ft, ct)) = self.evaluate(&xt, template) {
                    let trial = (one_norm(&ct), ft + self.barrier(&xt, mu));
                    if let Some(f_type) = filter.accepts(current, trial, alpha, gp) {
                        accepted = Some((xt, alpha, dx.clone(), dlam.clone(), f_type));
                        break;
                    }
                    if alpha == alpha_max && trial.0 >= current.0 {
                        // Second-order correction of the full step, reusing
                        // the factorization.
                        let mut c_soc: Vec<f64> = c.iter().zip(&ct).map(|(a, b)| alpha * a + b).collect();
                        let mut theta_prev = trial.0;
                        for _ in 0..SOC_MAX {
                            let ry_soc: Vec<f64> = c_soc.iter().map(|v| -v).collect();
                            let (dx_soc, dlam_soc) = self.s.solve_refined(&d, 1.0, &dv, &dc, &rx, &ry_soc, 3);
                            let a_soc = self.max_step_primal(&it.x, &dx_soc, tau);
                            let xs: Vec<f64> = it.x.iter().zip(&dx_soc).map(|(a, b)| a + a_soc * b).collect();
                            let Ok((fs, cs)) = self.evaluate(&xs, template) else {
                                break;
                            };
                            let soc = (one_norm(&cs), fs + self.barrier(&xs, mu));
                            if let Some(f_type) = filter.accepts(current, soc, alpha, gp) {
                                accepted = Some((xs, a_soc, dx_soc, dlam_soc, f_type));
                                break;
                            }
                            if soc.0 > SOC_DECREASE * theta_prev {
                                break;
                            }
                            theta_prev = soc.0;
                            c_soc.iter_mut().zip(&cs).for_each(|(v, cn)| *v = a_soc * *v + cn);
                        }
                        if accepted.is_some() {
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            let Some((xt, alpha, dx, dlam, f_type)) = accepted else {
                if feas > self.opts.infeasibility_threshold {
                    filter.add(current);
                    if self.restore(&mut it, template, mu)? {
                        self.after_restoration(&mut it, template, mu)?;
                        filter.clear();
                        continue;
                    }
                    return Ok((it, self.failed_restoration(), mu));
                }
                return Ok((it, SolverStatus::LineSearchFailure, mu));
            };
            if !f_type {
                filter.add(current);
            }
            let (dzl, dzu) = self.bound_dual_steps(&it, &dx, mu);
            let alpha_z = Self::max_step_dual(&it.zl, &dzl, tau).min(Self::max_step_dual(&it.zu, &dzu, tau));
            it.x = xt;
            it.lambda.iter_mut().zip(&dlam).for_each(|(l, d)| *l += alpha * d);
            for k in 0..n {
                it.zl[k] += alpha_z * dzl[k];
                it.zu[k] += alpha_z * dzu[k];
            }
            self.clamp_bound_duals(&mut it, mu);
            self.iter += 1;
            self.record(IterationRecord {
                iter: self.iter,
                objective: d.objective,
                inf_pr: feas,
                inf_du: stat,
                mu,
                alpha_pr: alpha,
                alpha_du: alpha_z,
                reg: delta_w,
                restoration: false,
            });
        }
    }
}

/// Solves `nlp` from `warm_start` (or the problem's own start).
pub fn solve(nlp: &NlpProblem, opts: &SolverOptions, warm_start: Option<&[f64]>) -> Result<SolverResult, SolveError> {
    let started = Instant::now();
    opts.validate()?;
    nlp.validate().map_err(SolveError::Problem)?;
    let n = nlp.n_vars;
    let x0 = warm_start.unwrap_or(&nlp.x0);
    if x0.len() != n {
        return Err(SolveError::Problem(format!(
            "start has length {}, expected {n}",
            x0.len()
        )));
    }

    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for p in &nlp.pins {
        if fixed[p.var].is_some_and(|v| v != p.value) {
            return Err(SolveError::Problem(format!("variable {} pinned to two values", p.var)));
        }
        fixed[p.var] = Some(p.value);
    }
    let mut template = x0.to_vec();
    for (v, f) in fixed.iter().enumerate() {
        if let Some(val) = f {
            template[v] = *val;
        }
    }

    if opts.derivative_check && n <= 150 {
        let err = nlp.check_derivatives(&template, 1e-6)?;
        if err > 1e-4 {
            log::warn!("derivative check: largest relative deviation {err:.3e}");
        }
    }

    let d0 = nlp.derivatives(&template, &vec![0.0; nlp.n_eq], 1.0)?;
    let s = KktStructure::new(nlp, &fixed, &d0);
    // Rows whose gradient is large at the start are scaled down so that
    // their largest Jacobian entry is ROW_GRADIENT_MAX.
    let mut row_max = vec![0.0f64; nlp.n_eq];
    for &(r, _, v) in &d0.jacobian {
        row_max[r] = row_max[r].max(v.abs());
    }
    let row_scale = row_max
        .iter()
        .map(|&g| {
            if g > ROW_GRADIENT_MAX {
                ROW_GRADIENT_MAX / g
            } else {
                1.0
            }
        })
        .collect();
    let lo: Vec<f64> = s.free.iter().map(|&v| nlp.lower[v]).collect();
    let hi: Vec<f64> = s.free.iter().map(|&v| nlp.upper[v]).collect();
    let has_lo = lo.iter().map(|l| l.is_finite()).collect();
    let has_hi = hi.iter().map(|u| u.is_finite()).collect();
    let x_start: Vec<f64> = s.free.iter().map(|&v| template[v]).collect();
    let mut solver = Solver {
        nlp,
        opts,
        s,
        lo,
        hi,
        has_lo,
        has_hi,
        log: Vec::new(),
        iter: 0,
        last_reg: 0.0,
        row_scale,
        theta_hist: Vec::new(),
    };
    let (it, status, _) = solver.run(x_start, &template)?;

    let x = solver.full_x(&it.x, &template);
    let d = nlp.derivatives(&x, &vec![0.0; nlp.n_eq], 1.0)?;
    let mut lambda = solver.full_lambda(&it.lambda);
    let mut z_lower = vec![0.0; n];
    let mut z_upper = vec![0.0; n];
    for (k, &v) in solver.s.free.iter().enumerate() {
        z_lower[v] = it.zl[k];
        z_upper[v] = it.zu[k];
    }
    // Stationarity over all variables; pinned ones determine their own
    // multipliers.
    let mut grad = d.gradient.clone();
    let mut is_pin_row = vec![false; nlp.n_eq];
    for p in &nlp.pins {
        is_pin_row[p.row] = true;
    }
    for &(r, v, val) in &d.jacobian {
        if !is_pin_row[r] {
            grad[v] += val * lambda[r];
        }
    }
    for p in &nlp.pins {
        lambda[p.row] = -grad[p.var];
        grad[p.var] = 0.0;
    }
    let stationarity = (0..n).fold(0.0f64, |m, v| m.max((grad[v] - z_lower[v] + z_upper[v]).abs()));
    let primal = inf_norm(&d.constraints);
    let mut comp: f64 = 0.0;
    for v in 0..n {
        if nlp.lower[v].is_finite() {
            comp = comp.max(z_lower[v] * (x[v] - nlp.lower[v]));
        }
        if nlp.upper[v].is_finite() {
            comp = comp.max(z_upper[v] * (nlp.upper[v] - x[v]));
        }
    }
    Ok(SolverResult {
        variables: x,
        lambda,
        z_lower,
        z_upper,
        objective: d.objective,
        kkt_residual: stationarity.max(primal).max(comp),
        primal_infeasibility: primal,
        status,
        iterations: solver.iter,
        wall_time: started.elapsed().as_secs_f64(),
        log: solver.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Real;
    use crate::nlp::{BlockFn, BlockOut};

    struct Quadratic;
    impl BlockFn for Quadratic {
        fn eval<T: Real>(&self, x: &[T]) -> Result<BlockOut<T>, EvalError> {
            let e = x[0].clone() - 3.0;
            Ok(BlockOut {
                objective: e.clone() * e,
                constraints: vec![],
            })
        }
    }

    struct Circle;
    impl BlockFn for Circle {
        fn eval<T: Real>(&self, x: &[T]) -> Result<BlockOut<T>, EvalError> {
            Ok(BlockOut {
                objective: x[0].clone() + x[1].clone(),
                constraints: vec![x[0].clone() * x[0].clone() + x[1].clone() * x[1].clone() - 2.0],
            })
        }
    }

    #[test]
    fn bounded_quadratic() {
        let mut nlp = NlpProblem::new(1, 0);
        nlp.lower[0] = 0.0;
        nlp.upper[0] = 10.0;
        nlp.add_block("q", vec![0], vec![], Quadratic);
        let r = solve(&nlp, &SolverOptions::default(), None).unwrap();
        assert_eq!(r.status, SolverStatus::Converged);
        assert!((r.variables[0] - 3.0).abs() < 1e-7);
        assert!(r.objective < 1e-12);
    }

    #[test]
    fn circle_constraint() {
        let mut nlp = NlpProblem::new(2, 1);
        nlp.x0 = vec![0.5, -0.2];
        nlp.add_block("c", vec![0, 1], vec![0], Circle);
        let r = solve(&nlp, &SolverOptions::default(), None).unwrap();
        assert_eq!(r.status, SolverStatus::Converged);
        assert!((r.variables[0] + 1.0).abs() < 1e-8 && (r.variables[1] + 1.0).abs() < 1e-8);
        assert!((r.objective + 2.0).abs() < 1e-8);
        assert!((r.lambda[0] - 0.5).abs() < 1e-7);
        assert!(r.kkt_residual <= 1e-8);
    }

    #[test]
    fn active_bound_and_pin() {
        // min x0 + x1 s.t. x0² + x1² = 2, x1 ≥ -0.5, with x2 pinned.
        let mut nlp = NlpProblem::new(3, 2);
        nlp.lower[1] = -0.5;
        nlp.x0 = vec![-0.3, 0.3, 0.0];
        nlp.add_block("c", vec![0, 1], vec![0], Circle);
        nlp.add_pin(2, 4.0, 1);
        let r = solve(&nlp, &SolverOptions::default(), None).unwrap();
        assert_eq!(r.status, SolverStatus::Converged);
        assert!((r.variables[1] + 0.5).abs() < 1e-7);
        assert!((r.variables[0] + 1.75f64.sqrt()).abs() < 1e-7);
        assert_eq!(r.variables[2], 4.0);
        assert!(r.z_lower[1] > 0.1);
    }

    struct Incompatible;
    impl BlockFn for Incompatible {
        fn eval<T: Real>(&self, x: &[T]) -> Result<BlockOut<T>, EvalError> {
            // x² + 1 = 0 has no real solution; the violation is minimized
            // at x = 0.
            Ok(BlockOut {
                objective: x[0].clone(),
                constraints: vec![x[0].clone() * x[0].clone() + 1.0],
            })
        }
    }

    #[test]
    fn reports_local_infeasibility() {
        let mut nlp = NlpProblem::new(1, 1);
        nlp.x0 = vec![2.0];
        nlp.add_block("bad", vec![0], vec![0], Incompatible);
        let r = solve(&nlp, &SolverOptions::default(), None).unwrap();
        assert_eq!(r.status, SolverStatus::LocallyInfeasible);
        assert!(r.variables[0].abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_options() {
        let nlp = NlpProblem::new(1, 0);
        let opts = SolverOptions {
            tau_min: 1.5,
            ..Default::default()
        };
        assert!(solve(&nlp, &opts, None).is_err());
    }
}
