//! Direct multiple-shooting transcriptions of the full, reduced and lifted
//! optimal control problems.
//!
//! All variants share the same layout conventions:
//!
//! * node `k = 0..N-1` carries the state variables of that node followed by
//!   the controls of interval `k`; the state at node `N` is not a variable,
//! * interval `k < N-1` contributes continuity rows `x_{k+1}^{sim} - x_{k+1}`,
//!   the last interval contributes the terminal pins on its simulated end,
//! * initial values are linear pins on node-0 variables.
//!
//! Variant differences:
//!
//! | variant | node variables | interval dynamics |
//! |---------|----------------|-------------------|
//! | full    | all states     | stiff full model (Radau IIA by default) |
//! | reduced | slow states    | RK4 on `f_s(z_s, h(z_s,u), u)`, one manifold solve per stage |
//! | lifted  | all states     | RK4 on `f_s` with `z_f` held at its node value, plus `ψ = 0` rows at every node |

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{self, Real};
use crate::model::{FullDynamics, OcpModel};
use crate::nlp::{BlockFn, BlockOut, EvalError};
use crate::odeint::{self, Integrator, NewtonOptions, OdeError, OdeSystem};
use crate::sim::{self, SimError, SimMethod};

pub use crate::nlp::NlpProblem;

#[derive(Debug, Error)]
pub enum TranscribeError {
    #[error("invalid transcription: {0}")]
    Config(String),
    #[error("expected {expected} variables, got {got}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Reduced,
    Lifted,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Reduced => "reduced",
            Variant::Lifted => "lifted",
        })
    }
}

/// How the Lagrange term of the objective is discretized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveRule {
    /// Integrate `L` alongside the dynamics as a quadrature state.
    Quadrature,
    /// `Σ_k Δt · L(x_k, u_k)`: left-endpoint rule on the node values, the
    /// same for every variant.
    #[default]
    NodeRectangle,
}

/// Uniform grid of `intervals` shooting intervals on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShootingGrid {
    pub intervals: usize,
    pub horizon: f64,
}

impl ShootingGrid {
    pub fn new(intervals: usize, horizon: f64) -> Result<Self, TranscribeError> {
        if intervals == 0 || horizon.is_nan() || horizon <= 0.0 {
            return Err(TranscribeError::Config(format!(
                "grid needs N >= 1 and a positive horizon (got N={intervals}, T={horizon})"
            )));
        }
        Ok(Self { intervals, horizon })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    /// The `N + 1` node times.
    pub fn node_times(&self) -> Vec<f64> {
        (0..=self.intervals).map(|k| k as f64 * self.dt()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcription {
    pub variant: Variant,
    pub integrator: Integrator,
    pub steps_per_interval: usize,
    pub sim: Option<SimMethod>,
    /// Lifted variant only: fast states whose initial value is pinned.
    #[serde(default)]
    pub pin_fast_initial: Vec<usize>,
    /// Newton settings of the implicit integrator.
    #[serde(default)]
    pub newton: NewtonOptions,
    #[serde(default)]
    pub objective: ObjectiveRule,
}

impl Transcription {
    pub fn full() -> Self {
        Self {
            variant: Variant::Full,
            integrator: Integrator::Radau,
            steps_per_interval: 1,
            sim: None,
            pin_fast_initial: Vec::new(),
            newton: NewtonOptions::default(),
            objective: ObjectiveRule::default(),
        }
    }

    pub fn reduced(sim: SimMethod) -> Self {
        Self {
            variant: Variant::Reduced,
            integrator: Integrator::Rk4,
            sim: Some(sim),
            ..Self::full()
        }
    }

    pub fn lifted(sim: SimMethod) -> Self {
        Self {
            variant: Variant::Lifted,
            ..Self::reduced(sim)
        }
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps_per_interval = steps;
        self
    }

    pub fn with_objective(mut self, rule: ObjectiveRule) -> Self {
        self.objective = rule;
        self
    }

    pub fn with_fast_pins(mut self, states: Vec<usize>) -> Self {
        self.pin_fast_initial = states;
        self
    }

    pub fn validate(&self, model: &OcpModel) -> Result<(), TranscribeError> {
        if self.steps_per_interval == 0 {
            return Err(TranscribeError::Config("steps per interval must be positive".into()));
        }
        match (self.variant, &self.sim) {
            (Variant::Full, Some(_)) => {
                return Err(TranscribeError::Config(
                    "the full variant takes no manifold method".into(),
                ))
            }
            (Variant::Reduced | Variant::Lifted, None) => {
                return Err(TranscribeError::Config(format!(
                    "the {} variant needs a manifold method",
                    self.variant
                )))
            }
            (_, Some(s)) => s.validate(model)?,
            _ => {}
        }
        if self.variant == Variant::Reduced && self.integrator != Integrator::Rk4 {
            return Err(TranscribeError::Config(
                "the reduced variant integrates with RK4".into(),
            ));
        }
        if self.variant == Variant::Reduced && model.rpv.fast.iter().any(|&i| model.terminal[i].is_some()) {
            return Err(TranscribeError::Config(
                "terminal pins on fast states are not supported by the reduced variant".into(),
            ));
        }
        if !self.pin_fast_initial.is_empty() && self.variant != Variant::Lifted {
            return Err(TranscribeError::Config(
                "fast initial pins apply to the lifted variant only".into(),
            ));
        }
        for &i in &self.pin_fast_initial {
            if !model.rpv.fast.contains(&i) || model.initial.get(i).copied().flatten().is_none() {
                return Err(TranscribeError::Config(format!(
                    "state {i} is not a fast state with an initial value"
                )));
            }
        }
        Ok(())
    }
}

/// Where each node quantity lives in the variable vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub variant: Variant,
    /// `state_vars[k][i]`: variable of state `i` at node `k`, if any.
    pub state_vars: Vec<Vec<Option<usize>>>,
    /// `control_vars[k][j]`: variable of control `j` on interval `k`.
    pub control_vars: Vec<Vec<usize>>,
}

/// Node states (N+1 rows) and interval controls (N rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub state_names: Vec<String>,
    pub control_names: Vec<String>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn state_series(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|x| x[i]).collect()
    }
    pub fn control_series(&self, j: usize) -> Vec<f64> {
        self.controls.iter().map(|u| u[j]).collect()
    }
}

/// Dimensions and sparsity of a transcription.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionSummary {
    pub model: String,
    pub variant: Variant,
    #[serde(rename = "N")]
    pub intervals: usize,
    pub n_vars: usize,
    pub n_constraints: usize,
    pub jacobian_nnz: usize,
    pub hessian_nnz: usize,
    pub integrator: Integrator,
    pub steps_per_interval: usize,
    pub sim: Option<String>,
}

/// A transcribed OCP: the NLP plus what is needed to interpret its
/// variables.
#[derive(Debug)]
pub struct TranscribedOcp {
    pub model: Arc<OcpModel>,
    pub grid: ShootingGrid,
    pub config: Transcription,
    pub nlp: NlpProblem,
    pub layout: Layout,
    inner_solves: Arc<AtomicUsize>,
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

struct FullInterval {
    rule: ObjectiveRule,
    model: Arc<OcpModel>,
    k: usize,
    h: f64,
    steps: usize,
    integrator: Integrator,
    newton: NewtonOptions,
    next: bool,
    terminal: Vec<(usize, f64)>,
}

impl BlockFn for FullInterval {
    fn eval<T: Real>(&self, x: &[T]) -> Result<BlockOut<T>, EvalError> {
        let n = self.model.n_x();
        let nu = self.model.n_u();
        let r = odeint::integrate(
            &FullDynamics(&self.model),
            &x[..n],
            &x[n..n + nu],
            self.h,
            self.steps,
            self.integrator,
            self.newton,
        )
        .map_err(|e| EvalError::new(format!("interval {}", self.k), e))?;
        let constraints = if self.next {
            r.state_next
                .iter()
                .zip(&x[n + nu..])
                .map(|(a, b)| a.clone() - b.clone())
                .collect()
        } else {
            self.terminal
                .iter()
                .map(|&(i, v)| r.state_next[i].clone() - v)
                .collect()
        };
        let objective = match self.rule {
            ObjectiveRule::Quadrature => r.quadrature_increment,
            ObjectiveRule::NodeRectangle => self.model.integrand(&x[..n], &x[n..n + nu]) * self.h,
        };
        Ok(BlockOut { objective, constraints })
    }
}

/// `ż_s = f_s(z_s, z_f, u)` with parameters `p = [z_f; u]`.
struct SlowDynamics<'a>(&'a OcpModel);

impl OdeSystem for SlowDynamics<'_> {
    fn dim(&self) -> usize {
        self.0.n_s()
    }
    fn rhs<T: Real>(&self, x: &[T], p: &[T]) -> Result<Vec<T>, OdeError> {
        let (zf, u) = p.split_at(self.0.n_f());
        Ok(self.0.f_s(x, zf, u))
    }
    fn integrand<T: Real>(&self, x: &[T], p: &[T]) -> Result<T, OdeError> {
        let (zf, u) = p.split_at(self.0.n_f());
        Ok(self.0.integrand(&self.0.assemble(x, zf), u))
    }
}

/// Terminal pin addressed in a node's local `(z_s, z_f)` layout.
#[derive(Clone, Copy)]
enum LocalPin {
    Slow(usize, f64),
    Fast(usize, f64),
}

struct LiftedInterval {
    rule: ObjectiveRule,
    model: Arc<OcpModel>,
    k: usize,
    h: f64,
    steps: usize,
    integrator: Integrator,
    newton: NewtonOptions,
    next: bool,
    terminal: Vec<LocalPin>,
}

impl BlockFn for LiftedInterval {
    fn eval<T: Real>(&self, x: &[T]) -> Result<BlockOut<T>, EvalError> {
        let (ns, nf, nu) = (self.model.n_s(), self.model.n_f(), self.model.n_u());
        let zs = &x[..ns];
        let p = &x[ns..ns + nf + nu];
        let r = odeint::integrate(
            &SlowDynamics(&self.model),
            zs,
            p,
            self.h,
            self.steps,
            self.integrator,
            self.newton,
        )
        .map_err(|e| EvalError::new(format!("interval {}", self.k), e))?;
        let constraints = if self.next {
            let nxt = &x[ns + nf + nu..];
            r.state_next
                .iter()
                .zip(nxt)
                .map(|(a, b)| a.clone() - b.clone())
                .collect()
        } else {
            self.terminal
                .iter()
                .map(|pin| match *pin {
                    LocalPin::Slow(i, v) => r.state_next[i].clone() - v,
                    LocalPin::Fast(i, v) => p[i].clone() - v,
                })
                .collect()
        };
        let objective = match self.rule {
            ObjectiveRule::Quadrature => r.quadrature_increment,
            ObjectiveRule::NodeRectangle => {
                let (zf, u) = p.split_at(nf);
                self.model.integrand(&self.model.assemble(zs, zf), u) * self.h
            }
        };
        Ok(BlockOut { objective, constraints })
    }
}

struct Manifold {
    model: Arc<OcpModel>,
    sim: SimMethod,
    k: usize,
}

impl BlockFn for Manifold {
    fn eval<T: Real>(&self, x: &[T]) -> Result<BlockOut<T>, EvalError> {
        let (ns, nf) = (self.model.n_s(), self.model.n_f());
        let psi = sim::psi(&self.model, &self.sim, &x[..ns], &x[ns..ns + nf], &x[ns + nf..])
            .map_err(|e| EvalError::new(format!("node {}", self.k), e))?;
        Ok(BlockOut {
            objective: T::zero(),
            constraints: psi,
        })
    }
}

struct ReducedInterval {
    rule: ObjectiveRule,
    model: Arc<OcpModel>,
    sim: SimMethod,
    k: usize,
    h: f64,
    steps: usize,
    next: bool,
    terminal: Vec<(usize, f64)>,
    warm: Mutex<Vec<f64>>,
    counter: Arc<AtomicUsize>,
}

impl ReducedInterval {
    /// RK4 over the interval on the reduced dynamics; returns the end slow
    /// state, the quadrature and the integrand at the start node.
    fn simulate<T: Real>(&self, zs: &[T], u: &[T]) -> Result<(Vec<T>, T, T), EvalError> {
        let model = &*self.model;
        let h = self.h / self.steps as f64;
        let mut guess = self.warm.lock().expect("warm start lock").clone();
        let mut first: Option<Vec<f64>> = None;
        let mut x = zs.to_vec();
        let mut q = T::zero();
        let mut l0: Option<T> = None;
        for step in 0..self.steps {
            let r = odeint::rk4_step_with(&x, h, |stage, xi| {
                let pt = sim::manifold_point(model, &self.sim, xi, u, &guess)
                    .map_err(|e| OdeError::Rhs(format!("step {step}, stage {}: {e}", stage + 1)))?;
                self.counter.fetch_add(1, Ordering::Relaxed);
                guess = ad::values(&pt.z_f);
                first.get_or_insert_with(|| guess.clone());
                let f = model.f_s(xi, &pt.z_f, u);
                let l = model.integrand(&model.assemble(xi, &pt.z_f), u);
                l0.get_or_insert_with(|| l.clone());
                Ok((f, l))
            })
            .map_err(|e| EvalError::new(format!("interval {}", self.k), e))?;
            x = r.state_next;
            q = q + r.quadrature_increment;
        }
        if let Some(g) = first {
            *self.warm.lock().expect("warm start lock") = g;
        }
        Ok((x, q, l0.expect("at least one RK4 stage")))
    }
}

impl BlockFn for ReducedInterval {
    fn eval<T: Real>(&self, x: &[T]) -> Result<BlockOut<T>, EvalError> {
        let (ns, nu) = (self.model.n_s(), self.model.n_u());
        let (end, q, l0) = self.simulate(&x[..ns], &x[ns..ns + nu])?;
        let constraints = if self.next {
            end.iter()
                .zip(&x[ns + nu..])
                .map(|(a, b)| a.clone() - b.clone())
                .collect()
        } else {
            self.terminal.iter().map(|&(i, v)| end[i].clone() - v).collect()
        };
        let objective = match self.rule {
            ObjectiveRule::Quadrature => q,
            ObjectiveRule::NodeRectangle => l0 * self.h,
        };
        Ok(BlockOut { objective, constraints })
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// Order slots within a stage for the KKT elimination. Stage `k` holds the
/// continuity rows that define node `k`, then the controls of interval
/// `k - 1` (eliminated after the rows they enter), then the node-`k`
/// states, manifold rows and lifted fast states.
mod slot {
    pub const CONTINUITY: usize = 0;
    pub const CONTROL: usize = 1;
    pub const SLOW: usize = 2;
    pub const MANIFOLD: usize = 3;
    pub const FAST: usize = 4;
    pub const TERMINAL: usize = 5;
}

struct Builder {
    nlp: NlpProblem,
    layout: Layout,
    rows: usize,
}

impl Builder {
    /// Allocates the node variables: per node, the listed states (in state
    /// order) followed by the controls.
    fn new(model: &OcpModel, grid: &ShootingGrid, variant: Variant, node_states: &[usize], guess: &[f64]) -> Self {
        let n_nodes = grid.intervals;
        let per_node = node_states.len() + model.n_u();
        let nv = n_nodes * per_node;
        let mut nlp = NlpProblem::new(nv, 0);
        let mut state_vars = vec![vec![None; model.n_x()]; n_nodes];
        let mut control_vars = vec![vec![0; model.n_u()]; n_nodes];
        let mut v = 0;
        let mid = model.control_midpoint();
        for k in 0..n_nodes {
            for &i in node_states {
                state_vars[k][i] = Some(v);
                let fast = model.rpv.fast.contains(&i);
                let b = model.state_bounds[i];
                nlp.lower[v] = b.lo;
                nlp.upper[v] = b.hi;
                nlp.x0[v] = guess[i];
                nlp.var_names[v] = format!("{}[{k}]", model.state_names[i]);
                nlp.var_order[v] = (
                    k,
                    if fast && variant == Variant::Lifted {
                        slot::FAST
                    } else {
                        slot::SLOW
                    },
                );
                v += 1;
            }
            for j in 0..model.n_u() {
                control_vars[k][j] = v;
                let b = model.u_bounds[j];
                nlp.lower[v] = b.lo;
                nlp.upper[v] = b.hi;
                nlp.x0[v] = mid[j];
                nlp.var_names[v] = format!("{}[{k}]", model.control_names[j]);
                nlp.var_order[v] = (k + 1, slot::CONTROL);
                v += 1;
            }
        }
        Self {
            nlp,
            layout: Layout {
                variant,
                state_vars,
                control_vars,
            },
            rows: 0,
        }
    }

    fn rows(&mut self, count: usize, key: (usize, usize)) -> Vec<usize> {
        let r: Vec<usize> = (self.rows..self.rows + count).collect();
        self.rows += count;
        self.nlp.con_order.extend(std::iter::repeat_n(key, count));
        r
    }

    /// One row per variable of `partners`, each eliminated together with
    /// its partner in the KKT factorization.
    fn pair_rows(&mut self, partners: Vec<usize>, key: (usize, usize)) -> Vec<usize> {
        let r = self.rows(partners.len(), key);
        self.nlp.pivot_pairs.extend(r.iter().copied().zip(partners));
        r
    }

    fn pin(&mut self, var: usize, value: f64) {
        let row = self.rows(1, (0, slot::CONTINUITY))[0];
        self.nlp.add_pin(var, value, row);
    }

    fn vars(&self, k: usize, states: &[usize]) -> Vec<usize> {
        states
            .iter()
            .map(|&i| self.layout.state_vars[k][i].expect("state variable exists"))
            .collect()
    }

    fn finish(mut self) -> (NlpProblem, Layout) {
        self.nlp.n_eq = self.rows;
        (self.nlp, self.layout)
    }
}

/// Initial guess: initial values, fast states on the ZDP manifold of the
/// initial slow state at mid-range controls.
fn initial_guess(model: &OcpModel) -> Result<Vec<f64>, TranscribeError> {
    let zs = model.initial_slow();
    let u = model.control_midpoint();
    let start: Vec<f64> = model
        .rpv
        .fast
        .iter()
        .map(|&i| model.initial[i].unwrap_or(0.5))
        .collect();
    let zf = sim::manifold_point::<f64>(model, &SimMethod::zdp(2), &zs, &u, &start)?.z_f;
    Ok(model.assemble(&zs, &zf))
}

fn check_model(model: &OcpModel) -> Result<(), TranscribeError> {
    model.validate().map_err(|e| TranscribeError::Config(e.to_string()))
}

impl TranscribedOcp {
    /// Builds the NLP for the configured variant.
    pub fn build(model: &OcpModel, grid: ShootingGrid, config: Transcription) -> Result<Self, TranscribeError> {
        match config.variant {
            Variant::Full => build_full_nlp(model, grid, config),
            Variant::Reduced => build_reduced_nlp(model, grid, config),
            Variant::Lifted => build_lifted_nlp(model, grid, config),
        }
    }

    fn assemble(
        model: &OcpModel,
        grid: ShootingGrid,
        config: Transcription,
        b: Builder,
        counter: Arc<AtomicUsize>,
    ) -> Result<Self, TranscribeError> {
        let (nlp, layout) = b.finish();
        nlp.validate().map_err(TranscribeError::Config)?;
        Ok(Self {
            model: Arc::new(model.clone()),
            grid,
            config,
            nlp,
            layout,
            inner_solves: counter,
        })
    }

    /// Number of inner manifold solves performed so far (reduced variant).
    pub fn inner_solve_count(&self) -> usize {
        self.inner_solves.load(Ordering::Relaxed)
    }

    pub fn reset_inner_solve_count(&self) {
        self.inner_solves.store(0, Ordering::Relaxed);
    }

    pub fn summary(&self) -> TranscriptionSummary {
        let (jac, hess) = self.nlp.sparsity_counts();
        TranscriptionSummary {
            model: self.model.name.clone(),
            variant: self.config.variant,
            intervals: self.grid.intervals,
            n_vars: self.nlp.n_vars,
            n_constraints: self.nlp.n_eq,
            jacobian_nnz: jac,
            hessian_nnz: hess,
            integrator: self.config.integrator,
            steps_per_interval: self.config.steps_per_interval,
            sim: self.config.sim.as_ref().map(SimMethod::label),
        }
    }

    fn sim_method(&self) -> &SimMethod {
        self.config.sim.as_ref().expect("variant has a manifold method")
    }

    /// Flat variable vector from node states and interval controls; the
    /// inverse of [`extract_solution`](Self::extract_solution) on nodes
    /// `0..N-1`.
    pub fn pack(&self, traj: &Trajectory) -> Result<Vec<f64>, TranscribeError> {
        let n = self.grid.intervals;
        if traj.states.len() < n || traj.controls.len() != n {
            return Err(TranscribeError::Length {
                expected: n,
                got: traj.controls.len(),
            });
        }
        let mut v = vec![0.0; self.nlp.n_vars];
        for k in 0..n {
            for (i, var) in self.layout.state_vars[k].iter().enumerate() {
                if let Some(var) = var {
                    v[*var] = traj.states[k][i];
                }
            }
            for (j, &var) in self.layout.control_vars[k].iter().enumerate() {
                v[var] = traj.controls[k][j];
            }
        }
        Ok(v)
    }

    /// Node states (including the simulated node `N`) and controls.
    pub fn extract_solution(&self, vars: &[f64]) -> Result<Trajectory, TranscribeError> {
        if vars.len() != self.nlp.n_vars {
            return Err(TranscribeError::Length {
                expected: self.nlp.n_vars,
                got: vars.len(),
            });
        }
        let m = &*self.model;
        let n = self.grid.intervals;
        let controls: Vec<Vec<f64>> = self
            .layout
            .control_vars
            .iter()
            .map(|c| c.iter().map(|&v| vars[v]).collect())
            .collect();
        let mut states = Vec::with_capacity(n + 1);
        let mut guess = initial_guess(m).map(|x| m.fast_part(&x))?;
        for (k, u) in controls.iter().enumerate() {
            let mut x: Vec<f64> = self.layout.state_vars[k]
                .iter()
                .map(|v| v.map_or(0.0, |v| vars[v]))
                .collect();
            if self.config.variant == Variant::Reduced {
                let zs = m.slow_part(&x);
                let pt = sim::manifold_point::<f64>(m, self.sim_method(), &zs, u, &guess)?;
                guess = pt.z_f.clone();
                x = m.assemble(&zs, &pt.z_f);
            }
            states.push(x);
        }
        let last = &states[n - 1];
        let u = &controls[n - 1];
        let h = self.grid.dt();
        let newton = self.config.newton;
        let end = match self.config.variant {
            Variant::Full => {
                odeint::integrate(
                    &FullDynamics(m),
                    last,
                    u,
                    h,
                    self.config.steps_per_interval,
                    self.config.integrator,
                    newton,
                )
                .map_err(|e| EvalError::new(format!("interval {}", n - 1), e))?
                .state_next
            }
            Variant::Lifted | Variant::Reduced => {
                let zs = m.slow_part(last);
                let zf = m.fast_part(last);
                let end_s = if self.config.variant == Variant::Lifted {
                    let p: Vec<f64> = zf.iter().chain(u).copied().collect();
                    odeint::integrate(
                        &SlowDynamics(m),
                        &zs,
                        &p,
                        h,
                        self.config.steps_per_interval,
                        self.config.integrator,
                        newton,
                    )
                    .map_err(|e| EvalError::new(format!("interval {}", n - 1), e))?
                    .state_next
                } else {
                    let kernel = self.reduced_kernel(n - 1, false, zf.clone());
                    kernel.simulate(&zs, u)?.0
                };
                let pt = sim::manifold_point::<f64>(m, self.sim_method(), &end_s, u, &zf)?;
                m.assemble(&end_s, &pt.z_f)
            }
        };
        states.push(end);
        Ok(Trajectory {
            state_names: m.state_names.clone(),
            control_names: m.control_names.clone(),
            times: self.grid.node_times(),
            states,
            controls,
        })
    }

    fn reduced_kernel(&self, k: usize, next: bool, warm: Vec<f64>) -> ReducedInterval {
        let m = &self.model;
        ReducedInterval {
            rule: self.config.objective,
            model: m.clone(),
            sim: self.sim_method().clone(),
            k,
            h: self.grid.dt(),
            steps: self.config.steps_per_interval,
            next,
            terminal: slow_terminal(m),
            warm: Mutex::new(warm),
            counter: self.inner_solves.clone(),
        }
    }

    /// Objective value at `vars`.
    pub fn objective(&self, vars: &[f64]) -> Result<f64, TranscribeError> {
        Ok(self.nlp.eval(vars)?.0)
    }
}

fn slow_terminal(m: &OcpModel) -> Vec<(usize, f64)> {
    m.rpv
        .slow
        .iter()
        .enumerate()
        .filter_map(|(k, &i)| m.terminal[i].map(|v| (k, v)))
        .collect()
}

/// Full OCP: all states at nodes, stiff integration of the complete model.
pub fn build_full_nlp(
    model: &OcpModel,
    grid: ShootingGrid,
    config: Transcription,
) -> Result<TranscribedOcp, TranscribeError> {
    check_model(model)?;
    config.validate(model)?;
    if config.variant != Variant::Full {
        return Err(TranscribeError::Config(
            "build_full_nlp needs a full transcription".into(),
        ));
    }
    let guess = initial_guess(model)?;
    let all: Vec<usize> = (0..model.n_x()).collect();
    let mut b = Builder::new(model, &grid, Variant::Full, &all, &guess);
    let arc = Arc::new(model.clone());
    let n = grid.intervals;
    let terminal: Vec<(usize, f64)> = model
        .terminal
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .collect();

    for (i, v) in model.initial.iter().enumerate() {
        if let Some(v) = v {
            let var = b.layout.state_vars[0][i].expect("node 0 state");
            b.pin(var, *v);
        }
    }
    for k in 0..n {
        let next = k + 1 < n;
        let mut vars = b.vars(k, &all);
        vars.extend(b.layout.control_vars[k].clone());
        let cons = if next {
            let right = b.vars(k + 1, &all);
            vars.extend(right.iter().copied());
            b.pair_rows(right, (k + 1, slot::CONTINUITY))
        } else {
            b.rows(terminal.len(), (k, slot::TERMINAL))
        };
        let kernel = FullInterval {
            rule: config.objective,
            model: arc.clone(),
            k,
            h: grid.dt(),
            steps: config.steps_per_interval,
            integrator: config.integrator,
            newton: config.newton,
            next,
            terminal: terminal.clone(),
        };
        b.nlp.add_block(format!("interval {k}"), vars, cons, kernel);
    }
    TranscribedOcp::assemble(model, grid, config, b, Arc::new(AtomicUsize::new(0)))
}

/// Reduced OCP: slow states only; each RK4 stage solves for the manifold
/// point, warm-started from the previous stage.
pub fn build_reduced_nlp(
    model: &OcpModel,
    grid: ShootingGrid,
    config: Transcription,
) -> Result<TranscribedOcp, TranscribeError> {
    check_model(model)?;
    config.validate(model)?;
    if config.variant != Variant::Reduced {
        return Err(TranscribeError::Config(
            "build_reduced_nlp needs a reduced transcription".into(),
        ));
    }
    let guess = initial_guess(model)?;
    let slow = model.rpv.slow.clone();
    let mut b = Builder::new(model, &grid, Variant::Reduced, &slow, &guess);
    let n = grid.intervals;
    let terminal = slow_terminal(model);
    for &i in &slow {
        let var = b.layout.state_vars[0][i].expect("node 0 state");
        b.pin(var, model.initial[i].expect("slow initial value"));
    }
    let counter = Arc::new(AtomicUsize::new(0));
    let arc = Arc::new(model.clone());
    let sim = config.sim.clone().expect("validated");
    let warm = model.fast_part(&guess);
    for k in 0..n {
        let next = k + 1 < n;
        let mut vars = b.vars(k, &slow);
        vars.extend(b.layout.control_vars[k].clone());
        let cons = if next {
            let right = b.vars(k + 1, &slow);
            vars.extend(right.iter().copied());
            b.pair_rows(right, (k + 1, slot::CONTINUITY))
        } else {
            b.rows(terminal.len(), (k, slot::TERMINAL))
        };
        let kernel = ReducedInterval {
            rule: config.objective,
            model: arc.clone(),
            sim: sim.clone(),
            k,
            h: grid.dt(),
            steps: config.steps_per_interval,
            next,
            terminal: terminal.clone(),
            warm: Mutex::new(warm.clone()),
            counter: counter.clone(),
        };
        b.nlp.add_block(format!("interval {k}"), vars, cons, kernel);
    }
    TranscribedOcp::assemble(model, grid, config, b, counter)
}

/// Lifted OCP: all states at nodes, slow continuity with the fast state
/// held at its node value, and `ψ = 0` at every node.
pub fn build_lifted_nlp(
    model: &OcpModel,
    grid: ShootingGrid,
    config: Transcription,
) -> Result<TranscribedOcp, TranscribeError> {
    check_model(model)?;
    config.validate(model)?;
    if config.variant != Variant::Lifted {
        return Err(TranscribeError::Config(
            "build_lifted_nlp needs a lifted transcription".into(),
        ));
    }
    let guess = initial_guess(model)?;
    let all: Vec<usize> = (0..model.n_x()).collect();
    let slow = model.rpv.slow.clone();
    let fast = model.rpv.fast.clone();
    let mut b = Builder::new(model, &grid, Variant::Lifted, &all, &guess);
    let n = grid.intervals;
    let arc = Arc::new(model.clone());
    let sim = config.sim.clone().expect("validated");

    let mut terminal: Vec<LocalPin> = slow_terminal(model)
        .into_iter()
        .map(|(k, v)| LocalPin::Slow(k, v))
        .collect();
    for (k, &i) in fast.iter().enumerate() {
        if let Some(v) = model.terminal[i] {
            terminal.push(LocalPin::Fast(k, v));
        }
    }

    for &i in slow.iter().chain(&config.pin_fast_initial) {
        let var = b.layout.state_vars[0][i].expect("node 0 state");
        b.pin(var, model.initial[i].expect("validated initial value"));
    }
    for k in 0..n {
        let next = k + 1 < n;
        let mut node = b.vars(k, &slow);
        node.extend(b.vars(k, &fast));
        node.extend(b.layout.control_vars[k].clone());

        let rows = b.pair_rows(b.vars(k, &fast), (k, slot::MANIFOLD));
        let psi = Manifold {
            model: arc.clone(),
            sim: sim.clone(),
            k,
        };
        b.nlp.add_block(format!("manifold {k}"), node.clone(), rows, psi);

        let mut vars = node;
        let cons = if next {
            let right = b.vars(k + 1, &slow);
            vars.extend(right.iter().copied());
            b.pair_rows(right, (k + 1, slot::CONTINUITY))
        } else {
            b.rows(terminal.len(), (k, slot::TERMINAL))
        };
        let kernel = LiftedInterval {
            rule: config.objective,
            model: arc.clone(),
            k,
            h: grid.dt(),
            steps: config.steps_per_interval,
            integrator: config.integrator,
            newton: config.newton,
            next,
            terminal: terminal.clone(),
        };
        b.nlp.add_block(format!("interval {k}"), vars, cons, kernel);
    }
    TranscribedOcp::assemble(model, grid, config, b, Arc::new(AtomicUsize::new(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cstr_model, enzyme_model};

    fn dims(model: &OcpModel, n: usize, config: Transcription) -> (usize, usize) {
        let grid = ShootingGrid::new(n, model.horizon).unwrap();
        let t = TranscribedOcp::build(model, grid, config).unwrap();
        (t.nlp.n_vars, t.nlp.n_eq)
    }

    #[test]
    fn enzyme_dimensions() {
        let m = enzyme_model();
        assert_eq!(dims(&m, 40, Transcription::full()), (120, 80));
        assert_eq!(dims(&m, 40, Transcription::reduced(SimMethod::zdp(2))), (80, 40));
        assert_eq!(dims(&m, 40, Transcription::lifted(SimMethod::zdp(2))), (120, 80));
    }

    #[test]
    fn cstr_dimensions() {
        let m = cstr_model();
        assert_eq!(dims(&m, 140, Transcription::full()), (980, 701));
        assert_eq!(dims(&m, 140, Transcription::lifted(SimMethod::zdp(2))), (980, 701));
        assert_eq!(
            dims(
                &m,
                140,
                Transcription::lifted(SimMethod::zdp(2)).with_fast_pins(vec![0])
            ),
            (980, 702)
        );
    }

    #[test]
    fn config_validation() {
        let m = enzyme_model();
        let mut full = Transcription::full();
        full.sim = Some(SimMethod::zdp(2));
        assert!(full.validate(&m).is_err());
        let mut lifted = Transcription::lifted(SimMethod::zdp(2));
        lifted.sim = None;
        assert!(lifted.validate(&m).is_err());
        assert!(Transcription::full().with_steps(0).validate(&m).is_err());
        assert!(Transcription::full().with_fast_pins(vec![1]).validate(&m).is_err());
        assert!(ShootingGrid::new(0, 1.0).is_err());
    }

    #[test]
    fn pack_extract_round_trip() {
        let m = enzyme_model();
        let grid = ShootingGrid::new(5, m.horizon).unwrap();
        for config in [Transcription::full(), Transcription::lifted(SimMethod::zdp(2))] {
            let t = TranscribedOcp::build(&m, grid, config).unwrap();
            let v: Vec<f64> = (0..t.nlp.n_vars).map(|i| 0.1 + 0.01 * i as f64).collect();
            let traj = t.extract_solution(&v).unwrap();
            assert_eq!(traj.states.len(), 6);
            assert_eq!(t.pack(&traj).unwrap(), v);
        }
    }

    #[test]
    fn reduced_counts_four_inner_solves_per_step() {
        let m = enzyme_model();
        let grid = ShootingGrid::new(4, m.horizon).unwrap();
        let t = build_reduced_nlp(&m, grid, Transcription::reduced(SimMethod::zdp(2)).with_steps(2)).unwrap();
        t.reset_inner_solve_count();
        t.nlp.eval(&t.nlp.x0).unwrap();
        assert_eq!(t.inner_solve_count(), 4 * 2 * 4);
    }

    #[test]
    fn node_rectangle_sums_left_node_integrand() {
        let m = enzyme_model();
        let grid = ShootingGrid::new(8, m.horizon).unwrap();
        let t = TranscribedOcp::build(&m, grid, Transcription::full()).unwrap();
        let v: Vec<f64> = (0..t.nlp.n_vars).map(|i| 0.3 + 0.02 * i as f64).collect();
        let traj = t.extract_solution(&v).unwrap();
        let expected: f64 = (0..8)
            .map(|k| m.integrand(&traj.states[k], &traj.controls[k]) * grid.dt())
            .sum();
        assert!((t.objective(&v).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn quadrature_objective_converges_with_steps() {
        let m = enzyme_model();
        let grid = ShootingGrid::new(4, m.horizon).unwrap();
        let value = |steps| {
            let config = Transcription::full()
                .with_objective(ObjectiveRule::Quadrature)
                .with_steps(steps);
            let t = TranscribedOcp::build(&m, grid, config).unwrap();
            t.objective(&t.nlp.x0).unwrap()
        };
        let reference = value(64);
        let err = |steps| (value(steps) - reference).abs();
        let (e4, e16) = (err(4), err(16));
        assert!(e4 < err(1));
        assert!(e16 < 1e-2 * e4, "errors {e4:e} -> {e16:e}");
    }
}
