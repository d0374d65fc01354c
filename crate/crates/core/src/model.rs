//! Multi-scale optimal control problems.
//!
//! A model stores its state in a single vector together with an
//! [`RpvSelection`] that marks which components are slow (the reaction
//! progress variables) and which are fast. Models in singularly perturbed
//! form evolve their fast block by `ε ż_f = f_f`; general-form models (such
//! as the CSTR) store the physical right-hand side directly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::Real;
use crate::odeint::{OdeError, OdeSystem};
use crate::sim::{self, SimError, SimMethod, SimPoint};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("expression error in `{expr}` at byte {pos}: {msg}")]
    Parse { expr: String, pos: usize, msg: String },
    #[error("unknown model `{0}` (builtin models: enzyme, cstr)")]
    Unknown(String),
    #[error("cannot read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Closed interval; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub const FREE: Bound = Bound {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
    pub const NONNEG: Bound = Bound {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn midpoint(&self) -> f64 {
        match (self.lo.is_finite(), self.hi.is_finite()) {
            (true, true) => 0.5 * (self.lo + self.hi),
            (true, false) => self.lo,
            (false, true) => self.hi,
            (false, false) => 0.0,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Partition of the state indices into slow and fast sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpvSelection {
    pub slow: Vec<usize>,
    pub fast: Vec<usize>,
}

impl RpvSelection {
    pub fn new(slow: Vec<usize>, fast: Vec<usize>, n: usize) -> Result<Self, ModelError> {
        let mut seen = vec![false; n];
        for &i in slow.iter().chain(&fast) {
            if i >= n || seen[i] {
                return Err(ModelError::Invalid(format!(
                    "slow/fast selection must cover the {n} states exactly once"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(ModelError::Invalid(format!(
                "slow/fast selection must cover the {n} states exactly once"
            )));
        }
        Ok(Self { slow, fast })
    }

    pub fn dim(&self) -> usize {
        self.slow.len() + self.fast.len()
    }
}

/// Rate constants and operating data of the CSTR benchmark
/// `A ⇌ B → C → D` with volume balance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CstrParams {
    pub k1: f64,
    pub k1_rev: f64,
    pub k2: f64,
    pub c_a_in: f64,
    pub q_max: f64,
    pub q_a_max: f64,
    /// Initial concentrations `(c_A, c_B, c_C, c_D)`.
    pub c_star: [f64; 4],
    pub v_star: f64,
    /// Weight of the product-outflow reward `-w·q·c_B` in the integrand.
    pub product_weight: f64,
}

impl Default for CstrParams {
    fn default() -> Self {
        Self {
            k1: 100.0,
            k1_rev: 90.0,
            k2: 20.0,
            c_a_in: 1.0,
            q_max: 1.5e-3,
            q_a_max: 1e-3,
            c_star: [1e-3, 1e-3, 0.0, 1e-8],
            v_star: 1e-2,
            product_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
enum Dynamics {
    Enzyme,
    Cstr(CstrParams),
    Expr(Box<ExprSystem>),
}

/// A multi-scale optimal control problem.
#[derive(Debug, Clone)]
pub struct OcpModel {
    pub name: String,
    pub state_names: Vec<String>,
    pub control_names: Vec<String>,
    pub rpv: RpvSelection,
    pub epsilon: f64,
    /// When set, fast components obey `ε ż_f = f_f`.
    pub sp_form: bool,
    pub horizon: f64,
    pub u_bounds: Vec<Bound>,
    pub state_bounds: Vec<Bound>,
    pub initial: Vec<Option<f64>>,
    pub terminal: Vec<Option<f64>>,
    dynamics: Dynamics,
}

impl OcpModel {
    pub fn n_x(&self) -> usize {
        self.state_names.len()
    }
    pub fn n_s(&self) -> usize {
        self.rpv.slow.len()
    }
    pub fn n_f(&self) -> usize {
        self.rpv.fast.len()
    }
    pub fn n_u(&self) -> usize {
        self.control_names.len()
    }

    /// Copy with a different time-scale parameter.
    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self, ModelError> {
        self.epsilon = epsilon;
        self.validate()?;
        Ok(self)
    }

    /// Mutable access to the CSTR constants, if this is the CSTR model.
    pub fn cstr_params_mut(&mut self) -> Option<&mut CstrParams> {
        match &mut self.dynamics {
            Dynamics::Cstr(p) => Some(p),
            _ => None,
        }
    }

    pub fn cstr_params(&self) -> Option<&CstrParams> {
        match &self.dynamics {
            Dynamics::Cstr(p) => Some(p),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.n_x();
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ModelError::Invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ModelError::Invalid(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.rpv.dim() != n {
            return Err(ModelError::Invalid(
                "slow/fast selection does not match the state dimension".into(),
            ));
        }
        if self.u_bounds.len() != self.n_u() || self.state_bounds.len() != n {
            return Err(ModelError::Invalid("bound count does not match dimensions".into()));
        }
        if self.initial.len() != n || self.terminal.len() != n {
            return Err(ModelError::Invalid(
                "boundary data does not match the state dimension".into(),
            ));
        }
        for b in self.u_bounds.iter().chain(&self.state_bounds) {
            if b.lo.is_nan() || b.hi.is_nan() || b.lo > b.hi {
                return Err(ModelError::Invalid(format!(
                    "empty bound interval [{}, {}]",
                    b.lo, b.hi
                )));
            }
        }
        for &i in &self.rpv.slow {
            if self.initial[i].is_none() {
                return Err(ModelError::Invalid(format!(
                    "slow state `{}` needs an initial value",
                    self.state_names[i]
                )));
            }
        }
        Ok(())
    }

    /// Right-hand side with the fast block left unscaled: `[f_s; f_f]` in
    /// state order. For general-form models this is the physical field.
    pub fn raw_field<T: Real>(&self, x: &[T], u: &[T]) -> Vec<T> {
        match &self.dynamics {
            Dynamics::Enzyme => {
                let (zs, zf, u) = (x[0].clone(), x[1].clone(), u[0].clone());
                vec![
                    -zs.clone() + (zs.clone() + 0.5) * zf.clone() + u,
                    zs.clone() - (zs + 1.0) * zf,
                ]
            }
            Dynamics::Cstr(p) => cstr_rhs(p, self.epsilon, x, u, true),
            Dynamics::Expr(e) => e.rhs(x, u, self.epsilon),
        }
    }

    /// Physical time derivative `ẋ`.
    pub fn rhs<T: Real>(&self, x: &[T], u: &[T]) -> Vec<T> {
        let mut f = self.raw_field(x, u);
        if self.sp_form {
            for &i in &self.rpv.fast {
                f[i] = f[i].clone() / self.epsilon;
            }
        }
        f
    }

    /// Reaction terms only (all flows zero); used for conservation checks.
    pub fn reaction_rhs<T: Real>(&self, x: &[T]) -> Option<Vec<T>> {
        match &self.dynamics {
            Dynamics::Cstr(p) => Some(cstr_rhs(p, self.epsilon, x, &[T::zero(), T::zero()], false)),
            _ => None,
        }
    }

    pub fn integrand<T: Real>(&self, x: &[T], u: &[T]) -> T {
        match &self.dynamics {
            Dynamics::Enzyme => x[1].clone() * -50.0 + u[0].clone() * u[0].clone(),
            Dynamics::Cstr(p) => {
                let (q, qa) = (u[0].clone(), u[1].clone());
                q.clone() * x[1].clone() * -p.product_weight + q.clone() * q + qa.clone() * qa
            }
            Dynamics::Expr(e) => e.objective(x, u, self.epsilon),
        }
    }

    pub fn slow_part<T: Clone>(&self, x: &[T]) -> Vec<T> {
        self.rpv.slow.iter().map(|&i| x[i].clone()).collect()
    }

    pub fn fast_part<T: Clone>(&self, x: &[T]) -> Vec<T> {
        self.rpv.fast.iter().map(|&i| x[i].clone()).collect()
    }

    /// Full state vector from its slow and fast parts.
    pub fn assemble<T: Real>(&self, z_s: &[T], z_f: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); self.n_x()];
        for (k, &i) in self.rpv.slow.iter().enumerate() {
            x[i] = z_s[k].clone();
        }
        for (k, &i) in self.rpv.fast.iter().enumerate() {
            x[i] = z_f[k].clone();
        }
        x
    }

    pub fn f_s<T: Real>(&self, z_s: &[T], z_f: &[T], u: &[T]) -> Vec<T> {
        let f = self.raw_field(&self.assemble(z_s, z_f), u);
        self.slow_part(&f)
    }

    /// Fast field; ε-free for models in singularly perturbed form.
    pub fn f_f<T: Real>(&self, z_s: &[T], z_f: &[T], u: &[T]) -> Vec<T> {
        let f = self.raw_field(&self.assemble(z_s, z_f), u);
        self.fast_part(&f)
    }

    pub fn initial_slow(&self) -> Vec<f64> {
        self.rpv.slow.iter().map(|&i| self.initial[i].unwrap_or(0.0)).collect()
    }

    pub fn control_midpoint(&self) -> Vec<f64> {
        self.u_bounds.iter().map(Bound::midpoint).collect()
    }

    /// Looks up a builtin model by name, or loads a JSON model file.
    pub fn load(name_or_path: &str) -> Result<Self, ModelError> {
        match name_or_path {
            "enzyme" => Ok(enzyme_model()),
            "cstr" => Ok(cstr_model()),
            other if other.ends_with(".json") || Path::new(other).exists() => {
                let text = std::fs::read_to_string(other).map_err(|source| ModelError::Io {
                    path: other.to_string(),
                    source,
                })?;
                Self::from_json(&text)
            }
            other => Err(ModelError::Unknown(other.to_string())),
        }
    }

    /// Builds a model from its JSON description (see [`ModelSpec`]).
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.build()
    }
}

fn cstr_rhs<T: Real>(p: &CstrParams, eps: f64, x: &[T], u: &[T], flows: bool) -> Vec<T> {
    let (ca, cb, cc, cd, v) = (x[0].clone(), x[1].clone(), x[2].clone(), x[3].clone(), x[4].clone());
    let r1 = ca.clone() * p.k1 - cb.clone() * p.k1_rev;
    let r2 = cb.clone() * eps;
    let r3 = cc.clone() * p.k2;
    let mut f = vec![-r1.clone(), r1 - r2.clone(), r2 - r3.clone(), r3, T::zero()];
    if flows {
        let (q, qa) = (u[0].clone(), u[1].clone());
        let d = qa.clone() / v;
        f[0] = f[0].clone() + d.clone() * (-ca + p.c_a_in);
        f[1] = f[1].clone() - d.clone() * cb;
        f[2] = f[2].clone() - d.clone() * cc;
        f[3] = f[3].clone() - d * cd;
        f[4] = qa - q;
    }
    f
}

/// Michaelis-Menten enzyme kinetics (`ε = 1e-6`, `T = 5`, `u ∈ [0, 10]`).
pub fn enzyme_model() -> OcpModel {
    OcpModel {
        name: "enzyme".into(),
        state_names: vec!["z_s".into(), "z_f".into()],
        control_names: vec!["u".into()],
        rpv: RpvSelection {
            slow: vec![0],
            fast: vec![1],
        },
        epsilon: 1e-6,
        sp_form: true,
        horizon: 5.0,
        u_bounds: vec![Bound::new(0.0, 10.0)],
        state_bounds: vec![Bound::FREE, Bound::FREE],
        initial: vec![Some(1.0), Some(0.5)],
        terminal: vec![None, None],
        dynamics: Dynamics::Enzyme,
    }
}

/// Isothermal CSTR with states `(c_A, c_B, c_C, c_D, V)` and controls
/// `(q, q_A)`; slow states are `c_B`, `c_D` and `V`.
pub fn cstr_model() -> OcpModel {
    cstr_model_with(CstrParams::default())
}

pub fn cstr_model_with(p: CstrParams) -> OcpModel {
    let mut initial: Vec<Option<f64>> = p.c_star.iter().map(|&c| Some(c)).collect();
    initial.push(Some(p.v_star));
    OcpModel {
        name: "cstr".into(),
        state_names: ["c_A", "c_B", "c_C", "c_D", "V"].map(String::from).to_vec(),
        control_names: vec!["q".into(), "q_A".into()],
        rpv: RpvSelection {
            slow: vec![1, 3, 4],
            fast: vec![0, 2],
        },
        epsilon: 1e-6,
        sp_form: false,
        horizon: 500.0,
        u_bounds: vec![Bound::new(0.0, p.q_max), Bound::new(0.0, p.q_a_max)],
        state_bounds: vec![Bound::NONNEG, Bound::NONNEG, Bound::NONNEG, Bound::NONNEG, Bound::FREE],
        initial,
        terminal: vec![None, None, None, None, Some(p.v_star)],
        dynamics: Dynamics::Cstr(p),
    }
}

/// `ẋ = f(x; u)` of a model as an [`OdeSystem`] whose parameters are the
/// controls.
pub struct FullDynamics<'a>(pub &'a OcpModel);

impl OdeSystem for FullDynamics<'_> {
    fn dim(&self) -> usize {
        self.0.n_x()
    }
    fn rhs<T: Real>(&self, x: &[T], p: &[T]) -> Result<Vec<T>, OdeError> {
        Ok(self.0.rhs(x, p))
    }
    fn integrand<T: Real>(&self, x: &[T], p: &[T]) -> Result<T, OdeError> {
        Ok(self.0.integrand(x, p))
    }
}

/// Slow dynamics on the approximated manifold, `ż_s = f_s(z_s, h(z_s, u), u)`.
///
/// `guess` is the warm start for the inner root solve; the returned point
/// carries the manifold value for reuse at the next evaluation.
pub fn reduced_rhs<T: Real>(
    model: &OcpModel,
    method: &SimMethod,
    z_s: &[T],
    u: &[T],
    guess: &[f64],
) -> Result<(Vec<T>, SimPoint<T>), SimError> {
    let point = sim::manifold_point(model, method, z_s, u, guess)?;
    let f = model.f_s(z_s, &point.z_f, u);
    Ok((f, point))
}

// ---------------------------------------------------------------------------
// JSON models
// ---------------------------------------------------------------------------

/// On-disk description of a user model.
///
/// ```json
/// {
///   "name": "toy", "states": ["y", "z"], "controls": ["u"],
///   "slow": ["y"], "fast": ["z"], "sp_form": true, "epsilon": 0.01,
///   "constants": {"a": 2.0},
///   "rhs": {"y": "-y + z + u", "z": "a*y - z"},
///   "objective": "z^2 + u^2", "horizon": 1.0,
///   "control_bounds": {"u": [0, 1]}, "initial": {"y": 1.0}
/// }
/// ```
///
/// Expressions support `+ - * / ^`, parentheses, the functions `exp`, `ln`
/// (alias `log`) and `sqrt`, state/control/constant names and `eps`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub states: Vec<String>,
    #[serde(default)]
    pub controls: Vec<String>,
    pub slow: Vec<String>,
    #[serde(default)]
    pub fast: Vec<String>,
    #[serde(default)]
    pub sp_form: bool,
    pub epsilon: f64,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
    pub rhs: BTreeMap<String, String>,
    pub objective: String,
    pub horizon: f64,
    #[serde(default)]
    pub control_bounds: BTreeMap<String, (Option<f64>, Option<f64>)>,
    #[serde(default)]
    pub state_bounds: BTreeMap<String, (Option<f64>, Option<f64>)>,
    #[serde(default)]
    pub initial: BTreeMap<String, f64>,
    #[serde(default)]
    pub terminal: BTreeMap<String, f64>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<OcpModel, ModelError> {
        let index_of = |names: &[String], key: &str, what: &str| {
            names
                .iter()
                .position(|n| n == key)
                .ok_or_else(|| ModelError::Invalid(format!("unknown {what} `{key}`")))
        };
        let n = self.states.len();
        let slow = self
            .slow
            .iter()
            .map(|s| index_of(&self.states, s, "state"))
            .collect::<Result<Vec<_>, _>>()?;
        let fast = self
            .fast
            .iter()
            .map(|s| index_of(&self.states, s, "state"))
            .collect::<Result<Vec<_>, _>>()?;
        let rpv = RpvSelection::new(slow, fast, n)?;

        let scope = Scope {
            states: &self.states,
            controls: &self.controls,
            constants: &self.constants,
        };
        let mut rhs = Vec::with_capacity(n);
        for s in &self.states {
            let src = self
                .rhs
                .get(s)
                .ok_or_else(|| ModelError::Invalid(format!("missing right-hand side for `{s}`")))?;
            rhs.push(Expr::parse(src, &scope)?);
        }
        if let Some(extra) = self.rhs.keys().find(|k| !self.states.contains(k)) {
            return Err(ModelError::Invalid(format!(
                "right-hand side given for unknown state `{extra}`"
            )));
        }
        let objective = Expr::parse(&self.objective, &scope)?;

        let bound =
            |b: &(Option<f64>, Option<f64>)| Bound::new(b.0.unwrap_or(f64::NEG_INFINITY), b.1.unwrap_or(f64::INFINITY));
        let mut u_bounds = vec![Bound::FREE; self.controls.len()];
        for (k, b) in &self.control_bounds {
            u_bounds[index_of(&self.controls, k, "control")?] = bound(b);
        }
        let mut state_bounds = vec![Bound::FREE; n];
        for (k, b) in &self.state_bounds {
            state_bounds[index_of(&self.states, k, "state")?] = bound(b);
        }
        let mut initial = vec![None; n];
        for (k, &v) in &self.initial {
            initial[index_of(&self.states, k, "state")?] = Some(v);
        }
        let mut terminal = vec![None; n];
        for (k, &v) in &self.terminal {
            terminal[index_of(&self.states, k, "state")?] = Some(v);
        }

        let model = OcpModel {
            name: self.name.clone(),
            state_names: self.states.clone(),
            control_names: self.controls.clone(),
            rpv,
            epsilon: self.epsilon,
            sp_form: self.sp_form,
            horizon: self.horizon,
            u_bounds,
            state_bounds,
            initial,
            terminal,
            dynamics: Dynamics::Expr(Box::new(ExprSystem { rhs, objective })),
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone)]
struct ExprSystem {
    rhs: Vec<Expr>,
    objective: Expr,
}

impl ExprSystem {
    fn rhs<T: Real>(&self, x: &[T], u: &[T], eps: f64) -> Vec<T> {
        self.rhs.iter().map(|e| e.eval(x, u, eps)).collect()
    }
    fn objective<T: Real>(&self, x: &[T], u: &[T], eps: f64) -> T {
        self.objective.eval(x, u, eps)
    }
}

struct Scope<'a> {
    states: &'a [String],
    controls: &'a [String],
    constants: &'a BTreeMap<String, f64>,
}

/// Parsed arithmetic expression over states, controls and `eps`.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    State(usize),
    Control(usize),
    Eps,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Sqrt,
}

impl fmt::Display for Func {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
        })
    }
}

impl Expr {
    fn parse(src: &str, scope: &Scope) -> Result<Self, ModelError> {
        let mut p = Parser { src, pos: 0, scope };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval<T: Real>(&self, x: &[T], u: &[T], eps: f64) -> T {
        match self {
            Expr::Num(v) => T::cst(*v),
            Expr::State(i) => x[*i].clone(),
            Expr::Control(i) => u[*i].clone(),
            Expr::Eps => T::cst(eps),
            Expr::Neg(a) => -a.eval(x, u, eps),
            Expr::Add(a, b) => a.eval(x, u, eps) + b.eval(x, u, eps),
            Expr::Sub(a, b) => a.eval(x, u, eps) - b.eval(x, u, eps),
            Expr::Mul(a, b) => a.eval(x, u, eps) * b.eval(x, u, eps),
            Expr::Div(a, b) => a.eval(x, u, eps) / b.eval(x, u, eps),
            Expr::Pow(a, b) => {
                let base = a.eval(x, u, eps);
                match **b {
                    Expr::Num(n) if n.fract() == 0.0 && n.abs() <= 64.0 => base.powi(n as i32),
                    _ => (base.ln() * b.eval(x, u, eps)).exp(),
                }
            }
            Expr::Call(f, a) => {
                let v = a.eval(x, u, eps);
                match f {
                    Func::Exp => v.exp(),
                    Func::Ln => v.ln(),
                    Func::Sqrt => v.sqrt(),
                }
            }
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    scope: &'a Scope<'a>,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> ModelError {
        ModelError::Parse {
            expr: self.src.to_string(),
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    // expr := term (('+' | '-') term)*
    fn expr(&mut self) -> Result<Expr, ModelError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    // term := unary (('*' | '/') unary)*
    fn term(&mut self) -> Result<Expr, ModelError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    // unary := '-' unary | power
    fn unary(&mut self) -> Result<Expr, ModelError> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    // power := atom ('^' unary)?   (right associative)
    fn power(&mut self) -> Result<Expr, ModelError> {
        let base = self.atom()?;
        if self.eat('^') {
            return Ok(Expr::Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ModelError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => {
                let bytes = self.src.as_bytes();
                while self.pos < bytes.len() {
                    let b = bytes[self.pos];
                    let exp_sign =
                        (b == b'+' || b == b'-') && self.pos > start && matches!(bytes[self.pos - 1], b'e' | b'E');
                    if b.is_ascii_digit() || b == b'.' || b == b'e' || b == b'E' || exp_sign {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                self.src[start..self.pos].parse::<f64>().map(Expr::Num).map_err(|_| {
                    self.pos = start;
                    self.error("malformed number")
                })
            }
            Some(c) if c.is_alphabetic() || c == '_' => {
                while self.peek().is_some_and(|c| c.is_alphanumeric() || c == '_') {
                    self.pos += self.peek().map_or(1, char::len_utf8);
                }
                let ident = &self.src[start..self.pos];
                let func = match ident {
                    "exp" => Some(Func::Exp),
                    "ln" | "log" => Some(Func::Ln),
                    "sqrt" => Some(Func::Sqrt),
                    _ => None,
                };
                if let Some(f) = func {
                    if !self.eat('(') {
                        return Err(self.error("expected `(` after function name"));
                    }
                    let arg = self.expr()?;
                    if !self.eat(')') {
                        return Err(self.error("expected `)`"));
                    }
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                if let Some(i) = self.scope.states.iter().position(|s| s == ident) {
                    Ok(Expr::State(i))
                } else if let Some(i) = self.scope.controls.iter().position(|s| s == ident) {
                    Ok(Expr::Control(i))
                } else if let Some(&v) = self.scope.constants.get(ident) {
                    Ok(Expr::Num(v))
                } else if ident == "eps" {
                    Ok(Expr::Eps)
                } else {
                    self.pos = start;
                    Err(self.error(&format!("unknown identifier `{ident}`")))
                }
            }
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of expression")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enzyme_fast_field_vanishes_on_slow_set() {
        let m = enzyme_model();
        assert_eq!(m.f_f(&[1.0], &[0.5], &[0.0]), vec![0.0]);
    }

    #[test]
    fn enzyme_integrand_at_initial_control() {
        let m = enzyme_model();
        let l = m.integrand(&[1.0, 0.5], &[4.165]);
        assert!((l - (-25.0 + 4.165f64 * 4.165)).abs() < 1e-12);
        assert!((l + 7.652).abs() < 1e-3);
        assert_eq!((m.n_s(), m.n_f(), m.n_u()), (1, 1, 1));
    }

    #[test]
    fn enzyme_fast_rhs_is_scaled() {
        let m = enzyme_model();
        let f = m.rhs(&[1.0, 0.4], &[0.0]);
        assert!((f[1] - 0.2 / 1e-6).abs() < 1e-6);
    }

    #[test]
    fn cstr_constants_and_volume_balance() {
        let m = cstr_model();
        let p = m.cstr_params().unwrap();
        assert_eq!((p.k1, p.k1_rev, p.k2), (100.0, 90.0, 20.0));
        let f = m.rhs(&[0.3, 0.2, 0.1, 0.05, 0.02], &[1e-3, 1e-3]);
        assert_eq!(f[4], 0.0);
        assert_eq!(m.rpv.slow, vec![1, 3, 4]);
        assert_eq!(m.rpv.fast, vec![0, 2]);
    }

    #[test]
    fn cstr_closed_tank_conserves_moles() {
        let m = cstr_model();
        let f = m.rhs(&[0.3, 0.2, 0.1, 0.05, 0.02], &[0.0, 0.0]);
        assert!(f[..4].iter().sum::<f64>().abs() < 1e-14);
    }

    #[test]
    fn rpv_selection_must_partition() {
        assert!(RpvSelection::new(vec![0], vec![0], 2).is_err());
        assert!(RpvSelection::new(vec![0], vec![], 2).is_err());
        assert!(RpvSelection::new(vec![1], vec![0], 2).is_ok());
    }

    #[test]
    fn invalid_epsilon_rejected() {
        assert!(enzyme_model().with_epsilon(0.0).is_err());
        assert!(enzyme_model().with_epsilon(-1.0).is_err());
    }

    #[test]
    fn json_model_matches_builtin_enzyme() {
        let json = r#"{
            "name": "enzyme-json", "states": ["zs", "zf"], "controls": ["u"],
            "slow": ["zs"], "fast": ["zf"], "sp_form": true, "epsilon": 1e-6,
            "constants": {"half": 0.5},
            "rhs": {"zs": "-zs + (zs + half)*zf + u", "zf": "zs - (zs + 1)*zf"},
            "objective": "-50*zf + u^2", "horizon": 5,
            "control_bounds": {"u": [0, 10]}, "initial": {"zs": 1, "zf": 0.5}
        }"#;
        let j = OcpModel::from_json(json).unwrap();
        let b = enzyme_model();
        for x in [[1.0, 0.4], [0.3, 0.9], [2.0, 0.1]] {
            assert_eq!(j.rhs(&x, &[1.5]), b.rhs(&x, &[1.5]));
            assert_eq!(j.integrand(&x, &[1.5]), b.integrand(&x, &[1.5]));
        }
    }

    #[test]
    fn expression_parser_precedence() {
        let states = vec!["x".to_string()];
        let constants = BTreeMap::new();
        let scope = Scope {
            states: &states,
            controls: &[],
            constants: &constants,
        };
        let eval = |s: &str| Expr::parse(s, &scope).unwrap().eval::<f64>(&[2.0], &[], 0.25);
        assert_eq!(eval("1 + 2*3"), 7.0);
        assert_eq!(eval("-x^2"), -4.0);
        assert!((eval("2^3^2") - 512.0).abs() < 1e-12);
        assert_eq!(eval("(1 + x)/eps"), 12.0);
        assert_eq!(eval("1.5e-1*x"), 0.3);
        assert!((eval("exp(ln(x)) + sqrt(4)") - 4.0).abs() < 1e-15);
        assert!((eval("x^0.5") - 2f64.sqrt()).abs() < 1e-15);
        assert!(Expr::parse("x +", &scope).is_err());
        assert!(Expr::parse("y", &scope).is_err());
        assert!(Expr::parse("(x", &scope).is_err());
    }
}
