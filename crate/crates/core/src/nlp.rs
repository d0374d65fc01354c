//! Block-structured nonlinear programs.
//!
//! An [`NlpProblem`] is a sum of small kernels ("blocks"), each a smooth
//! function of a handful of global variables that contributes to the
//! objective and to a fixed set of equality rows. Derivatives are obtained
//! per block with hyper-dual numbers and scattered into global sparse
//! triplets in block order, so assembly is deterministic regardless of how
//! many workers evaluate the blocks.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::ad::{self, HyperDual, Real};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("evaluation failed in {location}: {message}")]
pub struct EvalError {
    pub location: String,
    pub message: String,
}

impl EvalError {
    pub fn new(location: impl Into<String>, message: impl ToString) -> Self {
        Self {
            location: location.into(),
            message: message.to_string(),
        }
    }
}

/// Objective contribution and constraint rows of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOut<T> {
    pub objective: T,
    pub constraints: Vec<T>,
}

/// A smooth block kernel over its local variables.
pub trait BlockFn: Send + Sync {
    fn eval<T: Real>(&self, x: &[T]) -> Result<BlockOut<T>, EvalError>;
}

trait DynBlock: Send + Sync {
    fn eval_f64(&self, x: &[f64]) -> Result<BlockOut<f64>, EvalError>;
    fn eval_hyper(&self, x: &[HyperDual]) -> Result<BlockOut<HyperDual>, EvalError>;
}

impl<B: BlockFn> DynBlock for B {
    fn eval_f64(&self, x: &[f64]) -> Result<BlockOut<f64>, EvalError> {
        self.eval(x)
    }
    fn eval_hyper(&self, x: &[HyperDual]) -> Result<BlockOut<HyperDual>, EvalError> {
        self.eval(x)
    }
}

#[derive(Clone)]
pub struct Block {
    pub label: String,
    /// Global indices of the local variables, in kernel order.
    pub vars: Vec<usize>,
    /// Global constraint rows filled by the kernel outputs, in order.
    pub cons: Vec<usize>,
    kernel: Arc<dyn DynBlock>,
}

impl std::fmt::Debug for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Block")
            .field("label", &self.label)
            .field("vars", &self.vars)
            .field("cons", &self.cons)
            .finish()
    }
}

/// Linear pin `x[var] = value` occupying constraint row `row`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pin {
    pub var: usize,
    pub value: f64,
    pub row: usize,
}

/// Elimination key used by the KKT factorization: items are ordered by
/// `(stage, slot)` and then by index.
pub type OrderKey = (usize, usize);

#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub n_vars: usize,
    pub n_eq: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x0: Vec<f64>,
    pub var_names: Vec<String>,
    pub var_order: Vec<OrderKey>,
    pub con_order: Vec<OrderKey>,
    pub blocks: Vec<Block>,
    pub pins: Vec<Pin>,
    /// `(row, var)` pairs to be eliminated together as a 2×2 pivot, e.g. a
    /// continuity row and the node variable it defines. Hints only: pairs
    /// involving pins or fixed variables are ignored.
    pub pivot_pairs: Vec<(usize, usize)>,
    /// Evaluate blocks on the rayon pool.
    pub parallel: bool,
}

/// First and second derivatives at a point.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub objective: f64,
    pub constraints: Vec<f64>,
    pub gradient: Vec<f64>,
    /// Constraint Jacobian triplets `(row, col, value)`, pins included.
    /// The triplet pattern depends only on the block structure, never on
    /// the evaluation point.
    pub jacobian: Vec<(usize, usize, f64)>,
    /// Lower-triangle Hessian-of-Lagrangian triplets `(i, j, value)`, `i ≥ j`.
    pub hessian: Vec<(usize, usize, f64)>,
}

impl NlpProblem {
    /// Empty problem with free variables, zero start and natural ordering.
    pub fn new(n_vars: usize, n_eq: usize) -> Self {
        Self {
            n_vars,
            n_eq,
            lower: vec![f64::NEG_INFINITY; n_vars],
            upper: vec![f64::INFINITY; n_vars],
            x0: vec![0.0; n_vars],
            var_names: (0..n_vars).map(|i| format!("x{i}")).collect(),
            var_order: vec![(0, 0); n_vars],
            con_order: vec![(0, 1); n_eq],
            blocks: Vec::new(),
            pins: Vec::new(),
            pivot_pairs: Vec::new(),
            parallel: false,
        }
    }

    pub fn add_block<B: BlockFn + 'static>(
        &mut self,
        label: impl Into<String>,
        vars: Vec<usize>,
        cons: Vec<usize>,
        kernel: B,
    ) {
        self.blocks.push(Block {
            label: label.into(),
            vars,
            cons,
            kernel: Arc::new(kernel),
        });
    }

    pub fn add_pin(&mut self, var: usize, value: f64, row: usize) {
        self.pins.push(Pin { var, value, row });
    }

    /// Checks that blocks and pins fill every constraint row exactly once
    /// and reference valid variables.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.n_vars;
        if [
            self.lower.len(),
            self.upper.len(),
            self.x0.len(),
            self.var_order.len(),
            self.var_names.len(),
        ]
        .iter()
        .any(|&l| l != n)
            || self.con_order.len() != self.n_eq
        {
            return Err("per-variable or per-constraint data has the wrong length".into());
        }
        let mut filled = vec![false; self.n_eq];
        let rows = self
            .blocks
            .iter()
            .flat_map(|b| b.cons.iter().copied())
            .chain(self.pins.iter().map(|p| p.row));
        for r in rows {
            if r >= self.n_eq || filled[r] {
                return Err(format!("constraint row {r} is out of range or filled twice"));
            }
            filled[r] = true;
        }
        if let Some(r) = filled.iter().position(|f| !f) {
            return Err(format!("constraint row {r} is never filled"));
        }
        if self
            .blocks
            .iter()
            .flat_map(|b| &b.vars)
            .chain(self.pins.iter().map(|p| &p.var))
            .any(|&v| v >= n)
        {
            return Err("block references a variable out of range".into());
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(format!("empty bounds on variable {i}"));
            }
        }
        Ok(())
    }

    fn gather<T: Clone>(x: &[T], idx: &[usize]) -> Vec<T> {
        idx.iter().map(|&i| x[i].clone()).collect()
    }

    fn check_outputs<T>(&self, b: &Block, out: &BlockOut<T>) -> Result<(), EvalError> {
        if out.constraints.len() != b.cons.len() {
            return Err(EvalError::new(
                b.label.clone(),
                format!(
                    "kernel returned {} rows, expected {}",
                    out.constraints.len(),
                    b.cons.len()
                ),
            ));
        }
        Ok(())
    }

    fn map_blocks<R: Send, F>(&self, f: F) -> Vec<R>
    where
        F: Fn(&Block) -> R + Sync + Send,
    {
        if self.parallel {
            self.blocks.par_iter().map(f).collect()
        } else {
            self.blocks.iter().map(f).collect()
        }
    }

    /// Objective and constraint values.
    pub fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        let outs = self.map_blocks(|b| b.kernel.eval_f64(&Self::gather(x, &b.vars)));
        let mut obj = 0.0;
        let mut c = vec![0.0; self.n_eq];
        for (b, out) in self.blocks.iter().zip(outs) {
            let out = out?;
            self.check_outputs(b, &out)?;
            obj += out.objective;
            for (&r, v) in b.cons.iter().zip(out.constraints) {
                c[r] = v;
            }
        }
        for p in &self.pins {
            c[p.row] = x[p.var] - p.value;
        }
        if !obj.is_finite() || c.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::new("problem", "non-finite objective or constraint value"));
        }
        Ok((obj, c))
    }

    /// Values, gradient, Jacobian and the Hessian of
    /// `obj_factor·f + Σ λ_i c_i`.
    pub fn derivatives(&self, x: &[f64], lambda: &[f64], obj_factor: f64) -> Result<Derivatives, EvalError> {
        let outs = self.map_blocks(|b| {
            let local = ad::seed_hyper(&Self::gather(x, &b.vars));
            b.kernel.eval_hyper(&local)
        });
        let mut d = Derivatives {
            objective: 0.0,
            constraints: vec![0.0; self.n_eq],
            gradient: vec![0.0; self.n_vars],
            jacobian: Vec::new(),
            hessian: Vec::new(),
        };
        for (b, out) in self.blocks.iter().zip(outs) {
            let out = out?;
            self.check_outputs(b, &out)?;
            let nl = b.vars.len();
            d.objective += out.objective.value;
            for (j, &v) in b.vars.iter().enumerate() {
                d.gradient[v] += out.objective.grad(j);
            }
            let mut lag = out.objective.scale(obj_factor);
            for (&r, c) in b.cons.iter().zip(out.constraints) {
                d.constraints[r] = c.value;
                for (j, &v) in b.vars.iter().enumerate() {
                    d.jacobian.push((r, v, c.grad(j)));
                }
                lag = lag + c * lambda[r];
            }
            for i in 0..nl {
                for j in 0..=i {
                    let (a, bb) = (b.vars[i], b.vars[j]);
                    d.hessian.push((a.max(bb), a.min(bb), lag.hess(i, j)));
                }
            }
        }
        for p in &self.pins {
            d.constraints[p.row] = x[p.var] - p.value;
            d.jacobian.push((p.row, p.var, 1.0));
        }
        if !d.objective.is_finite() || d.constraints.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::new("problem", "non-finite objective or constraint value"));
        }
        Ok(d)
    }

    /// Number of structurally nonzero Jacobian and lower-Hessian entries.
    pub fn sparsity_counts(&self) -> (usize, usize) {
        let jac: usize = self.blocks.iter().map(|b| b.vars.len() * b.cons.len()).sum::<usize>() + self.pins.len();
        let hess: usize = self.blocks.iter().map(|b| b.vars.len() * (b.vars.len() + 1) / 2).sum();
        (jac, hess)
    }

    /// Largest relative deviation of the gradient and Jacobian from central
    /// differences with step `h`.
    pub fn check_derivatives(&self, x: &[f64], h: f64) -> Result<f64, EvalError> {
        let d = self.derivatives(x, &vec![0.0; self.n_eq], 1.0)?;
        let mut jac = vec![vec![0.0; self.n_vars]; self.n_eq];
        for &(r, c, v) in &d.jacobian {
            jac[r][c] += v;
        }
        let mut worst: f64 = 0.0;
        for j in 0..self.n_vars {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (fp, cp) = self.eval(&xp)?;
            let (fm, cm) = self.eval(&xm)?;
            let rel = |exact: f64, fd: f64| (exact - fd).abs() / exact.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel(d.gradient[j], (fp - fm) / (2.0 * h)));
            for r in 0..self.n_eq {
                worst = worst.max(rel(jac[r][j], (cp[r] - cm[r]) / (2.0 * h)));
            }
        }
        Ok(worst)
    }
}
