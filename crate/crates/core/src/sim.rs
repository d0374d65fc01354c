//! Point-wise approximation of the slow invariant manifold.
//!
//! Every criterion is a residual map `ψ(z_s, z_f, u)` with `n_f` outputs;
//! the manifold point `h(z_s, u)` is the root of `ψ` in `z_f`.
//!
//! Time derivatives are taken on the augmented vector `y = [x; u]` with a
//! vector field whose control block is zero, so controls (and, for the
//! frozen ZDP convention, the slow states) stay constant under Lie
//! differentiation while derivatives with respect to them remain available
//! to the optimizer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{self, AdError, Dual, Real, VectorFn};
use crate::model::OcpModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("singular manifold Jacobian after {iters} Newton iterations")]
    SingularJacobian { iters: usize },
    #[error("manifold solve did not converge in {iters} iterations (residual {residual:e})")]
    NoConvergence { residual: f64, iters: usize },
    #[error("invalid derivative order {0} (supported: 1..=4)")]
    InvalidOrder(usize),
    #[error("{0}")]
    Config(String),
}

impl From<AdError> for SimError {
    fn from(e: AdError) -> Self {
        match e {
            AdError::InvalidOrder(m) => SimError::InvalidOrder(m),
            other => SimError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    #[default]
    Zdp,
    Gzdp,
    Unger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMethod {
    pub kind: SimKind,
    pub m: usize,
    pub newton_tol: f64,
    pub max_iters: usize,
    /// ZDP only: differentiate along the complete field instead of holding
    /// the slow variables fixed.
    #[serde(default)]
    pub full_chain: bool,
    /// GZDP only: indices into the slow block whose derivatives are zeroed.
    #[serde(default)]
    pub components: Option<Vec<usize>>,
}

impl Default for SimMethod {
    fn default() -> Self {
        Self {
            kind: SimKind::Zdp,
            m: 2,
            newton_tol: 1e-10,
            max_iters: 50,
            full_chain: false,
            components: None,
        }
    }
}

impl SimMethod {
    pub fn zdp(m: usize) -> Self {
        Self { m, ..Self::default() }
    }

    pub fn gzdp(m: usize) -> Self {
        Self {
            kind: SimKind::Gzdp,
            m,
            ..Self::default()
        }
    }

    pub fn unger() -> Self {
        Self {
            kind: SimKind::Unger,
            ..Self::default()
        }
    }

    pub fn with_full_chain(mut self, on: bool) -> Self {
        self.full_chain = on;
        self
    }

    pub fn validate(&self, model: &OcpModel) -> Result<(), SimError> {
        if self.kind != SimKind::Unger && !(1..=4).contains(&self.m) {
            return Err(SimError::InvalidOrder(self.m));
        }
        if self.newton_tol.is_nan() || self.newton_tol <= 0.0 || self.max_iters == 0 {
            return Err(SimError::Config("newton_tol and max_iters must be positive".into()));
        }
        if self.kind == SimKind::Gzdp {
            gzdp_components(model, self)?;
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            SimKind::Zdp => format!("ZDP m={}", self.m),
            SimKind::Gzdp => format!("GZDP m={}", self.m),
            SimKind::Unger => "Lebiedz/Unger".to_string(),
        }
    }
}

/// A manifold point with its solve diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPoint<T = f64> {
    pub z_f: Vec<T>,
    pub residual_norm: f64,
    pub iters: usize,
}

#[derive(Clone, Copy)]
enum Field {
    /// Only the fast block moves.
    Frozen,
    /// All states move, on the fast time scale for SP-form models.
    FullChain,
    /// Physical time derivative of every state.
    Physical,
}

struct Augmented<'a> {
    model: &'a OcpModel,
    field: Field,
}

impl VectorFn for Augmented<'_> {
    fn input_dim(&self) -> usize {
        self.model.n_x() + self.model.n_u()
    }
    fn output_dim(&self) -> usize {
        self.input_dim()
    }
    fn eval<T: Real>(&self, y: &[T]) -> Vec<T> {
        let m = self.model;
        let n = m.n_x();
        let (x, u) = y.split_at(n);
        let mut out = match self.field {
            Field::Physical => m.rhs(x, u),
            Field::Frozen => {
                let raw = m.raw_field(x, u);
                let mut g = vec![T::zero(); n];
                for &i in &m.rpv.fast {
                    g[i] = raw[i].clone();
                }
                g
            }
            Field::FullChain => {
                let mut raw = m.raw_field(x, u);
                if m.sp_form {
                    for &i in &m.rpv.slow {
                        raw[i] = raw[i].clone() * m.epsilon;
                    }
                }
                raw
            }
        };
        out.resize(n + m.n_u(), T::zero());
        out
    }
}

fn augment<T: Real>(model: &OcpModel, z_s: &[T], z_f: &[T], u: &[T]) -> Vec<T> {
    let mut y = model.assemble(z_s, z_f);
    y.extend_from_slice(u);
    y
}

/// `m`-th time derivative of the fast variables; for `m = 2` under the
/// frozen convention this is `∂f_f/∂z_f · f_f`.
pub fn zdp_residual<T: Real>(
    model: &OcpModel,
    z_s: &[T],
    z_f: &[T],
    u: &[T],
    m: usize,
    full_chain: bool,
) -> Result<Vec<T>, SimError> {
    let field = Augmented {
        model,
        field: if full_chain { Field::FullChain } else { Field::Frozen },
    };
    let d = ad::lie_derivative(&field, &augment(model, z_s, z_f, u), m)?;
    Ok(model.fast_part(&d))
}

/// Slow components used by GZDP for this model and method.
pub fn gzdp_components(model: &OcpModel, method: &SimMethod) -> Result<Vec<usize>, SimError> {
    let comps = match &method.components {
        Some(c) => c.clone(),
        None if model.n_s() >= model.n_f() => (0..model.n_f()).collect(),
        None => {
            return Err(SimError::Config(format!(
                "GZDP needs {} slow components but the model only has {}; give explicit indices",
                model.n_f(),
                model.n_s()
            )))
        }
    };
    if comps.len() != model.n_f() || comps.iter().any(|&c| c >= model.n_s()) {
        return Err(SimError::Config(format!(
            "GZDP needs exactly {} distinct slow component indices below {}",
            model.n_f(),
            model.n_s()
        )));
    }
    Ok(comps)
}

/// `m`-th time derivative of the selected slow components along the full
/// field. SP-form residuals are multiplied by `ε^(m-1)` to stay `O(1)`.
pub fn gzdp_residual<T: Real>(
    model: &OcpModel,
    z_s: &[T],
    z_f: &[T],
    u: &[T],
    m: usize,
    components: &[usize],
) -> Result<Vec<T>, SimError> {
    let field = Augmented {
        model,
        field: Field::Physical,
    };
    let d = ad::lie_derivative(&field, &augment(model, z_s, z_f, u), m)?;
    let scale = if model.sp_form {
        model.epsilon.powi(m as i32 - 1)
    } else {
        1.0
    };
    Ok(components
        .iter()
        .map(|&c| d[model.rpv.slow[c]].clone() * scale)
        .collect())
}

/// Gradient in `z_f` of the squared curvature `‖z̈‖²` of the trajectory
/// through `(z_s, z_f)` at fixed controls. SP-form models are measured in
/// `ε²·z̈` so the residual is `O(1)`.
pub fn unger_local_residual<T: Real>(model: &OcpModel, z_s: &[T], z_f: &[T], u: &[T]) -> Vec<T> {
    let nf = z_f.len();
    let zs: Vec<Dual<T>> = z_s.iter().cloned().map(Dual::constant).collect();
    let zf = ad::seed(z_f);
    let ud: Vec<Dual<T>> = u.iter().cloned().map(Dual::constant).collect();
    let field = Augmented {
        model,
        field: Field::Physical,
    };
    let acc = ad::lie_derivative(&field, &augment(model, &zs, &zf, &ud), 2).expect("order 2 is supported");
    let scale = if model.sp_form {
        model.epsilon * model.epsilon
    } else {
        1.0
    };
    let mut s = Dual::<T>::constant(T::zero());
    for a in acc.into_iter().take(model.n_x()) {
        let a = a * scale;
        s = s + a.clone() * a;
    }
    (0..nf).map(|j| s.partial(j)).collect()
}

/// Residual `ψ` of the chosen criterion.
pub fn psi<T: Real>(model: &OcpModel, method: &SimMethod, z_s: &[T], z_f: &[T], u: &[T]) -> Result<Vec<T>, SimError> {
    match method.kind {
        SimKind::Zdp => zdp_residual(model, z_s, z_f, u, method.m, method.full_chain),
        SimKind::Gzdp => {
            let comps = gzdp_components(model, method)?;
            gzdp_residual(model, z_s, z_f, u, method.m, &comps)
        }
        SimKind::Unger => Ok(unger_local_residual(model, z_s, z_f, u)),
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn psi_jacobian(
    model: &OcpModel,
    method: &SimMethod,
    z_s: &[f64],
    z_f: &[f64],
    u: &[f64],
) -> Result<DMatrix<f64>, SimError> {
    let nf = z_f.len();
    let r = psi(
        model,
        method,
        &ad::constants::<Dual>(z_s),
        &ad::seed(z_f),
        &ad::constants::<Dual>(u),
    )?;
    Ok(DMatrix::from_fn(nf, nf, |i, j| r[i].partial(j)))
}

/// Root of `ψ` in `z_f` by damped Newton (Armijo halving on `‖ψ‖²`).
///
/// The iteration runs in `f64`; for derivative-carrying `T` a few
/// simplified-Newton sweeps with the converged Jacobian then attach exact
/// sensitivities with respect to `z_s` and `u`.
pub fn manifold_point<T: Real>(
    model: &OcpModel,
    method: &SimMethod,
    z_s: &[T],
    u: &[T],
    guess: &[f64],
) -> Result<SimPoint<T>, SimError> {
    let zs = ad::values(z_s);
    let uv = ad::values(u);
    let mut z = guess.to_vec();
    let mut iters = 0;
    let mut r = psi(model, method, &zs, &z, &uv)?;
    let mut res = inf_norm(&r);
    while res > method.newton_tol {
        if iters >= method.max_iters || !res.is_finite() {
            return Err(SimError::NoConvergence { residual: res, iters });
        }
        let jac = psi_jacobian(model, method, &zs, &z, &uv)?;
        let dz = jac
            .lu()
            .solve(&DVector::from_column_slice(&r))
            .filter(|d| d.iter().all(|v| v.is_finite()))
            .ok_or(SimError::SingularJacobian { iters })?;
        let phi0: f64 = r.iter().map(|v| v * v).sum();
        let mut alpha = 1.0;
        let mut trial;
        let mut halvings = 0;
        loop {
            let cand: Vec<f64> = z.iter().zip(dz.iter()).map(|(a, d)| a - alpha * d).collect();
            let rc = psi(model, method, &zs, &cand, &uv)?;
            let phi: f64 = rc.iter().map(|v| v * v).sum();
            trial = (cand, rc);
            if phi <= (1.0 - 2e-4 * alpha) * phi0 || halvings >= 20 {
                break;
            }
            alpha *= 0.5;
            halvings += 1;
        }
        z = trial.0;
        r = trial.1;
        res = inf_norm(&r);
        iters += 1;
    }

    let mut zt: Vec<T> = ad::constants(&z);
    if T::DERIV_ORDER > 0 {
        let jinv = psi_jacobian(model, method, &zs, &z, &uv)?
            .try_inverse()
            .ok_or(SimError::SingularJacobian { iters })?;
        for _ in 0..=T::DERIV_ORDER {
            let rt = psi(model, method, z_s, &zt, u)?;
            zt = (0..z.len())
                .map(|i| {
                    let mut acc = zt[i].clone();
                    for (j, rj) in rt.iter().enumerate() {
                        acc = acc - rj.clone() * jinv[(i, j)];
                    }
                    acc
                })
                .collect();
        }
    }
    Ok(SimPoint {
        z_f: zt,
        residual_norm: res,
        iters,
    })
}

/// ZDP manifold point of order `m` (frozen convention).
pub fn zdp_point(model: &OcpModel, z_s: &[f64], u: &[f64], m: usize, guess: &[f64]) -> Result<SimPoint, SimError> {
    let method = SimMethod::zdp(m);
    method.validate(model)?;
    manifold_point(model, &method, z_s, u, guess)
}

/// Local curvature-minimizing manifold point.
pub fn unger_local_point(model: &OcpModel, z_s: &[f64], u: &[f64], guess: &[f64]) -> Result<SimPoint, SimError> {
    manifold_point(model, &SimMethod::unger(), z_s, u, guess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cstr_model, enzyme_model};

    #[test]
    fn zdp_residual_examples() {
        let m = enzyme_model();
        let r = |zf: f64, order| zdp_residual(&m, &[1.0], &[zf], &[0.0], order, false).unwrap()[0];
        assert_eq!(r(0.5, 2), 0.0);
        assert!((r(0.4, 2) + 0.4).abs() < 1e-15);
        assert!((r(0.4, 1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zdp_point_enzyme() {
        let m = enzyme_model();
        let p = zdp_point(&m, &[1.0], &[0.0], 2, &[0.3]).unwrap();
        assert!((p.z_f[0] - 0.5).abs() < 1e-12);
        let p = zdp_point(&m, &[6.0], &[0.0], 2, &[0.5]).unwrap();
        assert!((p.z_f[0] - 6.0 / 7.0).abs() < 1e-12);
        assert!(p.residual_norm <= 1e-10);
    }

    #[test]
    fn zdp_point_at_root_takes_no_iterations() {
        let m = enzyme_model();
        let p = zdp_point(&m, &[1.0], &[0.0], 2, &[0.5]).unwrap();
        assert_eq!(p.iters, 0);
        assert_eq!(p.z_f, vec![0.5]);
    }

    #[test]
    fn zdp_point_cstr_first_order() {
        let m = cstr_model();
        let (cb, cd, v, qa) = (1e-3, 1e-8, 1e-2, 1e-3);
        let p = zdp_point(&m, &[cb, cd, v], &[0.0, qa], 1, &[0.0, 0.0]).unwrap();
        let d = qa / v;
        let ca = (90.0 * cb + d) / (100.0 + d);
        let cc = 1e-6 * cb / (20.0 + d);
        assert!((p.z_f[0] - ca).abs() < 1e-12);
        assert!((p.z_f[1] - cc).abs() < 1e-16);
    }

    #[test]
    fn invalid_order_rejected() {
        let m = enzyme_model();
        assert_eq!(
            zdp_point(&m, &[1.0], &[0.0], 0, &[0.5]).unwrap_err(),
            SimError::InvalidOrder(0)
        );
        assert!(zdp_residual(&m, &[1.0], &[0.5], &[0.0], 5, false).is_err());
    }

    #[test]
    fn gzdp_first_order_is_slow_field() {
        let m = enzyme_model();
        let r = gzdp_residual(&m, &[1.0], &[0.5], &[0.0], 1, &[0]).unwrap()[0];
        assert!((r + 0.25).abs() < 1e-15);
    }

    #[test]
    fn gzdp_needs_enough_slow_components() {
        let m = cstr_model();
        assert!(gzdp_components(&m, &SimMethod::gzdp(2)).is_ok());
        let json = r#"{"name":"t","states":["a","b","c"],"slow":["a"],"fast":["b","c"],
            "epsilon":0.1,"rhs":{"a":"-a","b":"-b","c":"-c"},"objective":"0","horizon":1,
            "initial":{"a":1}}"#;
        let t = OcpModel::from_json(json).unwrap();
        assert!(gzdp_components(&t, &SimMethod::gzdp(2)).is_err());
    }

    #[test]
    fn unger_point_enzyme_near_slow_set() {
        let m = enzyme_model();
        let p = unger_local_point(&m, &[1.0], &[0.0], &[0.45]).unwrap();
        assert!((p.z_f[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn manifold_sensitivity_matches_closed_form() {
        let m = enzyme_model();
        let zs = ad::seed_hyper(&[2.0]);
        let p = manifold_point(&m, &SimMethod::zdp(2), &zs, &[ad::HyperDual::constant(0.0)], &[0.5]).unwrap();
        // h(z) = z / (z + 1): h' = 1/(z+1)^2, h'' = -2/(z+1)^3
        assert!((p.z_f[0].value - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.z_f[0].grad(0) - 1.0 / 9.0).abs() < 1e-12);
        assert!((p.z_f[0].hess(0, 0) + 2.0 / 27.0).abs() < 1e-12);
    }
}
