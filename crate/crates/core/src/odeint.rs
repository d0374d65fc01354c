//! One-step Runge-Kutta integrators with an attached quadrature state.
//!
//! [`rk4_step`] is the classic explicit fourth-order method; [`radau_step`]
//! is the three-stage, order-five Radau IIA collocation method, solved by
//! full Newton iteration on the stage increments. Both integrate the Lagrange
//! integrand with the same tableau, so the discrete objective is consistent
//! with the discrete dynamics.
//!
//! Steps are generic over [`Real`]: the implicit stage system is solved in
//! plain `f64`, after which a few simplified-Newton sweeps with the frozen
//! real iteration matrix propagate exact derivatives through the implicit
//! solution (each sweep gains one derivative order).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{self, Dual, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("non-finite stage value in explicit step (stiffness or blow-up)")]
    IntegrationOverflow,
    #[error("implicit step failed after {iters} Newton iterations (residual {residual:e})")]
    ImplicitStepFailure { residual: f64, iters: usize },
    #[error("right-hand side evaluation failed: {0}")]
    Rhs(String),
}

/// Autonomous system `ẋ = f(x; p)` with a Lagrange integrand `L(x; p)`.
///
/// `p` carries everything held constant across a step (controls, frozen
/// algebraic variables).
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs<T: Real>(&self, x: &[T], p: &[T]) -> Result<Vec<T>, OdeError>;
    fn integrand<T: Real>(&self, x: &[T], p: &[T]) -> Result<T, OdeError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<T = f64> {
    pub state_next: Vec<T>,
    pub quadrature_increment: T,
    pub newton_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Radau,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn rk4() -> Self {
        Self {
            a: vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            b: vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            c: vec![0.0, 0.5, 0.5, 1.0],
        }
    }

    /// Three-stage Radau IIA. Exact entries (s = √6):
    ///
    /// ```text
    /// c = [(4-s)/10, (4+s)/10, 1]
    /// A = [(88-7s)/360     (296-169s)/1800  (-2+3s)/225]
    ///     [(296+169s)/1800 (88+7s)/360      (-2-3s)/225]
    ///     [(16-s)/36       (16+s)/36        1/9        ]
    /// ```
    pub fn radau_iia3() -> Self {
        let s6 = 6f64.sqrt();
        let a = vec![
            vec![
                (88.0 - 7.0 * s6) / 360.0,
                (296.0 - 169.0 * s6) / 1800.0,
                (-2.0 + 3.0 * s6) / 225.0,
            ],
            vec![
                (296.0 + 169.0 * s6) / 1800.0,
                (88.0 + 7.0 * s6) / 360.0,
                (-2.0 - 3.0 * s6) / 225.0,
            ],
            vec![(16.0 - s6) / 36.0, (16.0 + s6) / 36.0, 1.0 / 9.0],
        ];
        Self {
            b: a[2].clone(),
            a,
            c: vec![(4.0 - s6) / 10.0, (4.0 + s6) / 10.0, 1.0],
        }
    }

    /// Stability function `R(z) = 1 + z bᵀ (I - zA)⁻¹ 1`.
    pub fn stability(&self, z: f64) -> f64 {
        let s = self.stages();
        let m = DMatrix::from_fn(s, s, |i, j| if i == j { 1.0 } else { 0.0 } - z * self.a[i][j]);
        let ones = DVector::from_element(s, 1.0);
        let y = m.lu().solve(&ones).expect("singular stability matrix");
        1.0 + z * self.b.iter().zip(y.iter()).map(|(b, y)| b * y).sum::<f64>()
    }
}

fn add_scaled<T: Real>(x: &[T], k: &[Vec<T>], coeffs: &[f64], h: f64) -> Vec<T> {
    let mut y = x.to_vec();
    for (kj, &a) in k.iter().zip(coeffs) {
        if a != 0.0 {
            for (yi, ki) in y.iter_mut().zip(kj) {
                *yi = yi.clone() + ki.clone() * (a * h);
            }
        }
    }
    y
}

/// Classic explicit RK4 step of size `h` with quadrature.
pub fn rk4_step<T: Real, S: OdeSystem>(sys: &S, x: &[T], p: &[T], h: f64) -> Result<StepResult<T>, OdeError> {
    rk4_step_with(x, h, |_, xi| Ok((sys.rhs(xi, p)?, sys.integrand(xi, p)?)))
}

/// RK4 step driven by a stage closure returning `(f(X_i), L(X_i))`.
///
/// The closure is called exactly once per stage, in stage order, with the
/// stage index and stage value.
pub fn rk4_step_with<T, F>(x: &[T], h: f64, mut stage: F) -> Result<StepResult<T>, OdeError>
where
    T: Real,
    F: FnMut(usize, &[T]) -> Result<(Vec<T>, T), OdeError>,
{
    let tab = ButcherTableau::rk4();
    let s = tab.stages();
    let mut k: Vec<Vec<T>> = Vec::with_capacity(s);
    let mut q = T::zero();
    for i in 0..s {
        let xi = add_scaled(x, &k[..i], &tab.a[i][..i], h);
        if xi.iter().any(|v| !v.value().is_finite()) {
            return Err(OdeError::IntegrationOverflow);
        }
        let (f, l) = stage(i, &xi)?;
        q = q + l * (tab.b[i] * h);
        k.push(f);
    }
    let state_next = add_scaled(x, &k, &tab.b, h);
    if state_next.iter().any(|v| !v.value().is_finite()) || !q.value().is_finite() {
        return Err(OdeError::IntegrationOverflow);
    }
    Ok(StepResult {
        state_next,
        quadrature_increment: q,
        newton_iters: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Stage residual tolerance; also met once the Newton update reaches
    /// round-off.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 50,
        }
    }
}

struct StageSystem<'a, S> {
    sys: &'a S,
    tab: ButcherTableau,
    h: f64,
    n: usize,
}

impl<S: OdeSystem> StageSystem<'_, S> {
    fn stage_points<T: Real>(&self, x: &[T], z: &[T]) -> Vec<Vec<T>> {
        (0..self.tab.stages())
            .map(|i| {
                x.iter()
                    .zip(&z[i * self.n..(i + 1) * self.n])
                    .map(|(a, b)| a.clone() + b.clone())
                    .collect()
            })
            .collect()
    }

    /// G(Z)_i = Z_i - h Σ_j a_ij f(x + Z_j).
    fn residual<T: Real>(&self, x: &[T], p: &[T], z: &[T]) -> Result<Vec<T>, OdeError> {
        let s = self.tab.stages();
        let f: Vec<Vec<T>> = self
            .stage_points(x, z)
            .iter()
            .map(|xi| self.sys.rhs(xi, p))
            .collect::<Result<_, _>>()?;
        let mut g = z.to_vec();
        for i in 0..s {
            for (j, fj) in f.iter().enumerate() {
                let a = self.tab.a[i][j] * self.h;
                for r in 0..self.n {
                    g[i * self.n + r] = g[i * self.n + r].clone() - fj[r].clone() * a;
                }
            }
        }
        Ok(g)
    }

    fn newton_matrix(&self, x: &[f64], p: &[f64], z: &[f64]) -> Result<DMatrix<f64>, OdeError> {
        let s = self.tab.stages();
        let n = self.n;
        let pc: Vec<Dual> = ad::constants(p);
        let mut m = DMatrix::identity(s * n, s * n);
        for (j, xj) in self.stage_points(x, z).iter().enumerate() {
            let jac = ad::jacobian_rows(&self.sys.rhs(&ad::seed(xj), &pc)?, n);
            for i in 0..s {
                let a = self.tab.a[i][j] * self.h;
                for r in 0..n {
                    for c in 0..n {
                        m[(i * n + r, j * n + c)] -= a * jac[r][c];
                    }
                }
            }
        }
        Ok(m)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// One Radau IIA step. The returned state is the last stage value.
pub fn radau_step<T: Real, S: OdeSystem>(
    sys: &S,
    x: &[T],
    p: &[T],
    h: f64,
    opts: NewtonOptions,
) -> Result<StepResult<T>, OdeError> {
    let stage = StageSystem {
        sys,
        tab: ButcherTableau::radau_iia3(),
        h,
        n: sys.dim(),
    };
    let s = stage.tab.stages();
    let n = stage.n;
    let xv = ad::values(x);
    let pv = ad::values(p);

    let mut z = vec![0.0; s * n];
    let mut iters = 0;
    loop {
        let g = stage.residual(&xv, &pv, &z)?;
        let res = inf_norm(&g);
        if !res.is_finite() {
            return Err(OdeError::ImplicitStepFailure { residual: res, iters });
        }
        if res <= opts.tol {
            break;
        }
        if iters >= opts.max_iters {
            return Err(OdeError::ImplicitStepFailure { residual: res, iters });
        }
        let m = stage.newton_matrix(&xv, &pv, &z)?;
        let dz = m
            .lu()
            .solve(&DVector::from_vec(g))
            .ok_or(OdeError::ImplicitStepFailure { residual: res, iters })?;
        z.iter_mut().zip(dz.iter()).for_each(|(zi, d)| *zi -= d);
        iters += 1;
        // Stiff fields evaluate `f` with cancellation amplified by 1/ε, so
        // the residual can floor above `tol`; an update at round-off level
        // means Newton has converged as far as arithmetic allows.
        let size = 1.0 + inf_norm(&xv) + inf_norm(&z);
        if dz.amax() <= 8.0 * f64::EPSILON * size {
            break;
        }
    }

    // Polish with the converged Newton matrix: one sweep per derivative
    // order carries the implicit derivatives, and the extra sweep drives the
    // values to round-off so that they do not jump with the iteration count.
    let mut zt: Vec<T> = ad::constants(&z);
    {
        let minv = stage
            .newton_matrix(&xv, &pv, &z)?
            .try_inverse()
            .ok_or(OdeError::ImplicitStepFailure { residual: 0.0, iters })?;
        for _ in 0..=T::DERIV_ORDER {
            let g = stage.residual(x, p, &zt)?;
            zt = (0..s * n)
                .map(|r| {
                    let mut acc = zt[r].clone();
                    for (c, gc) in g.iter().enumerate() {
                        let w = minv[(r, c)];
                        if w != 0.0 {
                            acc = acc - gc.clone() * w;
                        }
                    }
                    acc
                })
                .collect();
        }
    }

    let points = stage.stage_points(x, &zt);
    let mut q = T::zero();
    for (xi, &b) in points.iter().zip(&stage.tab.b) {
        q = q + sys.integrand(xi, p)? * (b * h);
    }
    let state_next = points.into_iter().last().expect("at least one stage");
    Ok(StepResult {
        state_next,
        quadrature_increment: q,
        newton_iters: iters,
    })
}

/// Integrates over `h_total` with `steps` equal steps; returns the end state,
/// the accumulated quadrature and the total Newton iteration count.
pub fn integrate<T: Real, S: OdeSystem>(
    sys: &S,
    x0: &[T],
    p: &[T],
    h_total: f64,
    steps: usize,
    integrator: Integrator,
    newton: NewtonOptions,
) -> Result<StepResult<T>, OdeError> {
    let steps = steps.max(1);
    let h = h_total / steps as f64;
    let mut x = x0.to_vec();
    let mut q = T::zero();
    let mut iters = 0;
    for _ in 0..steps {
        let r = match integrator {
            Integrator::Rk4 => rk4_step(sys, &x, p, h)?,
            Integrator::Radau => radau_step(sys, &x, p, h, newton)?,
        };
        x = r.state_next;
        q = q + r.quadrature_increment;
        iters += r.newton_iters;
    }
    Ok(StepResult {
        state_next: x,
        quadrature_increment: q,
        newton_iters: iters,
    })
}
