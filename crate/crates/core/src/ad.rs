//! Forward-mode automatic differentiation.
//!
//! Two number types are provided: [`Dual`], a first-order dual number that is
//! generic over its component type (so duals can be nested to reach higher
//! derivatives), and [`HyperDual`], which carries a dense gradient and Hessian
//! for exact second derivatives. Empty partial vectors denote constants, which
//! lets constants mix freely with seeded variables of any dimension.
//!
//! All model code in this crate is written against the [`Real`] trait and is
//! evaluated with `f64`, `Dual<_>` or `HyperDual` as required.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;
use smallvec::SmallVec;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("input shape mismatch: expected {expected} values, got {got}")]
    InputShape { expected: usize, got: usize },
    #[error("invalid time-derivative order {0} (supported: 1..=4)")]
    InvalidOrder(usize),
}

/// Scalar arithmetic shared by `f64` and the dual number types.
pub trait Real:
    Clone
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Highest derivative order carried by the type (0 for `f64`).
    const DERIV_ORDER: usize;

    fn cst(v: f64) -> Self;
    /// The underlying real value with all infinitesimal parts dropped.
    fn value(&self) -> f64;
    fn powi(&self, n: i32) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }
}

impl Real for f64 {
    const DERIV_ORDER: usize = 0;

    fn cst(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
}

/// Lifts a slice of plain values into constants of type `T`.
pub fn constants<T: Real>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::cst(v)).collect()
}

/// Drops all derivative information.
pub fn values<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(Real::value).collect()
}

// ---------------------------------------------------------------------------
// First-order dual numbers
// ---------------------------------------------------------------------------

/// First-order dual number `value + Σ partials[i]·εᵢ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual<T = f64> {
    pub value: T,
    /// Empty for constants; otherwise of the seed dimension.
    pub partials: Vec<T>,
}

impl<T: Real> Dual<T> {
    pub fn constant(value: T) -> Self {
        Self {
            value,
            partials: Vec::new(),
        }
    }

    /// The `index`-th of `dim` independent variables.
    pub fn variable(value: T, index: usize, dim: usize) -> Self {
        let mut partials = vec![T::zero(); dim];
        partials[index] = T::one();
        Self { value, partials }
    }

    /// Partial derivative `i`, zero for constants.
    pub fn partial(&self, i: usize) -> T {
        self.partials.get(i).cloned().unwrap_or_else(T::zero)
    }

    fn chain(&self, f: T, df: T) -> Self {
        Self {
            value: f,
            partials: self.partials.iter().map(|p| p.clone() * df.clone()).collect(),
        }
    }
}

fn zip_with<T: Clone>(a: &[T], b: &[T], f: impl Fn(T, T) -> T, neg_b: impl Fn(T) -> T) -> Vec<T> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Vec::new(),
        (false, true) => a.to_vec(),
        (true, false) => b.iter().cloned().map(neg_b).collect(),
        (false, false) => {
            assert_eq!(a.len(), b.len(), "dual partial length mismatch");
            a.iter().cloned().zip(b.iter().cloned()).map(|(x, y)| f(x, y)).collect()
        }
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            value: self.value + rhs.value,
            partials: zip_with(&self.partials, &rhs.partials, |a, b| a + b, |b| b),
        }
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self {
            value: self.value - rhs.value,
            partials: zip_with(&self.partials, &rhs.partials, |a, b| a - b, |b| -b),
        }
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let partials = match (self.partials.is_empty(), rhs.partials.is_empty()) {
            (true, true) => Vec::new(),
            (false, true) => self.partials.into_iter().map(|p| p * rhs.value.clone()).collect(),
            (true, false) => rhs.partials.into_iter().map(|p| p * self.value.clone()).collect(),
            (false, false) => {
                assert_eq!(self.partials.len(), rhs.partials.len(), "dual partial length mismatch");
                self.partials
                    .into_iter()
                    .zip(rhs.partials)
                    .map(|(a, b)| a * rhs.value.clone() + b * self.value.clone())
                    .collect()
            }
        };
        Self {
            value: self.value * rhs.value,
            partials,
        }
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = T::one() / rhs.value.clone();
        let value = self.value.clone() * inv.clone();
        let partials = match (self.partials.is_empty(), rhs.partials.is_empty()) {
            (true, true) => Vec::new(),
            (false, true) => self.partials.into_iter().map(|p| p * inv.clone()).collect(),
            (true, false) => rhs
                .partials
                .into_iter()
                .map(|p| -(p * value.clone() * inv.clone()))
                .collect(),
            (false, false) => {
                assert_eq!(self.partials.len(), rhs.partials.len(), "dual partial length mismatch");
                self.partials
                    .into_iter()
                    .zip(rhs.partials)
                    .map(|(a, b)| (a - b * value.clone()) * inv.clone())
                    .collect()
            }
        };
        Self { value, partials }
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            value: -self.value,
            partials: self.partials.into_iter().map(|p| -p).collect(),
        }
    }
}

impl<T: Real> Add<f64> for Dual<T> {
    type Output = Self;
    fn add(mut self, rhs: f64) -> Self {
        self.value = self.value + rhs;
        self
    }
}

impl<T: Real> Sub<f64> for Dual<T> {
    type Output = Self;
    fn sub(mut self, rhs: f64) -> Self {
        self.value = self.value - rhs;
        self
    }
}

impl<T: Real> Mul<f64> for Dual<T> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self {
            value: self.value * rhs,
            partials: self.partials.into_iter().map(|p| p * rhs).collect(),
        }
    }
}

impl<T: Real> Div<f64> for Dual<T> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<T: Real> Real for Dual<T> {
    const DERIV_ORDER: usize = 1 + T::DERIV_ORDER;

    fn cst(v: f64) -> Self {
        Self::constant(T::cst(v))
    }
    fn value(&self) -> f64 {
        self.value.value()
    }
    fn powi(&self, n: i32) -> Self {
        match n {
            0 => Self::one(),
            1 => self.clone(),
            _ => {
                let f = self.value.powi(n);
                let df = self.value.powi(n - 1) * f64::from(n);
                self.chain(f, df)
            }
        }
    }
    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e.clone(), e)
    }
    fn ln(&self) -> Self {
        let d = T::one() / self.value.clone();
        self.chain(self.value.ln(), d)
    }
    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        let d = T::cst(0.5) / s.clone();
        self.chain(s, d)
    }
}

// ---------------------------------------------------------------------------
// Second-order (gradient + Hessian) numbers
// ---------------------------------------------------------------------------

/// Inline capacity of [`HyperDual`]: blocks up to this many variables never
/// touch the heap.
pub const HYPER_INLINE: usize = 6;

type GradBuf = SmallVec<[f64; HYPER_INLINE]>;
type HessBuf = SmallVec<[f64; HYPER_INLINE * (HYPER_INLINE + 1) / 2]>;

/// Value with dense gradient and symmetric Hessian, the latter stored as
/// the packed lower triangle (`(i, j)` with `j ≤ i` at `i(i+1)/2 + j`).
#[derive(Clone, Debug, PartialEq)]
pub struct HyperDual {
    pub value: f64,
    /// Empty for constants.
    gradient: GradBuf,
    /// Empty for constants and for affine expressions of constants.
    hessian: HessBuf,
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    i * (i + 1) / 2 + j
}

impl HyperDual {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            gradient: GradBuf::new(),
            hessian: HessBuf::new(),
        }
    }

    pub fn variable(value: f64, index: usize, dim: usize) -> Self {
        let mut gradient = GradBuf::from_elem(0.0, dim);
        gradient[index] = 1.0;
        Self {
            value,
            gradient,
            hessian: HessBuf::from_elem(0.0, dim * (dim + 1) / 2),
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn grad(&self, i: usize) -> f64 {
        self.gradient.get(i).copied().unwrap_or(0.0)
    }

    pub fn hess(&self, i: usize, j: usize) -> f64 {
        if self.hessian.is_empty() {
            0.0
        } else {
            self.hessian[packed(i, j)]
        }
    }

    /// Applies a univariate function with derivatives `f1`, `f2`.
    fn chain(&self, f: f64, f1: f64, f2: f64) -> Self {
        if self.gradient.is_empty() {
            return Self::constant(f);
        }
        let d = self.dim();
        let g = &self.gradient;
        let mut hessian = HessBuf::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            let gi = f2 * g[i];
            for j in 0..=i {
                let h = if self.hessian.is_empty() {
                    0.0
                } else {
                    self.hessian[packed(i, j)]
                };
                hessian.push(f1 * h + gi * g[j]);
            }
        }
        Self {
            value: f,
            gradient: g.iter().map(|g| f1 * g).collect(),
            hessian,
        }
    }

    pub fn scale(mut self, s: f64) -> Self {
        self.value *= s;
        self.gradient.iter_mut().for_each(|g| *g *= s);
        self.hessian.iter_mut().for_each(|h| *h *= s);
        self
    }

    fn recip(&self) -> Self {
        let v = self.value;
        let inv = 1.0 / v;
        self.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }
}

fn axpy_into<A: smallvec::Array<Item = f64>>(dst: &mut SmallVec<A>, src: &[f64], s: f64) {
    if src.is_empty() {
        return;
    }
    if dst.is_empty() {
        dst.extend(src.iter().map(|v| v * s));
    } else {
        assert_eq!(dst.len(), src.len(), "hyper-dual dimension mismatch");
        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v * s);
    }
}

impl Add for HyperDual {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self.value += rhs.value;
        axpy_into(&mut self.gradient, &rhs.gradient, 1.0);
        axpy_into(&mut self.hessian, &rhs.hessian, 1.0);
        self
    }
}

impl Sub for HyperDual {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self.value -= rhs.value;
        axpy_into(&mut self.gradient, &rhs.gradient, -1.0);
        axpy_into(&mut self.hessian, &rhs.hessian, -1.0);
        self
    }
}

impl Mul for HyperDual {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        if self.gradient.is_empty() {
            return rhs.scale(self.value);
        }
        if rhs.gradient.is_empty() {
            return self.scale(rhs.value);
        }
        let d = self.dim();
        assert_eq!(d, rhs.dim(), "hyper-dual dimension mismatch");
        let (a, b) = (self.value, rhs.value);
        let (ga, gb) = (&self.gradient, &rhs.gradient);
        let (ha, hb) = (&self.hessian, &rhs.hessian);
        let mut hessian = HessBuf::with_capacity(d * (d + 1) / 2);
        let mut k = 0;
        for i in 0..d {
            let (gai, gbi) = (ga[i], gb[i]);
            for j in 0..=i {
                let mut h = gai * gb[j] + gbi * ga[j];
                if !hb.is_empty() {
                    h += a * hb[k];
                }
                if !ha.is_empty() {
                    h += b * ha[k];
                }
                hessian.push(h);
                k += 1;
            }
        }
        let gradient = (0..d).map(|i| a * gb[i] + b * ga[i]).collect();
        Self {
            value: a * b,
            gradient,
            hessian,
        }
    }
}

impl Div for HyperDual {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        if rhs.gradient.is_empty() {
            return self.scale(1.0 / rhs.value);
        }
        self * rhs.recip()
    }
}

impl Neg for HyperDual {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Add<f64> for HyperDual {
    type Output = Self;
    fn add(mut self, rhs: f64) -> Self {
        self.value += rhs;
        self
    }
}

impl Sub<f64> for HyperDual {
    type Output = Self;
    fn sub(mut self, rhs: f64) -> Self {
        self.value -= rhs;
        self
    }
}

impl Mul<f64> for HyperDual {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.scale(rhs)
    }
}

impl Div<f64> for HyperDual {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.scale(1.0 / rhs)
    }
}

impl Real for HyperDual {
    const DERIV_ORDER: usize = 2;

    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn powi(&self, n: i32) -> Self {
        let v = self.value;
        match n {
            0 => Self::constant(1.0),
            1 => self.clone(),
            _ => {
                let nf = f64::from(n);
                self.chain(v.powi(n), nf * v.powi(n - 1), nf * (nf - 1.0) * v.powi(n - 2))
            }
        }
    }
    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }
    fn ln(&self) -> Self {
        let v = self.value;
        self.chain(v.ln(), 1.0 / v, -1.0 / (v * v))
    }
    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * s * s))
    }
}

// ---------------------------------------------------------------------------
// Function traits and derivative drivers
// ---------------------------------------------------------------------------

/// A smooth map `ℝⁿ → ℝᵐ` that can be evaluated on any [`Real`] type.
pub trait VectorFn {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval<T: Real>(&self, x: &[T]) -> Vec<T>;
}

/// A smooth map `ℝⁿ → ℝ`.
pub trait ScalarFn {
    fn input_dim(&self) -> usize;
    fn eval<T: Real>(&self, x: &[T]) -> T;
}

/// Map with no outputs; the constraint set of an unconstrained problem.
#[derive(Debug, Clone, Copy)]
pub struct NoConstraints(pub usize);

impl VectorFn for NoConstraints {
    fn input_dim(&self) -> usize {
        self.0
    }
    fn output_dim(&self) -> usize {
        0
    }
    fn eval<T: Real>(&self, _x: &[T]) -> Vec<T> {
        Vec::new()
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), AdError> {
    if expected == got {
        Ok(())
    } else {
        Err(AdError::InputShape { expected, got })
    }
}

/// Seeds `x` as independent first-order variables.
pub fn seed<T: Real>(x: &[T]) -> Vec<Dual<T>> {
    let n = x.len();
    x.iter()
        .enumerate()
        .map(|(i, v)| Dual::variable(v.clone(), i, n))
        .collect()
}

/// Seeds `x` as independent second-order variables.
pub fn seed_hyper(x: &[f64]) -> Vec<HyperDual> {
    let n = x.len();
    x.iter()
        .enumerate()
        .map(|(i, &v)| HyperDual::variable(v, i, n))
        .collect()
}

/// Jacobian rows of already-evaluated dual outputs (`n` columns).
pub fn jacobian_rows<T: Real>(out: &[Dual<T>], n: usize) -> Vec<Vec<T>> {
    out.iter().map(|o| (0..n).map(|j| o.partial(j)).collect()).collect()
}

/// Dense Jacobian of `f` at `x`.
pub fn jacobian<F: VectorFn>(f: &F, x: &[f64]) -> Result<DMatrix<f64>, AdError> {
    check_dim(f.input_dim(), x.len())?;
    let n = x.len();
    let out = f.eval(&seed(x));
    Ok(DMatrix::from_fn(out.len(), n, |i, j| out[i].partial(j)))
}

/// Gradient of a scalar function.
pub fn gradient<F: ScalarFn>(f: &F, x: &[f64]) -> Result<Vec<f64>, AdError> {
    check_dim(f.input_dim(), x.len())?;
    let y = f.eval(&seed(x));
    Ok((0..x.len()).map(|j| y.partial(j)).collect())
}

/// Directional derivative of `g` at `x` along `v`, generic in the base type.
pub fn directional<T, G>(g: G, x: &[T], v: &[T]) -> Vec<T>
where
    T: Real,
    G: FnOnce(&[Dual<T>]) -> Vec<Dual<T>>,
{
    let y: Vec<Dual<T>> = x
        .iter()
        .zip(v)
        .map(|(xi, vi)| Dual {
            value: xi.clone(),
            partials: vec![vi.clone()],
        })
        .collect();
    g(&y).into_iter().map(|o| o.partial(0)).collect()
}

fn lie1<T: Real, F: VectorFn>(f: &F, x: &[T]) -> Vec<T> {
    f.eval(x)
}

fn lie2<T: Real, F: VectorFn>(f: &F, x: &[T]) -> Vec<T> {
    let v = f.eval(x);
    directional(|y| lie1(f, y), x, &v)
}

fn lie3<T: Real, F: VectorFn>(f: &F, x: &[T]) -> Vec<T> {
    let v = f.eval(x);
    directional(|y| lie2(f, y), x, &v)
}

fn lie4<T: Real, F: VectorFn>(f: &F, x: &[T]) -> Vec<T> {
    let v = f.eval(x);
    directional(|y| lie3(f, y), x, &v)
}

/// `k`-th total time derivative of the solution of `ẋ = f(x)` through `x`
/// (`k = 1` is `f` itself). Supports `1 ≤ k ≤ 4`.
pub fn lie_derivative<T: Real, F: VectorFn>(f: &F, x: &[T], k: usize) -> Result<Vec<T>, AdError> {
    check_dim(f.input_dim(), x.len())?;
    match k {
        1 => Ok(lie1(f, x)),
        2 => Ok(lie2(f, x)),
        3 => Ok(lie3(f, x)),
        4 => Ok(lie4(f, x)),
        _ => Err(AdError::InvalidOrder(k)),
    }
}

/// The first `m` total time derivatives of `ẋ = f(x)` at `x`.
pub fn time_derivatives<T: Real, F: VectorFn>(f: &F, x: &[T], m: usize) -> Result<Vec<Vec<T>>, AdError> {
    if m == 0 || m > 4 {
        return Err(AdError::InvalidOrder(m));
    }
    (1..=m).map(|k| lie_derivative(f, x, k)).collect()
}

/// Hessian of `objective + Σ multipliers[i]·constraints[i]` at `x`.
pub fn hessian_lagrangian<O: ScalarFn, C: VectorFn>(
    objective: &O,
    constraints: &C,
    x: &[f64],
    multipliers: &[f64],
) -> Result<DMatrix<f64>, AdError> {
    check_dim(objective.input_dim(), x.len())?;
    check_dim(constraints.input_dim(), x.len())?;
    check_dim(constraints.output_dim(), multipliers.len())?;
    let n = x.len();
    let xs = seed_hyper(x);
    let mut lag = objective.eval(&xs);
    for (c, &l) in constraints.eval(&xs).into_iter().zip(multipliers) {
        lag = lag + c * l;
    }
    let h = DMatrix::from_fn(n, n, |i, j| lag.hess(i, j));
    // symmetrize away rounding asymmetry
    Ok((&h + h.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear;
    impl VectorFn for Linear {
        fn input_dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn eval<T: Real>(&self, x: &[T]) -> Vec<T> {
            vec![x[0].clone() * 2.0, x[0].clone() + x[1].clone() * 3.0]
        }
    }

    struct EnzymeFast {
        zs: f64,
    }
    impl VectorFn for EnzymeFast {
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn eval<T: Real>(&self, x: &[T]) -> Vec<T> {
            vec![-(x[0].clone() * (self.zs + 1.0)) + self.zs]
        }
    }

    struct Identity(usize);
    impl VectorFn for Identity {
        fn input_dim(&self) -> usize {
            self.0
        }
        fn output_dim(&self) -> usize {
            self.0
        }
        fn eval<T: Real>(&self, x: &[T]) -> Vec<T> {
            x.to_vec()
        }
    }

    struct ConstVel;
    impl VectorFn for ConstVel {
        fn input_dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn eval<T: Real>(&self, x: &[T]) -> Vec<T> {
            vec![x[1].clone(), T::zero()]
        }
    }

    struct X1sqX2;
    impl ScalarFn for X1sqX2 {
        fn input_dim(&self) -> usize {
            2
        }
        fn eval<T: Real>(&self, x: &[T]) -> T {
            x[0].powi(2) * x[1].clone()
        }
    }

    struct HalfNormSq(usize);
    impl ScalarFn for HalfNormSq {
        fn input_dim(&self) -> usize {
            self.0
        }
        fn eval<T: Real>(&self, x: &[T]) -> T {
            x.iter().fold(T::zero(), |acc, v| acc + v.clone() * v.clone()) * 0.5
        }
    }

    struct Zero(usize);
    impl ScalarFn for Zero {
        fn input_dim(&self) -> usize {
            self.0
        }
        fn eval<T: Real>(&self, _x: &[T]) -> T {
            T::zero()
        }
    }

    struct Bilinear;
    impl VectorFn for Bilinear {
        fn input_dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn eval<T: Real>(&self, x: &[T]) -> Vec<T> {
            vec![x[0].clone() * x[1].clone()]
        }
    }

    #[test]
    fn jacobian_of_linear_map_is_matrix() {
        let j = jacobian(&Linear, &[0.3, -1.7]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 3.0]));
    }

    #[test]
    fn jacobian_enzyme_fast_field() {
        let f = EnzymeFast { zs: 1.0 };
        let j = jacobian(&f, &[0.37]).unwrap();
        assert_eq!(j[(0, 0)], -2.0);
        let h = 1e-6;
        let fd = (f.eval(&[0.37 + h])[0] - f.eval(&[0.37 - h])[0]) / (2.0 * h);
        assert!((fd + 2.0).abs() < 1e-8);
    }

    #[test]
    fn jacobian_identity_and_shape_error() {
        let j = jacobian(&Identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(j, DMatrix::identity(3, 3));
        assert_eq!(
            jacobian(&Identity(3), &[1.0]),
            Err(AdError::InputShape { expected: 3, got: 1 })
        );
    }

    #[test]
    fn time_derivatives_examples() {
        let d = time_derivatives(&Identity(1), &[3.0], 3).unwrap();
        assert_eq!(d, vec![vec![3.0], vec![3.0], vec![3.0]]);
        let d = time_derivatives(&ConstVel, &[1.0, 5.0], 2).unwrap();
        assert_eq!(d, vec![vec![5.0, 0.0], vec![0.0, 0.0]]);
        let d = time_derivatives(&EnzymeFast { zs: 1.0 }, &[0.4], 2).unwrap();
        assert!((d[1][0] + 0.4).abs() < 1e-15);
        assert_eq!(time_derivatives(&Identity(1), &[1.0], 0), Err(AdError::InvalidOrder(0)));
    }

    #[test]
    fn fourth_derivative_of_exponential_growth() {
        let d = time_derivatives(&Identity(1), &[2.5], 4).unwrap();
        assert!(d.iter().all(|v| v[0] == 2.5));
    }

    #[test]
    fn hessian_examples() {
        let h = hessian_lagrangian(&HalfNormSq(3), &NoConstraints(3), &[1.0, -2.0, 0.5], &[]).unwrap();
        assert_eq!(h, DMatrix::identity(3, 3));
        let h = hessian_lagrangian(&X1sqX2, &NoConstraints(2), &[1.0, 2.0], &[]).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 0.0]));
        let h = hessian_lagrangian(&Zero(2), &Bilinear, &[0.7, -0.2], &[3.0]).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 3.0, 0.0]));
        assert!(matches!(
            hessian_lagrangian(&Zero(2), &Bilinear, &[0.7, -0.2], &[3.0, 1.0]),
            Err(AdError::InputShape { .. })
        ));
    }

    #[test]
    fn hyperdual_transcendental_functions() {
        let x = seed_hyper(&[0.8]);
        let y = x[0].exp() * x[0].ln() + x[0].sqrt() / x[0].clone();
        // f = e^x ln x + x^{-1/2}
        let v = 0.8f64;
        let f1 = v.exp() * v.ln() + v.exp() / v - 0.5 * v.powf(-1.5);
        let f2 = v.exp() * v.ln() + 2.0 * v.exp() / v - v.exp() / (v * v) + 0.75 * v.powf(-2.5);
        assert!((y.grad(0) - f1).abs() < 1e-12);
        assert!((y.hess(0, 0) - f2).abs() < 1e-12);
    }

    #[test]
    fn nested_duals_give_second_derivative() {
        // f(x) = x^3, second derivative 6x via Dual<Dual<f64>>
        let x = 1.7;
        let inner = Dual::variable(x, 0, 1);
        let outer = Dual::variable(inner, 0, 1);
        let y = outer.powi(3);
        assert!((y.partial(0).partial(0) - 6.0 * x).abs() < 1e-12);
    }
}
