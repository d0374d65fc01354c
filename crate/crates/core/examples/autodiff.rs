// Exact first and second derivatives with dual and hyper-dual numbers.

use simshoot::ad::{self, HyperDual, Real, ScalarFn};

/// Rosenbrock's banana function in two variables.
struct Rosenbrock;

impl ScalarFn for Rosenbrock {
    fn input_dim(&self) -> usize {
        2
    }
    fn eval<T: Real>(&self, x: &[T]) -> T {
        let a = T::one() - x[0].clone();
        let b = x[1].clone() - x[0].clone() * x[0].clone();
        a.clone() * a + b.clone() * b * 100.0
    }
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let x = [-1.2, 1.0];

    let g = ad::gradient(&Rosenbrock, &x)?;
    println!("gradient at {x:?}: {g:?}");

    let hx: Vec<HyperDual> = ad::seed_hyper(&x);
    let f = Rosenbrock.eval(&hx);
    println!("f = {:.6}", f.value());
    for i in 0..2 {
        println!("  H[{i}] = [{:>10.3}, {:>10.3}]", f.hess(i, 0), f.hess(i, 1));
    }

    // Analytic check.
    let expected = [
        -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
        200.0 * (x[1] - x[0] * x[0]),
    ];
    for (a, b) in g.iter().zip(expected) {
        if (a - b).abs() > 1e-12 * b.abs().max(1.0) {
            return Err(format!("gradient mismatch: {a} vs {b}").into());
        }
    }
    let h00 = 2.0 - 400.0 * (x[1] - 3.0 * x[0] * x[0]);
    if (f.hess(0, 0) - h00).abs() > 1e-9 || (f.hess(0, 1) + 400.0 * x[0]).abs() > 1e-9 {
        return Err("hessian mismatch".into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
