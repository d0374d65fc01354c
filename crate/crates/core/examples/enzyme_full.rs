// Full multiple shooting for the enzyme OCP with Radau IIA intervals.

use simshoot::model::enzyme_model;
use simshoot::nlpsolve::{SolverOptions, SolverStatus};
use simshoot::report::{self, Solution};
use simshoot::transcribe::{ShootingGrid, TranscribedOcp, Transcription};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = enzyme_model();
    let grid = ShootingGrid::new(40, model.horizon)?;
    let ocp = TranscribedOcp::build(&model, grid, Transcription::full())?;
    let s = ocp.summary();
    println!(
        "{} full: {} variables, {} constraints",
        s.model, s.n_vars, s.n_constraints
    );

    let (result, wall) = report::timed_solve(&ocp, &SolverOptions::default(), 1)?;
    println!(
        "{} after {} iterations, objective {:.4}, KKT {:.1e}, {:.3}s",
        result.status, result.iterations, result.objective, result.kkt_residual, wall
    );
    if result.status != SolverStatus::Converged {
        return Err(format!("solver stopped with {}", result.status).into());
    }

    let sol = Solution::from_result(&ocp, &result, wall);
    let u = sol.trajectory.control_series(0);
    let peak = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "u(0) = {:.4}, max u = {:.4}, u(N-1) = {:.2e}",
        u[0],
        peak,
        u[u.len() - 1]
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
