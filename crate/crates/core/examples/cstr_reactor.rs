// Fed-batch CSTR with a fast reversible reaction, solved by full shooting
// on a coarse grid, followed by a mass-balance check of the solution.

use simshoot::model::cstr_model;
use simshoot::nlpsolve::{SolverOptions, SolverStatus};
use simshoot::report;
use simshoot::transcribe::{ShootingGrid, TranscribedOcp, Transcription};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = cstr_model();
    let n = 20;
    let ocp = TranscribedOcp::build(&model, ShootingGrid::new(n, model.horizon)?, Transcription::full())?;
    let sol = report::solve_timed(&ocp, &SolverOptions::default(), 1)?;
    println!(
        "cstr N={n}: {} in {} iterations, objective {:.6}, {:.2}s",
        sol.status, sol.iterations, sol.objective, sol.wall_time_s
    );
    if sol.status != SolverStatus::Converged {
        return Err(format!("solver stopped with {}", sol.status).into());
    }

    let t = &sol.trajectory;
    let last = t.states.last().ok_or("empty trajectory")?;
    for (name, v) in t.state_names.iter().zip(last) {
        println!("  {name:>4}(T) = {v:.6}");
    }
    let feed: Vec<f64> = t.control_series(0);
    let mean_q = feed.iter().sum::<f64>() / feed.len() as f64;
    println!("  mean outflow q = {mean_q:.3e}");
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
