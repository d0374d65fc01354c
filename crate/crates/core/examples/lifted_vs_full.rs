// Lifted shooting on the slow manifold compared with full shooting.
//
// The lifted variant keeps the fast state as a decision variable pinned to
// the ZDP manifold and integrates only the slow dynamics with RK4.

use simshoot::model::enzyme_model;
use simshoot::nlpsolve::SolverOptions;
use simshoot::report;
use simshoot::sim::SimMethod;
use simshoot::transcribe::{ShootingGrid, TranscribedOcp, Transcription};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = enzyme_model();
    let opts = SolverOptions::default();
    let build = |t: Transcription| -> Result<TranscribedOcp, Box<dyn std::error::Error>> {
        Ok(TranscribedOcp::build(&model, ShootingGrid::new(40, model.horizon)?, t)?)
    };

    let full = report::solve_timed(&build(Transcription::full())?, &opts, 1)?;
    let lifted = report::solve_timed(&build(Transcription::lifted(SimMethod::zdp(2)))?, &opts, 1)?;

    let cmp = report::compare(&full, &lifted)?;
    println!("{cmp}");

    let zs = cmp.signal("z_s").map(|d| d.abs_inf).unwrap_or(f64::NAN);
    if !(cmp.objective_rel_delta < 0.01 && zs < 0.1) {
        return Err(format!(
            "variants disagree: objective rel {:.3e}, z_s {:.3e}",
            cmp.objective_rel_delta, zs
        )
        .into());
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
