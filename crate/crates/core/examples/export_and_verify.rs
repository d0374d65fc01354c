// Solves the lifted enzyme problem, writes JSON and CSV, reads them back and
// re-simulates the optimal controls through the full stiff model.

use simshoot::model::enzyme_model;
use simshoot::nlpsolve::SolverOptions;
use simshoot::odeint::NewtonOptions;
use simshoot::report::{self, Format, RunDocument};
use simshoot::sim::SimMethod;
use simshoot::transcribe::{ShootingGrid, TranscribedOcp, Transcription};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = enzyme_model();
    let ocp = TranscribedOcp::build(
        &model,
        ShootingGrid::new(40, model.horizon)?,
        Transcription::lifted(SimMethod::zdp(2)),
    )?;
    let sol = report::solve_timed(&ocp, &SolverOptions::default(), 1)?;

    let dir = std::env::temp_dir().join(format!("simshoot-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let (json, csv) = (dir.join("enzyme.json"), dir.join("enzyme.csv"));
    let doc = RunDocument::new(sol);
    report::export(&doc, &json, Format::Json)?;
    report::export(&doc, &csv, Format::Csv)?;

    let back = report::read_json(&json)?;
    let traj = report::read_csv(&csv)?;
    println!("wrote {} and {}", json.display(), csv.display());
    if traj.states != doc.solution.trajectory.states || back.solution.objective != doc.solution.objective {
        return Err("round trip changed the data".into());
    }

    let check = report::forward_check(&model, &traj, 4, NewtonOptions::default())?;
    println!("forward simulation: max node deviation {:.3e}", check.max_deviation);
    std::fs::remove_dir_all(&dir)?;
    if check.max_deviation > 0.1 {
        return Err("lifted trajectory drifts from the full model".into());
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
