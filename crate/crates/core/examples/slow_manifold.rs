// Slow invariant manifold points for the enzyme model.
//
// Prints the fast state `zf` on the manifold for ZDP of increasing order and
// for Unger's local method, next to the quasi-steady-state value.

use simshoot::model::enzyme_model;
use simshoot::sim::{self, SimMethod};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = enzyme_model().with_epsilon(1e-2)?;
    let (zs, u) = ([1.0], [1.0]);
    let qss = zs[0] / (zs[0] + 1.0);
    println!("eps = 1e-2, zs = 1, u = 1, QSS zf = {qss:.10}");

    let mut previous: Option<f64> = None;
    for m in 1..=4 {
        let p = sim::zdp_point(&model, &zs, &u, m, &[qss])?;
        let step = previous.map_or(String::new(), |v| format!("  change {:.2e}", (p.z_f[0] - v).abs()));
        println!(
            "ZDP m={m}: zf = {:.10}  |psi| = {:.1e}{step}",
            p.z_f[0], p.residual_norm
        );
        previous = Some(p.z_f[0]);
    }

    let unger = sim::unger_local_point(&model, &zs, &u, &[qss])?;
    println!(
        "Unger:    zf = {:.10}  |psi| = {:.1e}",
        unger.z_f[0], unger.residual_norm
    );

    let gz = sim::manifold_point::<f64>(&model, &SimMethod::gzdp(2), &zs, &u, &[qss])?;
    println!("GZDP m=2: zf = {:.10}", gz.z_f[0]);

    if unger.residual_norm > 1e-10 {
        return Err("manifold residual above tolerance".into());
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
