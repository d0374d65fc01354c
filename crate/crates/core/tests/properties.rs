mod common;

use simshoot::cli::{self, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_OK};
use simshoot::odeint::Integrator;

#[test]
fn rk4_is_fourth_order() {
    let r = common::order_ratio(Integrator::Rk4);
    assert!((14.0..=18.0).contains(&r), "ratio {r}");
}

#[test]
fn radau_is_fifth_order() {
    let r = common::order_ratio(Integrator::Radau);
    assert!((26.0..=38.0).contains(&r), "ratio {r}");
}

#[test]
fn radau_damps_stiff_modes() {
    assert!(common::radau_stiff_decay() < 1.0);
}

#[test]
fn ad_matches_central_differences() {
    let worst = common::ad_vs_fd_worst(100, 7);
    assert!(worst <= 1e-6, "worst relative error {worst:e}");
}

#[test]
fn zdp_points_solve_their_residual() {
    let worst = common::zdp_residual_worst();
    assert!(worst <= 1e-10, "{worst:e}");
}

#[test]
fn zdp_order_irrelevant_for_affine_fast_field() {
    let worst = common::m_independence_worst();
    assert!(worst <= 1e-10, "{worst:e}");
}

#[test]
fn zdp_error_shrinks_with_epsilon() {
    let s1 = common::eps_slope(1, false);
    assert!(s1 >= 0.75, "m=1 slope {s1}");
    let s2 = common::eps_slope(2, true);
    assert!(s2 >= 1.75, "m=2 full-chain slope {s2}");
}

#[test]
fn converged_solves_meet_tolerances() {
    let solves = common::small_solves();
    let (kkt, conv, total) = common::kkt_at_convergence(&solves);
    assert_eq!(conv, total, "every small problem converges");
    assert!(kkt <= 1e-8, "kkt {kkt:e}");
    let psi = common::lifted_psi_worst(&solves);
    assert!(psi <= 1e-8, "psi {psi:e}");
}

#[test]
fn cstr_reactions_conserve_mass() {
    let worst = common::cstr_mass_worst(1000, 3);
    assert!(worst <= 1e-14, "{worst:e}");
}

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("simshoot").chain(args.iter().copied()))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("enzyme.json");
    let out = out.to_str().unwrap();
    assert_eq!(run(&["solve", "--N", "10", "--output", out]), EXIT_OK);
    assert!(std::path::Path::new(out).exists());
    assert_eq!(run(&["solve", "--model", "no-such-model"]), EXIT_CONFIG);
    assert_eq!(run(&["solve", "--variant", "full", "--sim", "zdp"]), EXIT_CONFIG);
    assert_eq!(
        run(&["solve", "--N", "10", "--max-iter", "2", "--output", out]),
        EXIT_NOT_CONVERGED
    );
    assert_eq!(run(&["bench", "nothing"]), EXIT_CONFIG);
}

proptest::proptest! {
    #[test]
    fn enzyme_first_order_zdp_is_quasi_steady_state(zs in 0.0f64..10.0, u in 0.0f64..10.0) {
        let model = simshoot::model::enzyme_model();
        let p = simshoot::sim::zdp_point(&model, &[zs], &[u], 1, &[0.5]).unwrap();
        proptest::prop_assert!((p.z_f[0] - zs / (zs + 1.0)).abs() <= 1e-12);
        let (f, _) = simshoot::model::reduced_rhs(&model, &simshoot::sim::SimMethod::zdp(1), &[zs], &[u], &[0.5]).unwrap();
        let expect = -zs + (zs + 0.5) * zs / (zs + 1.0) + u;
        proptest::prop_assert!((f[0] - expect).abs() <= 1e-11 * expect.abs().max(1.0));
    }
}
