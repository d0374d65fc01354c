//! Measurements shared by the property tests and the acceptance report.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simshoot::ad::{self, HyperDual, Real, VectorFn};
use simshoot::model::{cstr_model, enzyme_model, FullDynamics, OcpModel};
use simshoot::nlpsolve::{self, SolverOptions, SolverResult, SolverStatus};
use simshoot::odeint::{self, ButcherTableau, Integrator, NewtonOptions, OdeError, OdeSystem};
use simshoot::sim::{self, SimMethod};
use simshoot::transcribe::{ShootingGrid, TranscribedOcp, Transcription};

/// `ẋ = -x`, integrated from 1 to `t = 1`.
struct Decay;

impl OdeSystem for Decay {
    fn dim(&self) -> usize {
        1
    }
    fn rhs<T: Real>(&self, x: &[T], _p: &[T]) -> Result<Vec<T>, OdeError> {
        Ok(vec![-x[0].clone()])
    }
    fn integrand<T: Real>(&self, _x: &[T], _p: &[T]) -> Result<T, OdeError> {
        Ok(T::zero())
    }
}

fn decay_error(integrator: Integrator, steps: usize) -> f64 {
    let r = odeint::integrate(
        &Decay,
        &[1.0],
        &[],
        1.0,
        steps,
        integrator,
        NewtonOptions {
            tol: 1e-15,
            max_iters: 20,
        },
    )
    .expect("decay integrates");
    (r.state_next[0] - (-1f64).exp()).abs()
}

/// Error ratio `e(h) / e(h/2)` on the decay problem.
pub fn order_ratio(integrator: Integrator) -> f64 {
    let n = match integrator {
        Integrator::Rk4 => 8,
        Integrator::Radau => 2,
    };
    decay_error(integrator, n) / decay_error(integrator, 2 * n)
}

pub fn radau_stiff_decay() -> f64 {
    ButcherTableau::radau_iia3().stability(-1e6).abs()
}

/// Dense polynomial map `ℝⁿ → ℝᵐ` with random integer exponents up to 3.
struct Poly {
    n: usize,
    terms: Vec<Vec<(f64, Vec<i32>)>>,
}

impl Poly {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=3);
        let terms = (0..m)
            .map(|_| {
                (0..rng.gen_range(1..=5))
                    .map(|_| (rng.gen_range(-2.0..2.0), (0..n).map(|_| rng.gen_range(0..=3)).collect()))
                    .collect()
            })
            .collect();
        Poly { n, terms }
    }
}

impl VectorFn for Poly {
    fn input_dim(&self) -> usize {
        self.n
    }
    fn output_dim(&self) -> usize {
        self.terms.len()
    }
    fn eval<T: Real>(&self, x: &[T]) -> Vec<T> {
        self.terms
            .iter()
            .map(|row| {
                row.iter().fold(T::zero(), |acc, (c, pows)| {
                    let mono = pows.iter().zip(x).fold(T::cst(*c), |p, (&k, xi)| p * xi.powi(k));
                    acc + mono
                })
            })
            .collect()
    }
}

/// Worst relative disagreement between AD and central differences for
/// Jacobians and Hessians of `trials` random polynomial systems.
pub fn ad_vs_fd_worst(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    for _ in 0..trials {
        let f = Poly::random(&mut rng);
        let x: Vec<f64> = (0..f.n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let h = 1e-5;
        let jac = ad::jacobian(&f, &x).expect("jacobian");
        let hx: Vec<HyperDual> = ad::seed_hyper(&x);
        let hout = f.eval(&hx);
        for j in 0..f.n {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f.eval(&xp), f.eval(&xm));
            let jp = ad::jacobian(&f, &xp).expect("jacobian");
            let jm = ad::jacobian(&f, &xm).expect("jacobian");
            for i in 0..f.output_dim() {
                worst = worst.max(rel((fp[i] - fm[i]) / (2.0 * h), jac[(i, j)]));
                for k in 0..f.n {
                    let fd = (jp[(i, k)] - jm[(i, k)]) / (2.0 * h);
                    worst = worst.max(rel(fd, hout[i].hess(k, j)));
                }
            }
        }
    }
    worst
}

/// Largest `‖ψ‖∞` at points returned by `zdp_point` on both models.
pub fn zdp_residual_worst() -> f64 {
    let mut worst = 0.0f64;
    let enzyme = enzyme_model();
    for m in 1..=4 {
        for zs in [0.1, 0.5, 1.0, 3.0, 8.0] {
            for u in [0.0, 2.5, 10.0] {
                let p = sim::zdp_point(&enzyme, &[zs], &[u], m, &[0.3]).expect("enzyme zdp");
                let r = sim::zdp_residual(&enzyme, &[zs], &p.z_f, &[u], m, false).expect("residual");
                worst = worst.max(r.iter().fold(0.0, |a, v| a.max(v.abs())));
            }
        }
    }
    let cstr = cstr_model();
    for m in 1..=2 {
        for (ca, cb) in [(0.5, 0.4), (0.9, 0.1)] {
            let zs = [cb, 0.02, 0.01];
            let p = sim::zdp_point(&cstr, &zs, &[1e-3, 5e-4], m, &[ca, 0.01]).expect("cstr zdp");
            let r = sim::zdp_residual(&cstr, &zs, &p.z_f, &[1e-3, 5e-4], m, false).expect("residual");
            worst = worst.max(r.iter().fold(0.0, |a, v| a.max(v.abs())));
        }
    }
    worst
}

const LINEAR_FAST: &str = r#"{
    "name": "linear-fast", "states": ["y", "z", "w"], "controls": ["u"],
    "slow": ["y"], "fast": ["z", "w"], "sp_form": true, "epsilon": 1e-3,
    "rhs": {"y": "-y + z*w + u", "z": "y^2 - 2*z + 0.5*w", "w": "exp(-y) + z - 3*w"},
    "objective": "y^2 + u^2", "horizon": 1.0, "initial": {"y": 1, "z": 0.6, "w": 0.4}
}"#;

/// Largest pairwise difference between ZDP points of orders 1 through 4 on
/// a model whose fast field is affine in `z_f`.
pub fn m_independence_worst() -> f64 {
    let model = OcpModel::from_json(LINEAR_FAST).expect("linear model");
    let mut worst = 0.0f64;
    for y in [-1.0, 0.2, 1.5] {
        for u in [0.0, 1.0] {
            let pts: Vec<Vec<f64>> = (1..=4)
                .map(|m| sim::zdp_point(&model, &[y], &[u], m, &[0.0, 0.0]).expect("zdp").z_f)
                .collect();
            for a in &pts {
                for b in &pts {
                    for (p, q) in a.iter().zip(b) {
                        worst = worst.max((p - q).abs());
                    }
                }
            }
        }
    }
    worst
}

/// Point of the enzyme slow manifold above `z_s = target`: relax the stiff
/// dynamics from off-manifold data for many fast time constants, adjusting
/// the start by secant steps until the relaxed slow state hits the target.
fn manifold_oracle(model: &OcpModel, target: f64, u: f64) -> f64 {
    let eps = model.epsilon;
    let sys = FullDynamics(model);
    let tol = NewtonOptions {
        tol: 1e-14,
        max_iters: 30,
    };
    let relax = |zs: f64| {
        let r = odeint::integrate(
            &sys,
            &[zs, zs / (zs + 1.0) + 0.05],
            &[u],
            40.0 * eps,
            800,
            Integrator::Radau,
            tol,
        )
        .expect("relaxation");
        (r.state_next[0], r.state_next[1])
    };
    let (mut a, mut b) = (target, target - 0.01);
    let (mut fa, mut fb) = (relax(a).0 - target, relax(b).0 - target);
    for _ in 0..20 {
        if fb.abs() < 1e-14 || fa == fb {
            break;
        }
        let c = b - fb * (b - a) / (fb - fa);
        (a, fa) = (b, fb);
        b = c;
        fb = relax(b).0 - target;
    }
    relax(b).1
}

/// Log-log slope of the ZDP manifold error against `ε ∈ {1e-2, 3e-3, 1e-3}`.
pub fn eps_slope(m: usize, full_chain: bool) -> f64 {
    let method = SimMethod::zdp(m).with_full_chain(full_chain);
    let pts: Vec<(f64, f64)> = [1e-2, 3e-3, 1e-3]
        .iter()
        .map(|&eps| {
            let model = enzyme_model().with_epsilon(eps).expect("epsilon");
            let zf = manifold_oracle(&model, 1.0, 1.0);
            let p = sim::manifold_point::<f64>(&model, &method, &[1.0], &[1.0], &[zf]).expect("zdp");
            (eps.ln(), (p.z_f[0] - zf).abs().ln())
        })
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Small solves used by the KKT and manifold checks.
pub fn small_solves() -> Vec<(TranscribedOcp, SolverResult)> {
    let enzyme = enzyme_model();
    let linear = OcpModel::from_json(LINEAR_FAST).expect("linear model");
    let cases = [
        (&enzyme, 10, Transcription::full()),
        (&enzyme, 10, Transcription::reduced(SimMethod::zdp(2))),
        (&enzyme, 10, Transcription::lifted(SimMethod::zdp(2))),
        (&enzyme, 10, Transcription::lifted(SimMethod::unger())),
        (&linear, 8, Transcription::lifted(SimMethod::zdp(2))),
        (&linear, 8, Transcription::full()),
    ];
    cases
        .into_iter()
        .map(|(model, n, t)| {
            let ocp =
                TranscribedOcp::build(model, ShootingGrid::new(n, model.horizon).expect("grid"), t).expect("build");
            let r = nlpsolve::solve(&ocp.nlp, &SolverOptions::default(), None).expect("solve");
            (ocp, r)
        })
        .collect()
}

/// `(worst KKT residual among converged results, converged count, total)`.
pub fn kkt_at_convergence(solves: &[(TranscribedOcp, SolverResult)]) -> (f64, usize, usize) {
    let conv: Vec<_> = solves
        .iter()
        .filter(|(_, r)| r.status == SolverStatus::Converged)
        .collect();
    let worst = conv.iter().fold(0.0f64, |a, (_, r)| a.max(r.kkt_residual));
    (worst, conv.len(), solves.len())
}

/// Largest `|ψ|` over the manifold nodes of every lifted solution.
pub fn lifted_psi_worst(solves: &[(TranscribedOcp, SolverResult)]) -> f64 {
    let mut worst = 0.0f64;
    for (ocp, r) in solves {
        let Some(method) = ocp
            .config
            .sim
            .clone()
            .filter(|_| ocp.config.variant == simshoot::transcribe::Variant::Lifted)
        else {
            continue;
        };
        let model = &ocp.model;
        let traj = ocp.extract_solution(&r.variables).expect("trajectory");
        for (x, u) in traj.states.iter().zip(&traj.controls) {
            let psi = sim::psi(model, &method, &model.slow_part(x), &model.fast_part(x), u).expect("psi");
            worst = worst.max(psi.iter().fold(0.0, |a, v| a.max(v.abs())));
        }
    }
    worst
}

/// Largest `|Σ reaction rates| / max |rate|` of the CSTR over random states.
pub fn cstr_mass_worst(samples: usize, seed: u64) -> f64 {
    let model = cstr_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..2.0)).collect();
        x.push(rng.gen_range(0.005..0.02));
        let f = model.reaction_rhs(&x).expect("cstr has reactions");
        let scale = f.iter().fold(f64::MIN_POSITIVE, |a, v| a.max(v.abs()));
        worst = worst.max(f[..4].iter().sum::<f64>().abs() / scale);
    }
    worst
}
