//! The `simshoot` command line: `solve`, `compare` and `bench`.
//!
//! Exit codes: 0 converged, 1 bad configuration or I/O failure, 2 local
//! infeasibility, 3 any other non-convergence.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, OcpModel};
use crate::nlpsolve::{SolverOptions, SolverStatus};
use crate::odeint::Integrator;
use crate::report::{self, BenchRow, Format, ReportError, RunDocument, Solution};
use crate::sim::SimMethod;
use crate::transcribe::{ObjectiveRule, ShootingGrid, TranscribeError, TranscribedOcp, Transcription};

/// Directory for result files when `--output` is not given.
pub const OUTPUT_DIR_ENV: &str = "SIMSHOOT_OUTPUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transcribe(#[from] TranscribeError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

pub fn exit_code(status: SolverStatus) -> i32 {
    match status {
        SolverStatus::Converged => EXIT_OK,
        SolverStatus::LocallyInfeasible => EXIT_INFEASIBLE,
        SolverStatus::MaxIter | SolverStatus::LineSearchFailure => EXIT_NOT_CONVERGED,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "simshoot",
    version,
    about = "Multiple-shooting optimal control with slow-manifold lifting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for block evaluation (1 disables the pool).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Stream the solver iteration log to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transcribe and solve one problem.
    Solve(SolveArgs),
    /// Solve two configurations and compare them node by node.
    Compare(CompareArgs),
    /// Regenerate the runtime/dimension tables.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Full,
    Reduced,
    Lifted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimArg {
    Zdp,
    Gzdp,
    Unger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegratorArg {
    Rk4,
    Radau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    NodeRectangle,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

/// Everything needed to replay one solve; serialized into its result file.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RunConfig {
    /// Builtin model name (`enzyme`, `cstr`) or path to a JSON model.
    #[arg(long, default_value = "enzyme")]
    pub model: String,
    #[arg(long, value_enum, default_value = "full")]
    pub variant: VariantArg,
    /// Manifold approximation (reduced/lifted only; default zdp).
    #[arg(long, value_enum)]
    pub sim: Option<SimArg>,
    /// Order of the ZDP/GZDP condition (default 2).
    #[arg(long)]
    pub m: Option<usize>,
    /// Shooting intervals (default 40 for enzyme, 140 for cstr).
    #[arg(short = 'N', long = "N")]
    #[serde(rename = "N")]
    pub n: Option<usize>,
    /// Override of the model's time-scale parameter.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Default: radau for full, rk4 otherwise.
    #[arg(long, value_enum)]
    pub integrator: Option<IntegratorArg>,
    #[arg(long, default_value_t = 1)]
    pub steps_per_interval: usize,
    /// Keep the c_A(0) pin in the lifted CSTR.
    #[arg(long)]
    pub pin_ca0: bool,
    #[arg(long, value_enum, default_value = "node-rectangle")]
    pub objective: ObjectiveArg,
    /// CSTR only: weight of the product term in the objective.
    #[arg(long)]
    pub product_weight: Option<f64>,
    #[arg(long, default_value_t = 1e-8)]
    pub kkt_tol: f64,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "enzyme".into(),
            variant: VariantArg::Full,
            sim: None,
            m: None,
            n: None,
            epsilon: None,
            integrator: None,
            steps_per_interval: 1,
            pin_ca0: false,
            objective: ObjectiveArg::NodeRectangle,
            product_weight: None,
            kkt_tol: 1e-8,
            max_iter: 300,
        }
    }
}

/// A configuration turned into a ready-to-solve NLP.
pub struct PreparedRun {
    pub model: OcpModel,
    pub ocp: TranscribedOcp,
    pub options: SolverOptions,
}

impl RunConfig {
    pub fn new(model: &str, variant: VariantArg) -> Self {
        Self {
            model: model.into(),
            variant,
            ..Self::default()
        }
    }

    pub fn with_sim(mut self, sim: SimArg, m: Option<usize>) -> Self {
        self.sim = Some(sim);
        self.m = m;
        self
    }

    /// Applies `key=value` overrides separated by commas, e.g.
    /// `variant=lifted,sim=zdp,m=2`.
    pub fn apply_overrides(&mut self, spec: &str) -> Result<(), CliError> {
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
            let bad = |e: String| CliError::Config(format!("{key}: {e}"));
            match key.trim() {
                "model" => self.model = value.to_string(),
                "variant" => self.variant = VariantArg::from_str(value, true).map_err(bad)?,
                "sim" => self.sim = Some(SimArg::from_str(value, true).map_err(bad)?),
                "m" => self.m = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
                "N" | "n" => self.n = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
                "epsilon" => self.epsilon = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
                "integrator" => self.integrator = Some(IntegratorArg::from_str(value, true).map_err(bad)?),
                "steps-per-interval" | "steps_per_interval" => {
                    self.steps_per_interval = value.parse().map_err(|e| bad(format!("{e}")))?
                }
                "pin-ca0" | "pin_ca0" => self.pin_ca0 = value.parse().map_err(|e| bad(format!("{e}")))?,
                "objective" => self.objective = ObjectiveArg::from_str(value, true).map_err(bad)?,
                "product-weight" | "product_weight" => {
                    self.product_weight = Some(value.parse().map_err(|e| bad(format!("{e}")))?)
                }
                other => return Err(CliError::Config(format!("unknown override key `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn intervals(&self, model: &OcpModel) -> usize {
        self.n.unwrap_or(if model.name == "cstr" { 140 } else { 40 })
    }

    pub fn sim_method(&self) -> Result<Option<SimMethod>, CliError> {
        if self.variant == VariantArg::Full {
            if self.sim.is_some() || self.m.is_some() {
                return Err(CliError::Config("--sim/--m do not apply to the full variant".into()));
            }
            return Ok(None);
        }
        let m = self.m.unwrap_or(2);
        let method = match self.sim.unwrap_or(SimArg::Zdp) {
            SimArg::Zdp => SimMethod::zdp(m),
            SimArg::Gzdp => SimMethod::gzdp(m),
            SimArg::Unger => {
                if self.m.is_some() {
                    return Err(CliError::Config("--m does not apply to the unger criterion".into()));
                }
                SimMethod::unger()
            }
        };
        Ok(Some(method))
    }

    pub fn load_model(&self) -> Result<OcpModel, CliError> {
        let mut model = OcpModel::load(&self.model)?;
        if let Some(eps) = self.epsilon {
            model = model.with_epsilon(eps)?;
        }
        if let Some(w) = self.product_weight {
            let p = model
                .cstr_params_mut()
                .ok_or_else(|| CliError::Config("--product-weight applies to the cstr model only".into()))?;
            p.product_weight = w;
        }
        Ok(model)
    }

    pub fn transcription(&self, model: &OcpModel) -> Result<Transcription, CliError> {
        let sim = self.sim_method()?;
        let mut t = match (self.variant, sim) {
            (VariantArg::Full, _) => Transcription::full(),
            (VariantArg::Reduced, Some(s)) => Transcription::reduced(s),
            (VariantArg::Lifted, Some(s)) => Transcription::lifted(s),
            (_, None) => unreachable!("sim_method fills reduced/lifted"),
        };
        if let Some(i) = self.integrator {
            t = t.with_integrator(match i {
                IntegratorArg::Rk4 => Integrator::Rk4,
                IntegratorArg::Radau => Integrator::Radau,
            });
        }
        t = t
            .with_steps(self.steps_per_interval)
            .with_objective(match self.objective {
                ObjectiveArg::NodeRectangle => ObjectiveRule::NodeRectangle,
                ObjectiveArg::Quadrature => ObjectiveRule::Quadrature,
            });
        if self.pin_ca0 {
            if self.variant != VariantArg::Lifted {
                return Err(CliError::Config("--pin-ca0 applies to the lifted variant only".into()));
            }
            let i = model
                .state_names
                .iter()
                .position(|s| s == "c_A")
                .ok_or_else(|| CliError::Config(format!("model `{}` has no state c_A", model.name)))?;
            t = t.with_fast_pins(vec![i]);
        }
        Ok(t)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            kkt_tol: self.kkt_tol,
            max_iter: self.max_iter,
            ..SolverOptions::default()
        }
    }

    pub fn prepare(&self, threads: Option<usize>) -> Result<PreparedRun, CliError> {
        let model = self.load_model()?;
        let grid = ShootingGrid::new(self.intervals(&model), model.horizon)?;
        let mut ocp = TranscribedOcp::build(&model, grid, self.transcription(&model)?)?;
        let workers = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
        ocp.nlp.parallel = workers > 1;
        let options = self.solver_options();
        options.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(PreparedRun { model, ocp, options })
    }

    /// Solves with median-of-`repeats` timing.
    pub fn run(&self, threads: Option<usize>, repeats: usize) -> Result<Solution, CliError> {
        let p = self.prepare(threads)?;
        Ok(report::solve_timed(&p.ocp, &p.options, repeats)?)
    }

    pub fn label(&self) -> String {
        match self.sim_method() {
            Ok(Some(s)) => format!("{:?} ({})", self.variant, s.label()).to_lowercase(),
            _ => format!("{:?}", self.variant).to_lowercase(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub config: RunConfig,
    /// Result file; defaults to `$SIMSHOOT_OUTPUT_DIR/<model>-<variant>-N<N>.<ext>`.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
    /// Solve this many times and report the median wall time.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Base configuration shared by both runs.
    #[command(flatten)]
    pub config: RunConfig,
    /// Overrides for the reference run, e.g. `variant=full`.
    #[arg(long, default_value = "variant=full")]
    pub a: String,
    /// Overrides for the second run, e.g. `variant=lifted,sim=zdp,m=2`.
    #[arg(long, default_value = "variant=lifted,sim=zdp,m=2")]
    pub b: String,
    /// Compare two result files instead of solving.
    #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with_all = ["a", "b"])]
    pub files: Option<Vec<PathBuf>>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `enzyme`, `cstr` or `all`.
    pub suite: String,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Also write the rows as JSON.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn default_output(sol: &Solution, ext: &str) -> Option<PathBuf> {
    let dir = std::env::var_os(OUTPUT_DIR_ENV)?;
    Some(Path::new(&dir).join(format!("{}-{}-N{}.{ext}", sol.model, sol.variant, sol.intervals)))
}

fn print_solution(sol: &Solution) {
    println!(
        "{} {} N={}{}: {} after {} iterations, objective {:.7}, kkt {:.2e}, {} vars / {} cons, {:.4} s",
        sol.model,
        sol.variant,
        sol.intervals,
        sol.sim.as_deref().map(|s| format!(" [{s}]")).unwrap_or_default(),
        sol.status,
        sol.iterations,
        sol.objective,
        sol.kkt_residual,
        sol.n_vars,
        sol.n_constraints,
        sol.wall_time_s
    );
}

pub fn cmd_solve(args: &SolveArgs, threads: Option<usize>) -> Result<i32, CliError> {
    let sol = args.config.run(threads, args.repeats)?;
    print_solution(&sol);
    let format = match args.format {
        FormatArg::Json => Format::Json,
        FormatArg::Csv => Format::Csv,
    };
    let ext = if format == Format::Json { "json" } else { "csv" };
    if let Some(path) = args.output.clone().or_else(|| default_output(&sol, ext)) {
        let status = sol.status;
        let mut doc = RunDocument::new(sol);
        doc.config = Some(serde_json::to_value(&args.config).expect("config serializes"));
        report::export(&doc, &path, format)?;
        println!("wrote {}", path.display());
        return Ok(exit_code(status));
    }
    Ok(exit_code(sol.status))
}

pub fn cmd_compare(args: &CompareArgs, threads: Option<usize>) -> Result<i32, CliError> {
    let (a, b, configs) = match &args.files {
        Some(files) => {
            let da = report::read_json(&files[0])?;
            let db = report::read_json(&files[1])?;
            (da.solution, db.solution, None)
        }
        None => {
            let mut ca = args.config.clone();
            ca.apply_overrides(&args.a)?;
            let mut cb = args.config.clone();
            cb.apply_overrides(&args.b)?;
            let a = ca.run(threads, args.repeats)?;
            let b = cb.run(threads, args.repeats)?;
            (a, b, Some((ca, cb)))
        }
    };
    print_solution(&a);
    print_solution(&b);
    let cmp = match report::compare(&a, &b) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_CONFIG);
        }
    };
    print!("{cmp}");
    if let Some(path) = &args.output {
        let mut doc = RunDocument::new(b.clone());
        doc.config = configs.map(|(ca, cb)| serde_json::json!({ "a": ca, "b": cb }));
        doc.comparison = Some(cmp);
        report::write_json(&doc, path)?;
        println!("wrote {}", path.display());
    }
    let worst = [a.status, b.status].into_iter().map(exit_code).max().unwrap_or(EXIT_OK);
    Ok(worst)
}

/// The rows of one benchmark suite: the methods compared for that model.
pub fn suite_configs(suite: &str) -> Result<Vec<RunConfig>, CliError> {
    let enzyme = || {
        vec![
            RunConfig::new("enzyme", VariantArg::Full),
            RunConfig::new("enzyme", VariantArg::Reduced).with_sim(SimArg::Zdp, Some(2)),
            RunConfig::new("enzyme", VariantArg::Lifted).with_sim(SimArg::Unger, None),
            RunConfig::new("enzyme", VariantArg::Lifted).with_sim(SimArg::Zdp, Some(2)),
        ]
    };
    let cstr = || {
        vec![
            RunConfig::new("cstr", VariantArg::Full),
            RunConfig::new("cstr", VariantArg::Lifted).with_sim(SimArg::Unger, None),
            RunConfig::new("cstr", VariantArg::Lifted).with_sim(SimArg::Zdp, Some(2)),
        ]
    };
    match suite {
        "enzyme" => Ok(enzyme()),
        "cstr" => Ok(cstr()),
        "all" => Ok(enzyme().into_iter().chain(cstr()).collect()),
        other => Err(CliError::Config(format!(
            "unknown suite `{other}` (expected enzyme, cstr or all)"
        ))),
    }
}

pub fn bench(suite: &str, repeats: usize, threads: Option<usize>) -> Result<Vec<BenchRow>, CliError> {
    suite_configs(suite)?
        .into_iter()
        .map(|c| {
            let sol = c.run(threads, repeats)?;
            Ok(BenchRow {
                suite: c.model.clone(),
                method: c.label(),
                runtime_s: sol.wall_time_s,
                n_vars: sol.n_vars,
                n_constraints: sol.n_constraints,
                status: sol.status,
                objective: sol.objective,
            })
        })
        .collect()
}

pub fn cmd_bench(args: &BenchArgs, threads: Option<usize>) -> Result<i32, CliError> {
    let rows = bench(&args.suite, args.repeats, threads)?;
    print!("{}", report::bench_table(&rows));
    let json = serde_json::json!({ "schema": report::SCHEMA, "suite": args.suite, "rows": rows });
    println!("{json}");
    if let Some(path) = &args.output {
        std::fs::write(path, serde_json::to_string_pretty(&json).expect("rows serialize")).map_err(|source| {
            ReportError::Io {
                path: path.display().to_string(),
                source,
            }
        })?;
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads.filter(|&n| n > 1) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let outcome = match &cli.command {
        Command::Solve(a) => cmd_solve(a, cli.threads),
        Command::Compare(a) => cmd_compare(a, cli.threads),
        Command::Bench(a) => cmd_bench(a, cli.threads),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimKind;

    fn config(args: &[&str]) -> RunConfig {
        let mut v = vec!["simshoot", "solve"];
        v.extend_from_slice(args);
        match Cli::try_parse_from(v).unwrap().command {
            Command::Solve(s) => s.config,
            _ => unreachable!(),
        }
    }

    #[test]
    fn defaults_follow_the_benchmarks() {
        let c = config(&["--model", "cstr", "--variant", "lifted"]);
        let m = c.load_model().unwrap();
        assert_eq!(c.intervals(&m), 140);
        let t = c.transcription(&m).unwrap();
        assert_eq!(t.integrator, Integrator::Rk4);
        assert_eq!(t.sim.unwrap().kind, SimKind::Zdp);
        assert!(t.pin_fast_initial.is_empty());
        assert_eq!(config(&[]).intervals(&crate::model::enzyme_model()), 40);
    }

    #[test]
    fn full_variant_rejects_sim() {
        let c = config(&["--variant", "full", "--sim", "zdp"]);
        assert!(matches!(c.sim_method(), Err(CliError::Config(_))));
    }

    #[test]
    fn pin_ca0_resolves_state_index() {
        let c = config(&["--model", "cstr", "--variant", "lifted", "--pin-ca0"]);
        let m = c.load_model().unwrap();
        assert_eq!(c.transcription(&m).unwrap().pin_fast_initial, vec![0]);
        let c = config(&["--model", "enzyme", "--variant", "lifted", "--pin-ca0"]);
        assert!(c.transcription(&c.load_model().unwrap()).is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut c = RunConfig::new("cstr", VariantArg::Full);
        c.apply_overrides("variant=lifted, sim=unger,N=12,epsilon=1e-3")
            .unwrap();
        assert_eq!(c.variant, VariantArg::Lifted);
        assert_eq!(c.sim, Some(SimArg::Unger));
        assert_eq!(c.n, Some(12));
        assert_eq!(c.epsilon, Some(1e-3));
        assert!(c.apply_overrides("colour=blue").is_err());
        assert!(c.apply_overrides("N").is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = config(&[
            "--model",
            "cstr",
            "--variant",
            "lifted",
            "--N",
            "20",
            "--product-weight",
            "1",
        ]);
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["N"], 20);
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_suite_and_model_exit_one() {
        assert_eq!(run(["simshoot", "bench", "nope"]), EXIT_CONFIG);
        assert_eq!(run(["simshoot", "solve", "--model", "nope"]), EXIT_CONFIG);
        assert_eq!(run(["simshoot", "solve", "--variant", "sideways"]), EXIT_CONFIG);
    }

    #[test]
    fn suites_have_table_shapes() {
        assert_eq!(suite_configs("enzyme").unwrap().len(), 4);
        assert_eq!(suite_configs("cstr").unwrap().len(), 3);
        assert_eq!(suite_configs("all").unwrap().len(), 7);
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(SolverStatus::Converged), 0);
        assert_eq!(exit_code(SolverStatus::LocallyInfeasible), 2);
        assert_eq!(exit_code(SolverStatus::MaxIter), 3);
        assert_eq!(exit_code(SolverStatus::LineSearchFailure), 3);
    }
}
