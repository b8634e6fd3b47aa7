use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use mfg_convex::carleman::{carleman_sweep, CarlemanParams};
use mfg_convex::experiments::{
    build_dataset, generate_to, run_experiment, sweep_lambda, ExperimentSpec, TestCase,
};
use mfg_convex::functional::{gradient_check, make_lifting, Objective};
use mfg_convex::grid::GridSpec;
use mfg_convex::optimizer::{initial_guess, DescentMethod, RunStatus};
use mfg_convex::MfgError;

#[derive(Parser)]
#[command(name = "mfg", version, about = "Retrospective mean field games by convexification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(ExperimentArgs),
    /// Run one inversion and write its artifacts.
    Invert(ExperimentArgs),
    /// Run one inversion per lambda value on a shared dataset.
    Sweep(ExperimentArgs),
    /// Evaluate the Carleman estimate ratios on the built-in test family.
    DiagCarleman(CarlemanArgs),
    /// Compare the analytic gradient with central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Default)]
struct ExperimentArgs {
    /// JSON file with an experiment spec; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// poly, trig or cshape.
    #[arg(long)]
    test_case: Option<String>,
    /// Dataset directory to invert instead of generating data.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    fine_n: Option<usize>,
    #[arg(long)]
    fine_nt: Option<usize>,
    #[arg(long)]
    coarse_n: Option<usize>,
    #[arg(long)]
    coarse_nt: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    f: Option<f64>,
    #[arg(long)]
    kernel: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated list for `sweep`.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    reg_order: Option<usize>,
    #[arg(long)]
    step0: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    ball_radius: Option<f64>,
    #[arg(long)]
    lbfgs: bool,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    symmetric_noise: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CarlemanArgs {
    #[arg(long, default_value_t = 41)]
    n: usize,
    #[arg(long, default_value_t = 41)]
    nt: usize,
    #[arg(long, default_value_t = 1.01)]
    a: f64,
    #[arg(long, default_value_t = 0.02)]
    beta: f64,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6")]
    lambdas: Vec<f64>,
    /// Write the report as JSON here instead of printing CSV.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, default_value_t = 20)]
    directions: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest relative error accepted.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

fn parse_case(name: &str) -> Result<TestCase, MfgError> {
    match name {
        "poly" => Ok(TestCase::Poly),
        "trig" => Ok(TestCase::Trig),
        "cshape" => Ok(TestCase::Cshape),
        other => Err(MfgError::Config(format!("unknown test case {other:?}"))),
    }
}

impl ExperimentArgs {
    fn spec(&self) -> Result<ExperimentSpec, MfgError> {
        let mut spec: ExperimentSpec = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| MfgError::Config(format!("{}: {e}", path.display())))?,
            None => ExperimentSpec::default(),
        };
        if let Some(c) = &self.test_case {
            spec.test_case = parse_case(c)?;
        }
        if let Some(path) = &self.dataset {
            spec.test_case = TestCase::CustomFile { path: path.clone() };
        }
        let fine = (
            self.fine_n.unwrap_or(spec.fine_grid.nx),
            self.fine_nt.unwrap_or(spec.fine_grid.nt),
        );
        spec.fine_grid = GridSpec::unit_square(fine.0, fine.1)?;
        let coarse = (
            self.coarse_n.unwrap_or(spec.coarse_grid.nx),
            self.coarse_nt.unwrap_or(spec.coarse_grid.nt),
        );
        spec.coarse_grid = GridSpec::unit_square(coarse.0, coarse.1)?;
        let m = &mut spec.model;
        m.beta = self.beta.unwrap_or(m.beta);
        m.s = self.s.unwrap_or(m.s);
        m.f = self.f.unwrap_or(m.f);
        m.kernel = self.kernel.unwrap_or(m.kernel);
        let fp = &mut spec.functional;
        fp.carleman = CarlemanParams::relaxed(
            self.a.unwrap_or(fp.carleman.a),
            self.lambda.unwrap_or(fp.carleman.lambda),
        )?;
        fp.gamma = self.gamma.unwrap_or(fp.gamma);
        fp.c1 = self.c1.unwrap_or(fp.c1);
        fp.reg_order = self.reg_order.unwrap_or(fp.reg_order);
        if let Some(l) = &self.lambdas {
            spec.lambdas = l.clone();
        }
        let o = &mut spec.optimizer;
        o.step0 = self.step0.unwrap_or(o.step0);
        o.max_iters = self.max_iters.unwrap_or(o.max_iters);
        o.grad_tol = self.grad_tol.unwrap_or(o.grad_tol);
        if self.ball_radius.is_some() {
            o.ball_radius = self.ball_radius;
        }
        if self.lbfgs {
            o.method = DescentMethod::Lbfgs;
        }
        let n = &mut spec.noise;
        n.delta = self.delta.unwrap_or(n.delta);
        n.seed = self.noise_seed.unwrap_or(n.seed);
        n.symmetric |= self.symmetric_noise;
        if self.output.is_some() {
            spec.output = self.output.clone();
        }
        spec.validate().map_err(|e| match e {
            MfgError::Config(_) => e,
            other => MfgError::Config(other.to_string()),
        })?;
        Ok(spec)
    }
}

fn exit_code(e: &MfgError) -> u8 {
    match e {
        MfgError::Numeric(_) | MfgError::Cfl { .. } => 3,
        MfgError::Io(_) | MfgError::Csv(_) => 1,
        _ => 2,
    }
}

fn status_code(status: RunStatus) -> u8 {
    match status {
        RunStatus::LineSearchFailure => 4,
        _ => 0,
    }
}

fn run(cli: Cli) -> Result<u8, MfgError> {
    match cli.command {
        Command::Generate(args) => {
            let spec = args.spec()?;
            let dir = spec
                .output
                .clone()
                .ok_or_else(|| MfgError::Config("generate needs --output".into()))?;
            generate_to(&spec, &dir)?;
            println!("dataset written to {}", dir.display());
            Ok(0)
        }
        Command::Invert(args) => {
            let spec = args.spec()?;
            let outcome = run_experiment(&spec)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
            Ok(status_code(outcome.summary.status))
        }
        Command::Sweep(args) => {
            let spec = args.spec()?;
            let table = sweep_lambda(&spec)?;
            println!("lambda,u_e,p_e,status,iterations");
            for r in &table.rows {
                println!(
                    "{},{},{},{:?},{}",
                    r.lambda,
                    r.u_e.map_or(String::new(), |v| format!("{v:.4}")),
                    r.p_e.map_or(String::new(), |v| format!("{v:.4}")),
                    r.status,
                    r.iterations
                );
            }
            let worst = table.rows.iter().map(|r| status_code(r.status)).max();
            Ok(worst.unwrap_or(0))
        }
        Command::DiagCarleman(args) => {
            let grid = GridSpec::unit_square(args.n, args.nt)?;
            let report = carleman_sweep(&grid, args.a, &args.lambdas, args.beta)?;
            match &args.output {
                Some(path) => std::fs::write(path, serde_json::to_string_pretty(&report)?)?,
                None => {
                    println!("lambda,member,forward,backward");
                    for r in &report.rows {
                        println!("{},{},{:.6e},{:.6e}", r.lambda, r.member, r.forward, r.backward);
                    }
                }
            }
            println!(
                "min forward ratio {:.6e}, min backward ratio {:.6e}",
                report.min_forward, report.min_backward
            );
            Ok(if report.all_positive() { 0 } else { 3 })
        }
        Command::GradCheck(args) => {
            let mut spec = args.experiment.spec()?;
            spec.noise.delta = 0.0;
            let data = build_dataset(&spec)?;
            let lift = make_lifting(&data)?;
            let objective = Objective::new(&spec.functional, &data.coeffs, &lift)?;
            let at = initial_guess(&data)?;
            let check = gradient_check(&objective, &at, args.directions, args.eps, args.seed)?;
            println!("max relative error {:.3e} over {} directions", check.max_rel_error, args.directions);
            Ok(if check.max_rel_error < args.tol { 0 } else { 3 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
