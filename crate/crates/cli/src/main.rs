use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use ukmp::io as uio;
use ukmp::lqr::{infinite_horizon_gains_from, weight_from_cov};
use ukmp::sim::scenarios::{make_scenario, ScenarioName, DEMO_RATE};
use ukmp::sim::run_scenario;
use ukmp::{uncertainty_limit, Error, KmpHyperparams, KmpModel, LinearSystem, Result};

#[derive(Parser)]
#[command(name = "ukmp", version, about = "Uncertainty-aware kernelized movement primitives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a KMP to demonstrations and save it as JSON.
    Train(TrainArgs),
    /// Predict mean, covariance and uncertainty ratio at query inputs.
    Predict(PredictArgs),
    /// Compute LQR stiffness and damping at query inputs.
    Gains(GainsArgs),
    /// Run a built-in scenario and write a trace CSV plus a JSON sidecar.
    Simulate(SimulateArgs),
    /// Write the synthetic demonstrations of a scenario and its inputs at every control step.
    Scenario(ScenarioArgs),
    /// Print the far-field covariance limit.
    Limit(LimitArgs),
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.1)]
    lengthscale: f64,
    #[arg(long = "sigma-f2", default_value_t = 1.0)]
    sigma_f2: f64,
}

impl HyperArgs {
    fn build(&self) -> Result<KmpHyperparams> {
        let h = KmpHyperparams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lengthscale: self.lengthscale,
            sigma_f2: self.sigma_f2,
        };
        h.validate()?;
        Ok(h)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Demonstration CSV (`demo,t,in_*,out_*`).
    #[arg(long)]
    demos: PathBuf,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Gaussian mixture components.
    #[arg(long, default_value_t = 3)]
    components: usize,
    /// Reference points sampled from the mixture.
    #[arg(long = "reference-points", default_value_t = 500)]
    reference_points: usize,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, env = "UKMP_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Query CSV (`in_*`).
    #[arg(long)]
    queries: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GainsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Control penalty, used as `r·I`.
    #[arg(long, default_value_t = 1e-2)]
    r: f64,
    /// Velocity tracking weight `κ`.
    #[arg(long = "velocity-weight", default_value_t = 0.0)]
    velocity_weight: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// toy1d, handover, painting or painting_full.
    #[arg(long)]
    scenario: String,
    #[arg(long, env = "UKMP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long = "out-dir", default_value = ".")]
    out_dir: PathBuf,
    /// Control period in seconds.
    #[arg(long)]
    dt: Option<f64>,
    /// Run length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Control penalty, used as `r·I`.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long = "velocity-weight")]
    velocity_weight: Option<f64>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    name: String,
    #[arg(long, env = "UKMP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long = "out-dir", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct LimitArgs {
    #[arg(long = "sigma-f2")]
    sigma_f2: f64,
    /// Number of reference points.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    lambda2: f64,
    /// Output dimension.
    #[arg(long)]
    dim: usize,
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn scenario_name(s: &str) -> Result<ScenarioName> {
    ScenarioName::from_str(s)
}

fn train(a: &TrainArgs) -> Result<()> {
    let hyper = a.hyper.build()?;
    if a.components == 0 || a.reference_points == 0 {
        return Err(Error::InvalidArgument(
            "components and reference points must be at least 1".into(),
        ));
    }
    let demos = uio::parse_demonstrations(&a.demos)?;
    let model = KmpModel::from_demonstrations(&demos, a.components, a.reference_points, hyper, a.seed)?;
    uio::save_model(&a.out, &model)?;
    log::info!(
        "trained on {} demonstrations, {} reference points -> {}",
        demos.len(),
        model.len(),
        a.out.display()
    );
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let model = uio::load_model(&a.model)?;
    let queries = uio::parse_queries(&a.queries)?;
    uio::write_predictions(output(a.out.as_deref())?, &model, &queries)
}

fn gains(a: &GainsArgs) -> Result<()> {
    positive("r", a.r)?;
    let model = uio::load_model(&a.model)?;
    let queries = uio::parse_queries(&a.queries)?;
    let n_c = model.dim_out();
    let sys = LinearSystem::double_integrator(n_c);
    let r = DMatrix::identity(n_c, n_c) * a.r;
    let mut all = Vec::with_capacity(queries.len());
    let mut warm = None;
    for (i, q) in queries.iter().enumerate() {
        let g = model
            .predict_cov(q)
            .and_then(|cov| weight_from_cov(&cov, a.velocity_weight))
            .and_then(|w| infinite_horizon_gains_from(&sys, &w, &r, warm.as_ref()))
            .map_err(|e| Error::AtIndex {
                index: i,
                source: Box::new(e),
            })?;
        warm = Some(g.clone());
        all.push(g);
    }
    uio::write_gains(output(a.out.as_deref())?, &queries, &all)
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let name = scenario_name(&a.scenario)?;
    let mut scenario = make_scenario(name, a.seed)?;
    if let Some(dt) = a.dt {
        scenario.dt = positive("dt", dt)?;
    }
    if let Some(d) = a.duration {
        scenario.duration = positive("duration", d)?;
    }
    if let Some(r) = a.r {
        let n = scenario.r.nrows();
        scenario.r = DMatrix::identity(n, n) * positive("r", r)?;
    }
    if let Some(k) = a.velocity_weight {
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::InvalidArgument(format!("velocity weight must be non-negative, got {k}")));
        }
        scenario.velocity_weight = k;
    }
    let config = scenario.train()?;
    let trace = run_scenario(&config)?;

    fs::create_dir_all(&a.out_dir)?;
    let csv_path = a.out_dir.join(format!("{name}_trace.csv"));
    let json_path = a.out_dir.join(format!("{name}_trace.json"));
    uio::write_trace(BufWriter::new(File::create(&csv_path)?), &trace)?;
    uio::write_sidecar(BufWriter::new(File::create(&json_path)?), &config, Some(name.as_str()))?;
    println!("{}", csv_path.display());
    println!("{}", json_path.display());
    Ok(())
}

fn scenario(a: &ScenarioArgs) -> Result<()> {
    let name = scenario_name(&a.name)?;
    let scenario = make_scenario(name, a.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    for s in &scenario.subtasks {
        let path = a.out_dir.join(format!("{}_demos.csv", s.label));
        uio::write_demonstrations(
            BufWriter::new(File::create(&path)?),
            &s.demonstrations,
            1.0 / DEMO_RATE,
        )?;
        println!("{}", path.display());
    }
    let path = a.out_dir.join(format!("{name}_queries.csv"));
    let steps = (scenario.duration / scenario.dt).round() as usize;
    let queries: Vec<_> = (0..=steps)
        .map(|k| scenario.input_signal.at(k as f64 * scenario.dt))
        .collect();
    uio::write_queries(BufWriter::new(File::create(&path)?), &queries)?;
    println!("{}", path.display());
    Ok(())
}

fn limit(a: &LimitArgs) -> Result<()> {
    positive("sigma-f2", a.sigma_f2)?;
    positive("lambda2", a.lambda2)?;
    if a.n == 0 || a.dim == 0 {
        return Err(Error::InvalidArgument("n and dim must be at least 1".into()));
    }
    let hyper = KmpHyperparams {
        lambda1: 1.0,
        lambda2: a.lambda2,
        lengthscale: 1.0,
        sigma_f2: a.sigma_f2,
    };
    let m = uncertainty_limit(&hyper, a.n, a.dim);
    let mut out = io::stdout().lock();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", cells.join(" "))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Gains(a) => gains(a),
        Command::Simulate(a) => simulate(a),
        Command::Scenario(a) => scenario(a),
        Command::Limit(a) => limit(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
