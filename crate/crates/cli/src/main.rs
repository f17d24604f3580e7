use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use delaynet::anneal::{alpha_check, anneal, select_best, AnnealSchedule, EarlyStop};
use delaynet::data::{add_noise, load_series, rescale, save_series, Lorenz96Config, TimeSeries};
use delaynet::embed::{
    average_mutual_information, delay_vectors, false_nearest_neighbors, first_minimum,
    select_embedding_dimension, EmbeddingSpec,
};
use delaynet::evaluate::{closed_loop_series, evaluate, one_step_series, write_predictions_csv};
use delaynet::experiments::{run_experiment, Experiment, Profile, SweepConfig};
use delaynet::lyap::{estimate_spectrum, JacobianParams};
use delaynet::netaction::{Activation, Architecture, PairLibrary, Weights};
use delaynet::optim::LbfgsConfig;

#[derive(Parser)]
#[command(name = "delaynet", version, about = "Delay embedding and precision-annealed network training")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate Lorenz96 and write one observed component.
    Generate(GenerateArgs),
    /// Add Gaussian noise scaled to the series range.
    Noise(NoiseArgs),
    /// Map a series onto [-1, 1].
    Rescale(RescaleArgs),
    /// Average mutual information versus delay.
    Ami(AmiArgs),
    /// False nearest neighbors versus dimension.
    Fnn(FnnArgs),
    /// Lyapunov spectrum from local Jacobians of the delay reconstruction.
    Lyapunov(LyapunovArgs),
    /// Train a network by precision annealing.
    Train(TrainArgs),
    /// Training and validation error of saved weights.
    Evaluate(EvaluateArgs),
    /// One-step or closed-loop prediction table.
    Predict(PredictArgs),
    /// Run a parameter sweep.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 5)]
    d: usize,
    #[arg(long, default_value_t = 8.15)]
    f: f64,
    #[arg(long, default_value_t = 0.05)]
    dt: f64,
    /// Integration steps, including the discarded transient.
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 10_000)]
    discard: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Half-width of the initial perturbation around x_i = F.
    #[arg(long, default_value_t = 0.01)]
    perturbation: f64,
    /// Observed component (0-based).
    #[arg(long, default_value_t = 0)]
    component: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    sigma_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RescaleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to store the scale parameters as JSON.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct AmiArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 50)]
    tau_max: usize,
    #[arg(long, default_value_t = 128)]
    bins: usize,
    /// CSV of (tau, ami_bits); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FnnArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 7)]
    tau: usize,
    #[arg(long, default_value_t = 10)]
    dmax: usize,
    #[arg(long, default_value_t = 15.0)]
    rtol: f64,
    #[arg(long, default_value_t = 2.0)]
    atol: f64,
    /// FNN fraction below which a dimension is accepted.
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
    /// CSV of (d, fnn_fraction); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LyapunovArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 7)]
    tau: usize,
    #[arg(long, default_value_t = 5)]
    de: usize,
    /// Defaults to 2 (de + 1).
    #[arg(long)]
    neighbors: Option<usize>,
    /// Sampling interval; 1 gives exponents per sample.
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    /// Fit only the first N trajectory points.
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbeddingArgs {
    #[arg(long, default_value_t = 7)]
    tau: usize,
    #[arg(long, default_value_t = 5)]
    de: usize,
}

impl EmbeddingArgs {
    fn spec(&self) -> Result<EmbeddingSpec> {
        Ok(EmbeddingSpec::new(self.tau, self.de)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Rescaled series.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    embedding: EmbeddingArgs,
    #[arg(long, default_value_t = 400)]
    m: usize,
    /// Total layer count, input and output included.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 15)]
    dh: usize,
    #[arg(long, default_value_t = 1.1)]
    alpha: f64,
    #[arg(long, default_value_t = 20)]
    ninit: usize,
    #[arg(long, default_value_t = 1e-8)]
    rf0: f64,
    #[arg(long, default_value_t = 1e11)]
    rfmax: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    w0: f64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    gtol: f64,
    /// Linear output layer instead of tanh.
    #[arg(long)]
    identity_output: bool,
    #[arg(long)]
    bias: bool,
    /// Stop once the lowest level has settled and dominates.
    #[arg(long)]
    early_stop: bool,
    /// Also run with sqrt(alpha) and report the change in the lowest level.
    #[arg(long)]
    alpha_check: bool,
    /// AnnealRecord JSON.
    #[arg(long)]
    out: PathBuf,
    /// Best weights JSON.
    #[arg(long)]
    weights_out: Option<PathBuf>,
    /// Action levels per step as CSV.
    #[arg(long)]
    levels_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Rescaled noisy series the network was trained on.
    #[arg(long)]
    input: PathBuf,
    /// Clean series on the same scale, for noise-free error.
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long, default_value_t = 400)]
    m: usize,
    #[arg(long)]
    m_total: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictMode {
    OneStep,
    ClosedLoop,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long, value_enum, default_value_t = PredictMode::OneStep)]
    mode: PredictMode,
    /// Index of the first delay vector used.
    #[arg(long, default_value_t = 400)]
    start: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    experiment: String,
    #[arg(long, default_value = "ci")]
    profile: String,
    /// Rescaled series.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    m_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    dh_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    lf_values: Option<Vec<usize>>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    m_total: Option<usize>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Noise(a) => noise(a),
        Command::Rescale(a) => rescale_cmd(a),
        Command::Ami(a) => ami(a),
        Command::Fnn(a) => fnn(a),
        Command::Lyapunov(a) => lyapunov(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn load(path: &Path) -> Result<TimeSeries> {
    load_series(path).with_context(|| format!("reading {}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = Lorenz96Config {
        dim: a.d,
        forcing: a.f,
        dt: a.dt,
        n_total: a.n,
        n_discard: a.discard,
        seed: a.seed,
        perturbation: a.perturbation,
        observed: a.component,
    };
    let ts = cfg.generate()?;
    save_series(&a.out, &ts)?;
    info!("wrote {} samples to {}", ts.len(), a.out.display());
    Ok(())
}

fn noise(a: NoiseArgs) -> Result<()> {
    let ts = load(&a.input)?;
    let noisy = add_noise(&ts, a.sigma_frac, a.seed)?;
    save_series(&a.out, &noisy)?;
    Ok(())
}

fn rescale_cmd(a: RescaleArgs) -> Result<()> {
    let ts = load(&a.input)?;
    let (scaled, params) = rescale(&ts)?;
    save_series(&a.out, &scaled)?;
    let json = serde_json::to_string_pretty(&params)?;
    match a.params {
        Some(p) => write_text(&p, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn ami(a: AmiArgs) -> Result<()> {
    let ts = load(&a.input)?;
    let curve = average_mutual_information(ts.values(), a.tau_max, a.bins)?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "tau,ami_bits")?;
    for (t, v) in curve.taus.iter().zip(&curve.ami_bits) {
        writeln!(out, "{t},{v:e}")?;
    }
    out.flush()?;
    match first_minimum(&curve)? {
        Some(t) => info!("first minimum at tau = {t}"),
        None => info!("no interior minimum up to tau = {}", a.tau_max),
    }
    Ok(())
}

fn fnn(a: FnnArgs) -> Result<()> {
    let ts = load(&a.input)?;
    let curve = false_nearest_neighbors(ts.values(), a.tau, a.dmax, a.rtol, a.atol)?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "d,fnn_fraction")?;
    for (d, v) in curve.dims.iter().zip(&curve.fnn_fraction) {
        writeln!(out, "{d},{v:e}")?;
    }
    out.flush()?;
    match select_embedding_dimension(&curve, a.threshold) {
        Ok(d) => info!("embedding dimension {d}"),
        Err(e) => info!("{e}"),
    }
    Ok(())
}

fn lyapunov(a: LyapunovArgs) -> Result<()> {
    let ts = load(&a.input)?;
    let dv = delay_vectors(ts.values(), EmbeddingSpec::new(a.tau, a.de)?)?;
    let mut p = JacobianParams::defaults_for(&dv);
    if let Some(k) = a.neighbors {
        p.n_neighbors = k;
    }
    p.max_points = a.max_points;
    let res = estimate_spectrum(&dv, &p, a.dt)?;
    let mut out = output(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &res)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ts = load(&a.input)?;
    let spec = a.embedding.spec()?;
    let lib = PairLibrary::from_series(ts.values(), spec, a.m, None)?;
    let mut arch = Architecture::mlp(spec.d_e, a.layers, a.dh)?;
    if a.identity_output {
        arch.output = Activation::Identity;
    }
    arch.bias = a.bias;
    let mut schedule = AnnealSchedule::spanning(a.rf0, a.rfmax, a.alpha, a.ninit, a.seed)?;
    schedule.w0 = a.w0;
    if a.early_stop {
        schedule.early_stop = Some(EarlyStop::default());
    }
    let opt = LbfgsConfig {
        max_iters: a.max_iters,
        grad_tol: a.gtol,
        ..LbfgsConfig::default()
    };
    info!(
        "annealing {} steps x {} inits on {} pairs",
        schedule.n_steps, schedule.n_inits, a.m
    );
    let record = if a.alpha_check {
        let (coarse, _, check) = alpha_check(&lib, &arch, &schedule, &opt)?;
        println!("{}", serde_json::to_string_pretty(&check)?);
        coarse
    } else {
        anneal(&lib, &arch, &schedule, &opt)?
    };
    write_text(&a.out, &record.to_json()?)?;
    let best = select_best(&record)?;
    info!(
        "best init {} with action {:.6e}, gap {:?}",
        best.best_init, best.best_action, best.gap
    );
    if let Some(p) = a.weights_out {
        write_text(&p, &best.weights.to_json()?)?;
    }
    if let Some(p) = a.levels_csv {
        record.write_levels_csv(BufWriter::new(File::create(&p)?))?;
    }
    Ok(())
}

fn load_weights(path: &Path) -> Result<Weights> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Weights::from_json(&text)?)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let w = load_weights(&a.weights)?;
    let ts = load(&a.input)?;
    let spec = EmbeddingSpec::new(a.tau.unwrap_or(7), w.arch.input_width())?;
    let lib = PairLibrary::from_series(ts.values(), spec, a.m, a.m_total)?;
    let clean = match &a.clean {
        Some(p) => Some(PairLibrary::from_series(load(p)?.values(), spec, a.m, a.m_total)?),
        None => None,
    };
    let report = evaluate(&w, &lib, clean.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let w = load_weights(&a.weights)?;
    let ts = load(&a.input)?;
    let spec = EmbeddingSpec::new(a.tau.unwrap_or(7), w.arch.input_width())?;
    let rows = match a.mode {
        PredictMode::OneStep => one_step_series(&w, ts.values(), spec, a.start, a.steps)?,
        PredictMode::ClosedLoop => closed_loop_series(&w, ts.values(), spec, a.start, a.steps)?,
    };
    let mut out = output(a.out.as_deref())?;
    write_predictions_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let exp: Experiment = a.experiment.parse()?;
    let profile: Profile = a.profile.parse()?;
    let mut cfg = SweepConfig::for_experiment(exp, profile, a.seed);
    if let Some(v) = a.m_values {
        cfg.m_values = v;
    }
    if let Some(v) = a.dh_values {
        cfg.dh_values = v;
    }
    if let Some(v) = a.lf_values {
        cfg.lf_values = v;
    }
    if let Some(t) = a.tau {
        cfg.spec.tau = t;
    }
    cfg.m_total = a.m_total;
    let ts = load(&a.input)?;
    if ts.len() < cfg.spec.window() + 1 {
        bail!("series too short for the embedding");
    }
    let out = run_experiment(exp, &cfg, ts.values(), &a.out)?;
    for f in &out.files {
        info!("wrote {}", f.display());
    }
    Ok(())
}
