use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use asyncdual::async_engine::run_async_with;
use asyncdual::delay::{joint_pmf, DelayDistribution};
use asyncdual::harness::{
    export_trajectories, run_experiment_on, stability_survey, DelaySpec, Dims, ExperimentConfig, ExportFormat,
};
use asyncdual::stability::{enumerate_modes, iid_kronecker_test, two_node_reference_modes, ENUMERATION_LIMIT};
use asyncdual::{sync_fixed_point, HoldPolicy, PNorm, SeparableQpProblem, TerminalStatus, Trajectory};

const CONFIG_FIELDS: &str = "\
CONFIG FILE (JSON):
  problem_seed           u64    generator seed
  dims                   {N, n, m}  blocks, block size, coupling rows
  alpha                  f64    step size for every block
  q                      usize  delay window, staleness in 0..q-1
  delay_spec             {kind: exponential, rate} | {kind: uniform}
                         | {kind: pmf, pmf: [..q]} | {kind: per_node, pmfs: [[..q]; N]}
                         | {kind: markov, transition: [[..q]; q], initial?: [..q]}
  runs                   usize  Monte Carlo runs; run r uses seed run_seed_base + r
  epsilon                f64    stop when ||y^k - y^(k-1)||_p < epsilon on an executed update
  max_iter               usize  iteration cap per run
  p                      1 | 2 | \"inf\"  norm for residuals and the gate condition
  gate_enabled           bool   hold steps whose delay pattern fails sum_j ||R_1j||_p < 1
  run_seed_base          u64
  conditioning           f64    optional, cap on cond(Q_i) (default 100)
  y0                     [f64; m]  optional, initial multiplier (default zeros)
  hold_policy            \"freshen\" | \"freeze\"  optional (default freshen)
  max_consecutive_holds  usize  optional (default 10 q)
  survey_samples         usize  optional, delay draws for `survey` (default 1000)

Without --config a built-in desk-scale experiment is used. Flags override file values.";

#[derive(Parser, Debug)]
#[command(name = "asyncdual", version, about = "Asynchronous dual ascent experiments for separable QPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a random instance and write it as problem.json.
    #[command(after_help = CONFIG_FIELDS)]
    Generate(Common),
    /// Print the stability report for the instance and delay law.
    #[command(after_help = CONFIG_FIELDS)]
    Survey(Common),
    /// Run synchronous dual ascent once.
    #[command(name = "run-sync", after_help = CONFIG_FIELDS)]
    RunSync(Common),
    /// Run one asynchronous trajectory (run index 0 of the config).
    #[command(name = "run-async", after_help = CONFIG_FIELDS)]
    RunAsync(Common),
    /// Run the full Monte Carlo experiment and export every trajectory.
    #[command(name = "monte-carlo", after_help = CONFIG_FIELDS)]
    MonteCarlo(Common),
    /// Enumerate the companion matrices of every delay pattern (tiny instances only).
    #[command(name = "enumerate-modes", after_help = CONFIG_FIELDS)]
    EnumerateModes(Common),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Load the instance from a problem.json instead of generating it.
    #[arg(long)]
    problem: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override problem_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Override q.
    #[arg(long)]
    q: Option<usize>,
    /// Override alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override p (1, 2 or inf).
    #[arg(long)]
    p: Option<PNorm>,
    /// Override gate_enabled.
    #[arg(long, value_enum)]
    gate: Option<Toggle>,
    /// Trajectory file format.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Exit with status 2 if any run stalls or diverges.
    #[arg(long)]
    strict: bool,
}

/// Validation failures exit 1, everything after setup exits 2.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn invalid(e: impl std::fmt::Display) -> Self {
        Failure::Invalid(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn default_config() -> ExperimentConfig {
    ExperimentConfig {
        problem_seed: 1,
        dims: Dims { n_blocks: 10, n: 4, m: 3 },
        alpha: 0.0125,
        q: 5,
        delay_spec: DelaySpec::Exponential { rate: 1.2 },
        runs: 50,
        epsilon: 1e-10,
        max_iter: 100_000,
        p: PNorm::Two,
        gate_enabled: true,
        run_seed_base: 1000,
        conditioning: 10.0,
        y0: None,
        hold_policy: HoldPolicy::Freshen,
        max_consecutive_holds: None,
        survey_samples: 1000,
    }
}

struct Setup {
    config: ExperimentConfig,
    problem: SeparableQpProblem,
    dist: DelayDistribution,
}

fn setup(args: &Common) -> Result<Setup, Failure> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(Failure::invalid)?,
        None => default_config(),
    };
    if let Some(s) = args.seed {
        cfg.problem_seed = s;
    }
    if let Some(r) = args.runs {
        cfg.runs = r;
    }
    if let Some(q) = args.q {
        cfg.q = q;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(p) = args.p {
        cfg.p = p;
    }
    if let Some(g) = args.gate {
        cfg.gate_enabled = matches!(g, Toggle::On);
    }
    let problem = match &args.problem {
        Some(path) => {
            let p = SeparableQpProblem::load(path).map_err(Failure::invalid)?;
            cfg.dims = Dims {
                n_blocks: p.n_blocks(),
                n: p.blocks()[0].dim(),
                m: p.m(),
            };
            match args.alpha {
                Some(a) => p.with_alpha(a).map_err(Failure::invalid)?,
                None => p,
            }
        }
        None => {
            cfg.validate().map_err(Failure::invalid)?;
            cfg.problem().map_err(Failure::invalid)?
        }
    };
    cfg.validate().map_err(Failure::invalid)?;
    let dist = cfg.distribution().map_err(Failure::invalid)?;
    Ok(Setup {
        config: cfg,
        problem,
        dist,
    })
}

fn format_of(f: Format) -> ExportFormat {
    match f {
        Format::Csv => ExportFormat::Csv,
        Format::Json => ExportFormat::Json,
    }
}

fn vec_str(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.10e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn write_trajectory(t: &Trajectory, dir: &Path, stem: &str, format: Format) -> Result<PathBuf, Failure> {
    prepare_out(dir)?;
    let (path, text) = match format {
        Format::Csv => (dir.join(format!("{stem}.csv")), t.to_csv()),
        Format::Json => (dir.join(format!("{stem}.json")), t.to_json()),
    };
    write(&path, &text)?;
    Ok(path)
}

fn strict_check(strict: bool, statuses: impl IntoIterator<Item = TerminalStatus>) -> Result<(), Failure> {
    if !strict {
        return Ok(());
    }
    let bad: Vec<TerminalStatus> = statuses
        .into_iter()
        .filter(|s| matches!(s, TerminalStatus::Stalled | TerminalStatus::Diverged))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("strict mode: {} run(s) stalled or diverged", bad.len())))
    }
}

fn generate(args: &Common) -> Result<(), Failure> {
    let s = setup(args)?;
    prepare_out(&args.out)?;
    let path = args.out.join("problem.json");
    s.problem.save(&path).map_err(Failure::runtime)?;
    let (lo, hi) = s.problem.curvature_bounds();
    println!(
        "generated N={} n={} m={} seed={} -> {}",
        s.config.dims.n_blocks,
        s.config.dims.n,
        s.config.dims.m,
        s.config.problem_seed,
        path.display()
    );
    println!("curvature eigenvalues of sum A_i Q_i^-1 A_i': [{lo:.6e}, {hi:.6e}]");
    Ok(())
}

fn survey(args: &Common) -> Result<(), Failure> {
    let s = setup(args)?;
    let rep = stability_survey(
        &s.problem,
        &s.dist,
        s.config.survey_samples,
        s.config.p,
        s.config.run_seed_base,
    )
    .map_err(Failure::runtime)?;
    let c = &rep.norm_condition_samples;
    println!("bertsekas_rho     {:.10}", rep.bertsekas_rho);
    println!("sync_rho          {:.10}", rep.sync_rho);
    println!("p                 {}", rep.p);
    println!("condition samples {}", c.samples);
    println!("condition min     {:.10}", c.min);
    println!("condition mean    {:.10}", c.mean);
    println!("condition max     {:.10}", c.max);
    println!("fraction < 1      {:.6}", c.fraction_below_one);
    Ok(())
}

fn run_sync_cmd(args: &Common) -> Result<(), Failure> {
    let s = setup(args)?;
    let t = asyncdual::run_sync(&s.problem, &s.config.initial_y(), &s.config.sync_options()).map_err(Failure::runtime)?;
    let path = write_trajectory(&t, &args.out, "sync", args.format)?;
    println!("status     {}", t.terminal_status);
    println!("iterations {}", t.iterations());
    println!("final y    {}", vec_str(t.final_y()));
    println!("wrote      {}", path.display());
    strict_check(args.strict, [t.terminal_status])
}

fn run_async_cmd(args: &Common) -> Result<(), Failure> {
    let s = setup(args)?;
    let phi = s.problem.phi_set();
    let t = run_async_with(&phi, &s.dist, &s.config.initial_y(), &s.config.async_options(0)).map_err(Failure::runtime)?;
    let path = write_trajectory(&t, &args.out, "async", args.format)?;
    println!("status     {}", t.terminal_status);
    println!("iterations {}", t.iterations());
    println!("holds      {}", t.holds());
    println!("final y    {}", vec_str(t.final_y()));
    if let Ok(ystar) = sync_fixed_point(&s.problem) {
        let d = t.final_y().iter().zip(ystar.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        println!("|y - y*|   {d:.3e}");
    }
    println!("wrote      {}", path.display());
    strict_check(args.strict, [t.terminal_status])
}

fn monte_carlo(args: &Common) -> Result<(), Failure> {
    let s = setup(args)?;
    let out = run_experiment_on(&s.config, s.problem).map_err(Failure::runtime)?;
    let files = export_trajectories(&out.trajectories, &args.out, format_of(args.format)).map_err(Failure::runtime)?;
    write(&args.out.join("sync_baseline.json"), &out.sync_baseline.to_json())?;
    let summary = serde_json::to_string_pretty(&out.summary).map_err(Failure::runtime)?;
    write(&args.out.join("summary.json"), &summary)?;

    let sm = &out.summary;
    println!("runs                    {}", sm.runs.len());
    for status in [
        TerminalStatus::Converged,
        TerminalStatus::MaxIter,
        TerminalStatus::Stalled,
        TerminalStatus::Diverged,
    ] {
        println!("  {:<21} {}", status.to_string(), sm.count(status));
    }
    let max_it = sm.runs.iter().map(|r| r.iterations).max().unwrap_or(0);
    let holds: usize = sm.runs.iter().map(|r| r.holds).sum();
    println!("max iterations          {max_it}");
    println!("total holds             {holds}");
    println!("sync iterations         {} ({})", sm.sync_iterations, sm.sync_status);
    println!("y*                      {}", vec_str(&sm.y_star));
    println!("max pairwise distance   {:.3e}", sm.max_pairwise_distance);
    println!("max distance to y*      {:.3e}", sm.max_distance_to_fixed_point);
    println!("wrote {} trajectory files to {}", files.len(), args.out.display());
    strict_check(args.strict, sm.runs.iter().map(|r| r.terminal_status))
}

fn enumerate(args: &Common) -> Result<(), Failure> {
    let s = setup(args)?;
    let phi = s.problem.phi_set();
    let q = s.config.q;
    let modes = enumerate_modes(&phi, q).map_err(Failure::runtime)?;
    println!("{} modes (q = {q}, N = {})", modes.len(), phi.n_blocks());
    for (r, w) in modes.iter().enumerate() {
        print!("W_{}{}", r + 1, w);
    }
    if let Ok(pmf) = joint_pmf(&s.dist, ENUMERATION_LIMIT) {
        match iid_kronecker_test(&modes, &pmf) {
            Ok(rho) => println!("iid mean-square test rho = {rho:.10}"),
            Err(e) => println!("iid mean-square test skipped: {e}"),
        }
    }
    if q == 2 && phi.n_blocks() == 2 {
        let reference = two_node_reference_modes(&phi).map_err(Failure::runtime)?;
        if modes.iter().zip(&reference).all(|(a, b)| a == b) {
            println!("verified: modes match the two-node reference patterns");
        } else {
            return Err(Failure::Runtime("modes differ from the two-node reference patterns".into()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Survey(a) => survey(a),
        Command::RunSync(a) => run_sync_cmd(a),
        Command::RunAsync(a) => run_async_cmd(a),
        Command::MonteCarlo(a) => monte_carlo(a),
        Command::EnumerateModes(a) => enumerate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
