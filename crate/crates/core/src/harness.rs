//! Seeded Monte Carlo experiments: one instance, many asynchronous runs,
//! and the synchronous baseline they should all agree with.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::async_engine::{assemble_r_blocks, run_async_with, AsyncOptions, HoldPolicy};
use crate::delay::{exponential_pmf, uniform_pmf, DelayDistribution, DelaySampler};
use crate::error::{Error, Result};
use crate::problem::{fixed_point_of, generate_random_problem, GeneratorSpec, SeparableQpProblem};
use crate::stability::{bertsekas_condition, step_condition_value, sync_radius, ConditionStats, PNorm, StabilityReport};
use crate::sync_engine::{run_sync, SyncOptions};
use crate::trajectory::{fmt_f64, write_file, TerminalStatus, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    #[serde(rename = "N")]
    pub n_blocks: usize,
    pub n: usize,
    pub m: usize,
}

/// Delay law in config form; expanded against `q` and `N` by
/// [`DelaySpec::distribution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelaySpec {
    /// `P(d = j-1) ∝ exp(-rate j)`, the same for every node.
    Exponential { rate: f64 },
    Uniform,
    /// One pmf shared by all nodes.
    Pmf { pmf: Vec<f64> },
    /// One pmf per node.
    PerNode { pmfs: Vec<Vec<f64>> },
    /// One `q x q` transition matrix shared by all nodes. Chains start from
    /// `initial`, or from staleness 0 when absent.
    Markov {
        transition: Vec<Vec<f64>>,
        #[serde(default)]
        initial: Option<Vec<f64>>,
    },
}

impl DelaySpec {
    pub fn distribution(&self, q: usize, n_nodes: usize) -> Result<DelayDistribution> {
        let check_len = |len: usize| {
            if len == q {
                Ok(())
            } else {
                Err(Error::Dimension(format!("pmf has length {len}, expected q = {q}")))
            }
        };
        match self {
            DelaySpec::Exponential { rate } => DelayDistribution::iid_shared(exponential_pmf(q, *rate)?, n_nodes),
            DelaySpec::Uniform => DelayDistribution::iid_shared(uniform_pmf(q), n_nodes),
            DelaySpec::Pmf { pmf } => {
                check_len(pmf.len())?;
                DelayDistribution::iid_shared(pmf.clone(), n_nodes)
            }
            DelaySpec::PerNode { pmfs } => {
                if pmfs.len() != n_nodes {
                    return Err(Error::Dimension(format!(
                        "{} per-node pmfs for {n_nodes} nodes",
                        pmfs.len()
                    )));
                }
                DelayDistribution::iid(q, pmfs.clone())
            }
            DelaySpec::Markov { transition, initial } => {
                check_len(transition.len())?;
                let init = initial.clone().unwrap_or_else(|| {
                    let mut v = vec![0.0; q];
                    v[0] = 1.0;
                    v
                });
                DelayDistribution::markov(q, vec![transition.clone(); n_nodes], vec![init; n_nodes])
            }
        }
    }
}

fn default_conditioning() -> f64 {
    100.0
}

fn default_survey_samples() -> usize {
    1000
}

/// One Monte Carlo experiment. Run `r` (0-based) draws its delays from seed
/// `run_seed_base + r`; every run starts from the same `y0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem_seed: u64,
    pub dims: Dims,
    pub alpha: f64,
    pub q: usize,
    pub delay_spec: DelaySpec,
    pub runs: usize,
    pub epsilon: f64,
    pub max_iter: usize,
    pub p: PNorm,
    pub gate_enabled: bool,
    pub run_seed_base: u64,
    /// Cap on `cond(Q_i)` for the generator.
    #[serde(default = "default_conditioning")]
    pub conditioning: f64,
    /// Initial multiplier; zeros when absent.
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
    #[serde(default)]
    pub hold_policy: HoldPolicy,
    /// Defaults to `10 q`.
    #[serde(default)]
    pub max_consecutive_holds: Option<usize>,
    /// Delay draws used by [`stability_survey`].
    #[serde(default = "default_survey_samples")]
    pub survey_samples: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::format("experiment config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.as_ref().display().to_string(), message),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidParameter("runs must be >= 1".into()));
        }
        if self.q == 0 {
            return Err(Error::InvalidParameter("q must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidParameter("epsilon must be > 0 and max_iter >= 1".into()));
        }
        if self.survey_samples == 0 {
            return Err(Error::InvalidParameter("survey_samples must be >= 1".into()));
        }
        if let Some(y0) = &self.y0 {
            if y0.len() != self.dims.m {
                return Err(Error::Dimension(format!("y0 has length {}, expected m = {}", y0.len(), self.dims.m)));
            }
        }
        self.distribution()?;
        Ok(())
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            n_blocks: self.dims.n_blocks,
            n: self.dims.n,
            m: self.dims.m,
            alpha: self.alpha,
            conditioning: self.conditioning,
        }
    }

    pub fn problem(&self) -> Result<SeparableQpProblem> {
        generate_random_problem(self.problem_seed, self.generator_spec())
    }

    pub fn distribution(&self) -> Result<DelayDistribution> {
        self.delay_spec.distribution(self.q, self.dims.n_blocks)
    }

    pub fn initial_y(&self) -> DVector<f64> {
        match &self.y0 {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(self.dims.m),
        }
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.run_seed_base.wrapping_add(run as u64)
    }

    pub fn async_options(&self, run: usize) -> AsyncOptions {
        AsyncOptions {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            gate_enabled: self.gate_enabled,
            p: self.p,
            seed: self.run_seed(run),
            hold_policy: self.hold_policy,
            max_consecutive_holds: self.max_consecutive_holds,
        }
    }

    pub fn sync_options(&self) -> SyncOptions {
        SyncOptions {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            p: self.p,
            allow_divergence: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub final_y: Vec<f64>,
    pub iterations: usize,
    pub holds: usize,
    pub terminal_status: TerminalStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: Vec<RunResult>,
    /// Synchronous fixed point.
    pub y_star: Vec<f64>,
    pub sync_iterations: usize,
    pub sync_status: TerminalStatus,
    /// Largest `||y_r - y_s||_inf` over pairs of final iterates.
    pub max_pairwise_distance: f64,
    /// Largest `||y_r - y*||_inf`.
    pub max_distance_to_fixed_point: f64,
    /// Per iteration, the largest component-wise `max - min` across runs.
    /// Finished runs contribute their final iterate.
    pub spread: Vec<f64>,
}

impl RunSummary {
    pub fn all_converged(&self) -> bool {
        self.runs.iter().all(|r| r.terminal_status == TerminalStatus::Converged)
    }

    pub fn count(&self, status: TerminalStatus) -> usize {
        self.runs.iter().filter(|r| r.terminal_status == status).count()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub problem: SeparableQpProblem,
    pub summary: RunSummary,
    pub trajectories: Vec<Trajectory>,
    pub sync_baseline: Trajectory,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let problem = config.problem()?;
    run_experiment_on(config, problem)
}

/// [`run_experiment`] on a given instance; `dims`, `alpha`, `problem_seed`
/// and `conditioning` in the config are ignored.
pub fn run_experiment_on(config: &ExperimentConfig, problem: SeparableQpProblem) -> Result<ExperimentOutput> {
    config.validate()?;
    let phi_set = problem.phi_set();
    let y_star = fixed_point_of(&phi_set)?;
    let dist = config.delay_spec.distribution(config.q, problem.n_blocks())?;
    let y0 = match &config.y0 {
        Some(v) => DVector::from_column_slice(v),
        None => DVector::zeros(problem.m()),
    };
    if y0.len() != problem.m() {
        return Err(Error::Dimension(format!("y0 has length {}, expected {}", y0.len(), problem.m())));
    }
    let sync_baseline = run_sync(&problem, &y0, &config.sync_options())?;

    let trajectories = (0..config.runs)
        .into_par_iter()
        .map(|r| run_async_with(&phi_set, &dist, &y0, &config.async_options(r)))
        .collect::<Result<Vec<_>>>()?;

    let runs: Vec<RunResult> = trajectories
        .iter()
        .enumerate()
        .map(|(r, t)| RunResult {
            seed: config.run_seed(r),
            final_y: t.final_y().to_vec(),
            iterations: t.iterations(),
            holds: t.holds(),
            terminal_status: t.terminal_status,
        })
        .collect();
    let finals: Vec<&[f64]> = runs.iter().map(|r| r.final_y.as_slice()).collect();
    let summary = RunSummary {
        max_pairwise_distance: max_pairwise_distance(&finals),
        max_distance_to_fixed_point: finals
            .iter()
            .map(|y| inf_dist(y, y_star.as_slice()))
            .fold(0.0, f64::max),
        spread: aggregate_spread(&trajectories).iter().map(SpreadRow::width).collect(),
        y_star: y_star.iter().copied().collect(),
        sync_iterations: sync_baseline.iterations(),
        sync_status: sync_baseline.terminal_status,
        runs,
    };
    Ok(ExperimentOutput {
        problem,
        summary,
        trajectories,
        sync_baseline,
    })
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Exact pairwise maximum through per-component ranges:
/// `max_{r,s} max_i |y_ri - y_si| = max_i (max_r y_ri - min_r y_ri)`.
pub fn max_pairwise_distance(finals: &[&[f64]]) -> f64 {
    let Some(first) = finals.first() else { return 0.0 };
    (0..first.len())
        .map(|i| {
            let (lo, hi) = finals
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y[i]), hi.max(y[i])));
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Cross-run statistics of `y^k`, one row per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadRow {
    pub k: usize,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
}

impl SpreadRow {
    pub fn width(&self) -> f64 {
        self.min.iter().zip(&self.max).fold(0.0, |m, (lo, hi)| m.max(hi - lo))
    }
}

/// Rows `k = 1..=K` with `K` the longest run; shorter runs are held at
/// their final iterate.
pub fn aggregate_spread(trajectories: &[Trajectory]) -> Vec<SpreadRow> {
    let Some(first) = trajectories.first() else { return Vec::new() };
    let m = first.m();
    let rows = trajectories.iter().map(Trajectory::iterations).max().unwrap_or(0);
    let n = trajectories.len() as f64;
    (0..rows)
        .map(|idx| {
            let mut row = SpreadRow {
                k: idx + 1,
                min: vec![f64::INFINITY; m],
                max: vec![f64::NEG_INFINITY; m],
                mean: vec![0.0; m],
            };
            for t in trajectories {
                let y = t.records.get(idx).map_or(t.final_y(), |r| r.y.as_slice());
                for i in 0..m {
                    row.min[i] = row.min[i].min(y[i]);
                    row.max[i] = row.max[i].max(y[i]);
                    row.mean[i] += y[i] / n;
                }
            }
            row
        })
        .collect()
}

/// Moving averages of width 10 over the last 10% of `spread` never increase.
pub fn tail_envelope_non_increasing(spread: &[f64]) -> bool {
    const WINDOW: usize = 10;
    let tail = &spread[spread.len() - spread.len() / 10..];
    if tail.len() <= WINDOW {
        return true;
    }
    // consecutive window means differ by (s[i + W] - s[i]) / W
    (0..tail.len() - WINDOW).all(|i| tail[i + WINDOW] <= tail[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::InvalidParameter(format!("unknown format {other:?} (csv or json)"))),
        }
    }
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }
}

/// Writes `run_0000.<ext>`, `run_0001.<ext>`, .. and `aggregate.<ext>` into
/// `dir`, creating it if needed. Returns the paths written.
pub fn export_trajectories(trajectories: &[Trajectory], dir: impl AsRef<Path>, format: ExportFormat) -> Result<Vec<PathBuf>> {
    if trajectories.is_empty() {
        return Err(Error::EmptyExport);
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = format.extension();
    let mut written = Vec::with_capacity(trajectories.len() + 1);
    for (r, t) in trajectories.iter().enumerate() {
        let path = dir.join(format!("run_{r:04}.{ext}"));
        let text = match format {
            ExportFormat::Csv => t.to_csv(),
            ExportFormat::Json => t.to_json(),
        };
        write_file(&path, &text)?;
        written.push(path);
    }
    let rows = aggregate_spread(trajectories);
    let path = dir.join(format!("aggregate.{ext}"));
    let text = match format {
        ExportFormat::Csv => spread_csv(&rows, trajectories[0].m()),
        ExportFormat::Json => spread_json(&rows),
    };
    write_file(&path, &text)?;
    written.push(path);
    Ok(written)
}

fn spread_csv(rows: &[SpreadRow], m: usize) -> String {
    let mut header = vec!["k".to_string()];
    for i in 1..=m {
        header.extend([format!("y_{i}_min"), format!("y_{i}_max"), format!("y_{i}_mean")]);
    }
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.k.to_string());
        for i in 0..m {
            for v in [row.min[i], row.max[i], row.mean[i]] {
                out.push(',');
                out.push_str(&fmt_f64(v));
            }
        }
        out.push('\n');
    }
    out
}

fn spread_json(rows: &[SpreadRow]) -> String {
    let arr = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
    let body: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{{\"k\":{},\"min\":[{}],\"max\":[{}],\"mean\":[{}]}}",
                r.k,
                arr(&r.min),
                arr(&r.max),
                arr(&r.mean)
            )
        })
        .collect();
    format!("[\n{}\n]\n", body.join(",\n"))
}

/// Pre-flight report: the classical ρ(|I + ΣΦ|) test, the synchronous rate,
/// and the per-step condition over `samples` draws of the delay law.
pub fn stability_survey(
    problem: &SeparableQpProblem,
    dist: &DelayDistribution,
    samples: usize,
    p: PNorm,
    seed: u64,
) -> Result<StabilityReport> {
    let phi_set = problem.phi_set();
    if dist.n_nodes() != phi_set.n_blocks() {
        return Err(Error::Dimension(format!(
            "delay distribution has {} nodes, problem has {} blocks",
            dist.n_nodes(),
            phi_set.n_blocks()
        )));
    }
    let mut sampler = DelaySampler::new(dist.clone(), seed);
    let mut rset = assemble_r_blocks(&phi_set, &sampler.sample(), dist.q())?;
    let mut values = Vec::with_capacity(samples);
    for i in 0..samples {
        if i > 0 {
            rset.reassemble(&phi_set, &sampler.sample());
        }
        values.push(step_condition_value(&rset, p));
    }
    Ok(StabilityReport {
        bertsekas_rho: bertsekas_condition(&phi_set)?,
        sync_rho: sync_radius(&phi_set)?,
        norm_condition_samples: ConditionStats::from_values(&values),
        p,
    })
}
