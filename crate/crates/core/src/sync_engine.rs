//! Synchronous dual ascent, the baseline every asynchronous run must reach.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{PhiSet, SeparableQpProblem};
use crate::stability::{spectral_radius, PNorm};
use crate::trajectory::{Record, RunKind, TerminalStatus, Trajectory};

/// `|y|_inf` beyond which a run is declared divergent.
pub const OVERFLOW_GUARD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    pub p: PNorm,
    /// Skip the `ρ(I + ΣΦ) < 1` precheck.
    pub allow_divergence: bool,
}

impl Default for SyncOptions {
    fn default() -> Self {
        SyncOptions {
            epsilon: 1e-10,
            max_iter: 100_000,
            p: PNorm::Two,
            allow_divergence: false,
        }
    }
}

/// One synchronous update `y <- (I + ΣΦ_i) y + B`, with the iteration
/// matrix precomputed.
#[derive(Debug, Clone)]
pub struct SyncEngine {
    r_sync: DMatrix<f64>,
    bias: DVector<f64>,
}

impl SyncEngine {
    pub fn new(phi_set: &PhiSet) -> Self {
        SyncEngine {
            r_sync: phi_set.sync_matrix(),
            bias: phi_set.bias.clone(),
        }
    }

    pub fn iteration_matrix(&self) -> &DMatrix<f64> {
        &self.r_sync
    }

    pub fn step(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.r_sync * y + &self.bias
    }
}

pub fn sync_step(phi_set: &PhiSet, y: &DVector<f64>) -> DVector<f64> {
    SyncEngine::new(phi_set).step(y)
}

/// Iterates [`sync_step`] from `y0` until `||y^{k+1} - y^k||_p < epsilon`,
/// `max_iter` steps, or the overflow guard trips.
pub fn run_sync(problem: &SeparableQpProblem, y0: &DVector<f64>, opts: &SyncOptions) -> Result<Trajectory> {
    if y0.len() != problem.m() {
        return Err(Error::Dimension(format!(
            "y0 has length {}, expected {}",
            y0.len(),
            problem.m()
        )));
    }
    if !(opts.epsilon > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidParameter("epsilon must be > 0 and max_iter >= 1".into()));
    }
    let engine = SyncEngine::new(&problem.phi_set());
    if !opts.allow_divergence {
        let rho = spectral_radius(engine.iteration_matrix())?;
        if rho >= 1.0 {
            return Err(Error::Unstable { rho });
        }
    }
    let mut y = y0.clone();
    let mut records = Vec::new();
    let status = loop {
        let next = engine.step(&y);
        let residual = opts.p.vector(&(&next - &y));
        let k = records.len() + 1;
        let blown = next.amax() > OVERFLOW_GUARD || !next.iter().all(|v| v.is_finite());
        records.push(Record {
            k,
            y: next.iter().copied().collect(),
            residual,
            info: None,
        });
        y = next;
        if blown {
            break TerminalStatus::Diverged;
        }
        if residual < opts.epsilon {
            break TerminalStatus::Converged;
        }
        if k >= opts.max_iter {
            break TerminalStatus::MaxIter;
        }
    };
    Ok(Trajectory {
        kind: RunKind::Sync,
        y0: y0.iter().copied().collect(),
        records,
        terminal_status: status,
    })
}
