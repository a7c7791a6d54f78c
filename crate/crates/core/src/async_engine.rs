//! Asynchronous dual updates with delayed worker data, and the stabilizing
//! gate that only executes an update when it is guaranteed to contract.
//!
//! With staleness `d_i` for node `i`, the master computes
//!
//! ```text
//! y^{k+1} = R_11 y^k + R_12 y^{k-1} + ... + R_1q y^{k-q+1} + B
//! R_11 = I + sum_{d_i = 0} Φ_i,   R_1j = sum_{d_i = j-1} Φ_i  (j >= 2)
//! ```
//!
//! The gate executes the update only when `sum_j ||R_1j||_p < 1` and
//! otherwise holds `y^{k+1} = y^k`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::delay::{DelayDistribution, DelaySample, DelaySampler};
use crate::error::{Error, Result};
use crate::problem::{PhiSet, SeparableQpProblem};
use crate::stability::{step_condition_value, PNorm};
use crate::sync_engine::OVERFLOW_GUARD;
use crate::trajectory::{AsyncInfo, Record, RunKind, TerminalStatus, Trajectory};

/// The `q` most recent dual iterates, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    window: VecDeque<DVector<f64>>,
    k: usize,
}

impl HistoryBuffer {
    /// Buffer at `k = 0` with every slot holding `y0`.
    pub fn new(y0: &DVector<f64>, q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidParameter("q must be at least 1".into()));
        }
        Ok(HistoryBuffer {
            window: std::iter::repeat_n(y0.clone(), q).collect(),
            k: 0,
        })
    }

    pub fn q(&self) -> usize {
        self.window.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `y^{k - staleness}`.
    pub fn get(&self, staleness: usize) -> &DVector<f64> {
        &self.window[staleness]
    }

    pub fn newest(&self) -> &DVector<f64> {
        &self.window[0]
    }

    /// Pushes `y^{k+1}`, dropping the oldest entry.
    pub fn push(&mut self, y: DVector<f64>) {
        self.window.pop_back();
        self.window.push_front(y);
        self.k += 1;
    }

    /// Stacked state `[y^k; y^{k-1}; ...; y^{k-q+1}]`.
    pub fn stacked(&self) -> DVector<f64> {
        let m = self.window[0].len();
        let mut out = DVector::zeros(m * self.q());
        for (j, y) in self.window.iter().enumerate() {
            out.rows_mut(j * m, m).copy_from(y);
        }
        out
    }
}

/// Coefficients `R_11..R_1q` of one asynchronous update.
#[derive(Debug, Clone, PartialEq)]
pub struct RBlockSet {
    pub r_blocks: Vec<DMatrix<f64>>,
    /// `occupied[j]` is false when block `j` is identically zero (`j >= 1`).
    pub occupied: Vec<bool>,
    pub delays: DelaySample,
}

impl RBlockSet {
    pub fn q(&self) -> usize {
        self.r_blocks.len()
    }

    /// Rebuilds the blocks in place for a new sample, reusing storage.
    pub fn reassemble(&mut self, phi_set: &PhiSet, sample: &DelaySample) {
        let m = phi_set.m();
        for (j, blk) in self.r_blocks.iter_mut().enumerate() {
            if j == 0 {
                blk.fill_with_identity();
            } else if self.occupied[j] {
                blk.fill(0.0);
            }
            self.occupied[j] = j == 0;
        }
        debug_assert!(self.r_blocks.iter().all(|b| b.nrows() == m));
        for (phi, &d) in phi_set.phis.iter().zip(&sample.staleness) {
            self.r_blocks[d] += phi;
            self.occupied[d] = true;
        }
        self.delays.staleness.clone_from(&sample.staleness);
    }

    /// `sum_j R_1j`, which equals `I + ΣΦ_i` for every sample.
    pub fn sum(&self) -> DMatrix<f64> {
        let mut s = self.r_blocks[0].clone();
        for (blk, &occ) in self.r_blocks.iter().zip(&self.occupied).skip(1) {
            if occ {
                s += blk;
            }
        }
        s
    }
}

/// Places each `Φ_i` into block `d_i + 1`; block 1 also carries `I`.
pub fn assemble_r_blocks(phi_set: &PhiSet, sample: &DelaySample, q: usize) -> Result<RBlockSet> {
    if sample.n_nodes() != phi_set.n_blocks() {
        return Err(Error::Dimension(format!(
            "delay sample has {} nodes, problem has {} blocks",
            sample.n_nodes(),
            phi_set.n_blocks()
        )));
    }
    if q == 0 || sample.max_staleness() >= q {
        return Err(Error::InvalidParameter(format!(
            "staleness {} outside window of {q}",
            sample.max_staleness()
        )));
    }
    let m = phi_set.m();
    let mut rset = RBlockSet {
        r_blocks: vec![DMatrix::zeros(m, m); q],
        occupied: vec![false; q],
        delays: sample.clone(),
    };
    rset.reassemble(phi_set, sample);
    Ok(rset)
}

/// `sum_j R_1j y^{k-j+1} + B`.
pub fn async_step(buffer: &HistoryBuffer, rset: &RBlockSet, bias: &DVector<f64>) -> DVector<f64> {
    debug_assert_eq!(buffer.q(), rset.q());
    let mut acc = &rset.r_blocks[0] * buffer.get(0);
    for j in 1..rset.q() {
        if rset.occupied[j] {
            acc += &rset.r_blocks[j] * buffer.get(j);
        }
    }
    acc + bias
}

/// Companion matrix with top block-row `[R_11 .. R_1q]` and identities on
/// the block sub-diagonal, so that `Y^{k+1} = W Y^k + [B; 0; ..; 0]`.
pub fn build_w_matrix(rset: &RBlockSet) -> DMatrix<f64> {
    let q = rset.q();
    let m = rset.r_blocks[0].nrows();
    let mut w = DMatrix::zeros(q * m, q * m);
    for (j, blk) in rset.r_blocks.iter().enumerate() {
        w.view_mut((0, j * m), (m, m)).copy_from(blk);
    }
    for j in 1..q {
        w.view_mut((j * m, (j - 1) * m), (m, m)).fill_with_identity();
    }
    w
}

/// Masking index and hold bookkeeping for the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    /// 1 while the last step was held (or nothing has run yet), 0 after an update.
    pub zeta: u8,
    pub epsilon: f64,
    pub holds: usize,
    pub consecutive_holds: usize,
    pub max_consecutive_holds: usize,
}

impl GateState {
    pub fn new(epsilon: f64, max_consecutive_holds: usize) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon must be > 0, got {epsilon}")));
        }
        if max_consecutive_holds == 0 {
            return Err(Error::InvalidParameter("max_consecutive_holds must be >= 1".into()));
        }
        Ok(GateState {
            zeta: 1,
            epsilon,
            holds: 0,
            consecutive_holds: 0,
            max_consecutive_holds,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub y_next: DVector<f64>,
    pub updated: bool,
    pub condition_value: f64,
}

/// One gated step. Updates when `sum_j ||R_1j||_p < 1`, otherwise holds
/// `y^k`. A hold that pushes the consecutive count past the limit is a
/// stall error; the gate state reflects that hold.
pub fn gated_step(
    buffer: &HistoryBuffer,
    rset: &RBlockSet,
    bias: &DVector<f64>,
    gate: &mut GateState,
    p: PNorm,
) -> Result<StepOutcome> {
    let condition_value = step_condition_value(rset, p);
    if condition_value < 1.0 {
        gate.zeta = 0;
        gate.consecutive_holds = 0;
        Ok(StepOutcome {
            y_next: async_step(buffer, rset, bias),
            updated: true,
            condition_value,
        })
    } else {
        gate.zeta = 1;
        gate.holds += 1;
        gate.consecutive_holds += 1;
        if gate.consecutive_holds > gate.max_consecutive_holds {
            return Err(Error::Stalled {
                k: buffer.k() + 1,
                holds: gate.consecutive_holds,
            });
        }
        Ok(StepOutcome {
            y_next: buffer.newest().clone(),
            updated: false,
            condition_value,
        })
    }
}

/// What the gate sees on steps that follow a hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldPolicy {
    /// Fresh samples, with every node's staleness reduced by the number of
    /// consecutive holds so far (floor 0): data keeps arriving while the
    /// master waits.
    #[default]
    Freshen,
    /// The held step's delay pattern is re-checked unchanged.
    Freeze,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsyncOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    pub gate_enabled: bool,
    pub p: PNorm,
    pub seed: u64,
    pub hold_policy: HoldPolicy,
    /// Defaults to `10 q`.
    pub max_consecutive_holds: Option<usize>,
}

impl Default for AsyncOptions {
    fn default() -> Self {
        AsyncOptions {
            epsilon: 1e-10,
            max_iter: 100_000,
            gate_enabled: true,
            p: PNorm::Two,
            seed: 0,
            hold_policy: HoldPolicy::Freshen,
            max_consecutive_holds: None,
        }
    }
}

/// Runs the asynchronous iteration from a buffer pre-filled with `y0`.
/// Sampled staleness is capped at `k`, which leaves every update unchanged
/// (older slots all hold `y0`) but lets the gate see the merged blocks; in
/// particular the first step is always all-current.
///
/// Stops once `||y^{k+1} - y^k||_p < epsilon` on an executed update
/// (`ζ = 0`), at `max_iter`, on a stall, or when `|y|_inf` exceeds the
/// overflow guard. Stalls and divergence are reported through
/// `terminal_status`; use [`Trajectory::check`] to turn them into errors.
pub fn run_async(
    problem: &SeparableQpProblem,
    dist: &DelayDistribution,
    y0: &DVector<f64>,
    opts: &AsyncOptions,
) -> Result<Trajectory> {
    let phi_set = problem.phi_set();
    run_async_with(&phi_set, dist, y0, opts)
}

/// [`run_async`] with precomputed `Φ_i` and `B`.
pub fn run_async_with(
    phi_set: &PhiSet,
    dist: &DelayDistribution,
    y0: &DVector<f64>,
    opts: &AsyncOptions,
) -> Result<Trajectory> {
    dist.validate()?;
    if dist.n_nodes() != phi_set.n_blocks() {
        return Err(Error::Dimension(format!(
            "delay distribution has {} nodes, problem has {} blocks",
            dist.n_nodes(),
            phi_set.n_blocks()
        )));
    }
    if y0.len() != phi_set.m() {
        return Err(Error::Dimension(format!(
            "y0 has length {}, expected {}",
            y0.len(),
            phi_set.m()
        )));
    }
    if opts.max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be >= 1".into()));
    }
    let q = dist.q();
    let mut gate = GateState::new(opts.epsilon, opts.max_consecutive_holds.unwrap_or(10 * q))?;
    let mut sampler = DelaySampler::new(dist.clone(), opts.seed);
    let mut buffer = HistoryBuffer::new(y0, q)?;
    let first = DelaySample::current(phi_set.n_blocks());
    let mut rset = assemble_r_blocks(phi_set, &first, q)?;
    let mut last_raw = first;
    let mut records = Vec::new();

    let status = loop {
        let raw = if opts.hold_policy == HoldPolicy::Freeze && gate.consecutive_holds > 0 {
            last_raw.clone()
        } else {
            sampler.sample()
        };
        let effective = match opts.hold_policy {
            HoldPolicy::Freshen if gate.consecutive_holds > 0 => raw.fresher_by(gate.consecutive_holds),
            _ => raw.clone(),
        }
        .clamped(buffer.k());
        last_raw = raw;
        rset.reassemble(phi_set, &effective);

        let (outcome, stalled) = if opts.gate_enabled {
            match gated_step(&buffer, &rset, &phi_set.bias, &mut gate, opts.p) {
                Ok(o) => (o, false),
                Err(Error::Stalled { .. }) => (
                    StepOutcome {
                        y_next: buffer.newest().clone(),
                        updated: false,
                        condition_value: step_condition_value(&rset, opts.p),
                    },
                    true,
                ),
                Err(e) => return Err(e),
            }
        } else {
            gate.zeta = 0;
            (
                StepOutcome {
                    y_next: async_step(&buffer, &rset, &phi_set.bias),
                    updated: true,
                    condition_value: step_condition_value(&rset, opts.p),
                },
                false,
            )
        };

        let residual = opts.p.vector(&(&outcome.y_next - buffer.newest()));
        let blown = outcome.y_next.amax() > OVERFLOW_GUARD || !outcome.y_next.iter().all(|v| v.is_finite());
        let k = buffer.k() + 1;
        records.push(Record {
            k,
            y: outcome.y_next.iter().copied().collect(),
            residual,
            info: Some(AsyncInfo {
                condition_value: outcome.condition_value,
                zeta: gate.zeta,
                updated: outcome.updated,
                delays: effective,
            }),
        });
        buffer.push(outcome.y_next);

        if stalled {
            break TerminalStatus::Stalled;
        }
        if blown {
            break TerminalStatus::Diverged;
        }
        if residual < opts.epsilon && gate.zeta == 0 {
            break TerminalStatus::Converged;
        }
        if k >= opts.max_iter {
            break TerminalStatus::MaxIter;
        }
    };

    Ok(Trajectory {
        kind: RunKind::Async,
        y0: y0.iter().copied().collect(),
        records,
        terminal_status: status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::{decode_mode, exponential_pmf, uniform_pmf};
    use crate::problem::{generate_random_problem, sync_fixed_point, Block, GeneratorSpec};
    use crate::sync_engine::{run_sync, sync_step, SyncOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk(seed: u64, alpha: f64) -> SeparableQpProblem {
        generate_random_problem(
            seed,
            GeneratorSpec {
                n_blocks: 6,
                n: 4,
                m: 3,
                alpha,
                conditioning: 20.0,
            },
        )
        .unwrap()
    }

    fn scalar_pair(phi1: f64, phi2: f64, b: f64) -> SeparableQpProblem {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        // Φ_i = -α_i with unit Q, A
        let b1 = Block::new(one(1.0), one(1.0), DVector::zeros(1), phi1).unwrap();
        let b2 = Block::new(one(1.0), one(1.0), DVector::zeros(1), phi2).unwrap();
        SeparableQpProblem::new(vec![b1, b2], DVector::from_element(1, b)).unwrap()
    }

    #[test]
    fn buffer_shifts() {
        let mut buf = HistoryBuffer::new(&DVector::from_element(1, 0.0), 3).unwrap();
        assert_eq!(buf.q(), 3);
        buf.push(DVector::from_element(1, 1.0));
        buf.push(DVector::from_element(1, 2.0));
        assert_eq!(buf.get(0)[0], 2.0);
        assert_eq!(buf.get(1)[0], 1.0);
        assert_eq!(buf.get(2)[0], 0.0);
        buf.push(DVector::from_element(1, 3.0));
        assert_eq!(buf.get(2)[0], 1.0);
        assert_eq!(buf.k(), 3);
        assert!(HistoryBuffer::new(&DVector::zeros(1), 0).is_err());
    }

    #[test]
    fn r_blocks_partition() {
        let p = desk(1, 0.05);
        let phi = p.phi_set();
        let sync = DelaySample::current(6);
        let r = assemble_r_blocks(&phi, &sync, 4).unwrap();
        assert_eq!(r.r_blocks[0], phi.sync_matrix());
        assert!(r.r_blocks[1..].iter().all(|b| b.amax() == 0.0));

        let two = scalar_pair(0.3, 0.4, 0.0);
        let phi2 = two.phi_set();
        let r = assemble_r_blocks(&phi2, &DelaySample::new(vec![0, 1]), 2).unwrap();
        assert!((r.r_blocks[0][(0, 0)] - 0.7).abs() < 1e-15);
        assert!((r.r_blocks[1][(0, 0)] + 0.4).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = DelaySample::new((0..6).map(|_| rng.random_range(0..4)).collect());
            let r = assemble_r_blocks(&phi, &s, 4).unwrap();
            assert!((r.sum() - phi.sync_matrix()).amax() < 1e-12);
        }
        assert!(assemble_r_blocks(&phi, &DelaySample::new(vec![4; 6]), 4).is_err());
        assert!(assemble_r_blocks(&phi, &DelaySample::new(vec![0; 5]), 4).is_err());
    }

    #[test]
    fn reassemble_reuses_storage_correctly() {
        let p = desk(9, 0.05);
        let phi = p.phi_set();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut reused = assemble_r_blocks(&phi, &DelaySample::current(6), 5).unwrap();
        for _ in 0..100 {
            let s = DelaySample::new((0..6).map(|_| rng.random_range(0..5)).collect());
            reused.reassemble(&phi, &s);
            assert_eq!(reused, assemble_r_blocks(&phi, &s, 5).unwrap());
        }
    }

    #[test]
    fn zero_delay_step_is_sync_step() {
        let p = desk(2, 0.05);
        let phi = p.phi_set();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let mut buf = HistoryBuffer::new(&DVector::zeros(3), 3).unwrap();
        buf.push(y.clone());
        let r = assemble_r_blocks(&phi, &DelaySample::current(6), 3).unwrap();
        assert!((async_step(&buf, &r, &phi.bias) - sync_step(&phi, &y)).amax() < 1e-12);
    }

    #[test]
    fn fixed_point_survives_any_delays() {
        let p = desk(3, 0.05);
        let phi = p.phi_set();
        let ystar = sync_fixed_point(&p).unwrap();
        let buf = HistoryBuffer::new(&ystar, 4).unwrap();
        for idx in [0u64, 17, 255, 4095] {
            let s = decode_mode(idx, 4, 6).unwrap();
            let r = assemble_r_blocks(&phi, &s, 4).unwrap();
            assert!((async_step(&buf, &r, &phi.bias) - &ystar).amax() < 1e-10);
        }
    }

    #[test]
    fn scalar_two_term_recursion() {
        // Φ1 = -0.3 current, Φ2 = -0.4 one step stale: y+ = 0.7 y - 0.4 y_prev + B
        let p = scalar_pair(0.3, 0.4, -2.0);
        let phi = p.phi_set();
        let bias = phi.bias[0];
        assert!((bias - 0.7).abs() < 1e-15);
        let delays = DelaySample::new(vec![0, 1]);
        let r = assemble_r_blocks(&phi, &delays, 2).unwrap();
        let mut buf = HistoryBuffer::new(&DVector::from_element(1, 1.0), 2).unwrap();
        let (mut prev, mut cur) = (1.0f64, 1.0f64);
        for _ in 0..10 {
            let next = 0.7 * cur - 0.4 * prev + 0.7;
            let y = async_step(&buf, &r, &phi.bias);
            assert!((y[0] - next).abs() < 1e-12);
            buf.push(y);
            prev = cur;
            cur = next;
        }
    }

    #[test]
    fn w_matrix_layout() {
        let p = desk(4, 0.05);
        let phi = p.phi_set();
        let r1 = assemble_r_blocks(&phi, &DelaySample::current(6), 1).unwrap();
        assert_eq!(build_w_matrix(&r1), r1.r_blocks[0]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut buf = HistoryBuffer::new(&DVector::zeros(3), 3).unwrap();
        for k in 0..5 {
            buf.push(DVector::from_vec(vec![k as f64, 1.0 - k as f64, 0.5 * k as f64]));
        }
        let s = DelaySample::new((0..6).map(|_| rng.random_range(0..3)).collect());
        let r = assemble_r_blocks(&phi, &s, 3).unwrap();
        let w = build_w_matrix(&r);
        let mut c = DVector::zeros(9);
        c.rows_mut(0, 3).copy_from(&phi.bias);
        let stacked_next = &w * buf.stacked() + c;
        let direct = async_step(&buf, &r, &phi.bias);
        assert!((stacked_next.rows(0, 3) - &direct).amax() < 1e-12);
        let mut shifted = buf.clone();
        shifted.push(direct);
        assert!((stacked_next - shifted.stacked()).amax() < 1e-12);
    }

    #[test]
    fn gate_updates_on_contracting_steps() {
        let p = desk(5, 0.05);
        let phi = p.phi_set();
        let r = assemble_r_blocks(&phi, &DelaySample::current(6), 3).unwrap();
        assert!(crate::stability::matrix_p_norm(&r.r_blocks[0], PNorm::Two) < 1.0);
        let buf = HistoryBuffer::new(&DVector::from_element(3, 1.0), 3).unwrap();
        let mut gate = GateState::new(1e-8, 30).unwrap();
        let out = gated_step(&buf, &r, &phi.bias, &mut gate, PNorm::Two).unwrap();
        assert!(out.updated);
        assert_eq!(gate.zeta, 0);
    }

    #[test]
    fn gate_holds_when_norm_exceeds_one() {
        let p = desk(5, 50.0);
        let phi = p.phi_set();
        let r = assemble_r_blocks(&phi, &DelaySample::current(6), 3).unwrap();
        assert!(crate::stability::matrix_p_norm(&r.r_blocks[0], PNorm::Two) >= 1.0);
        let y = DVector::from_element(3, 1.0);
        let buf = HistoryBuffer::new(&y, 3).unwrap();
        let mut gate = GateState::new(1e-8, 2).unwrap();
        let out = gated_step(&buf, &r, &phi.bias, &mut gate, PNorm::Two).unwrap();
        assert!(!out.updated);
        assert_eq!(out.y_next, y);
        assert_eq!(gate.zeta, 1);
        assert_eq!(gate.holds, 1);
        gated_step(&buf, &r, &phi.bias, &mut gate, PNorm::Two).unwrap();
        assert!(matches!(
            gated_step(&buf, &r, &phi.bias, &mut gate, PNorm::Two),
            Err(Error::Stalled { holds: 3, .. })
        ));
    }

    #[test]
    fn synchronous_law_reproduces_sync_run() {
        let p = desk(6, 0.05);
        let y0 = DVector::from_element(3, 2.0);
        let sync = run_sync(&p, &y0, &SyncOptions::default()).unwrap();
        let opts = AsyncOptions::default();
        let t = run_async(&p, &DelayDistribution::synchronous(5, 6), &y0, &opts).unwrap();
        assert_eq!(t.iterations(), sync.iterations());
        for (a, s) in t.records.iter().zip(&sync.records) {
            let d = a.y.iter().zip(&s.y).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn start_at_fixed_point_terminates_at_once() {
        let p = desk(7, 1.0).with_sync_rate(0.8).unwrap();
        let ystar = sync_fixed_point(&p).unwrap();
        let dist = DelayDistribution::iid_shared(exponential_pmf(3, 1.2).unwrap(), 6).unwrap();
        let t = run_async(&p, &dist, &ystar, &AsyncOptions::default()).unwrap();
        assert!(t.converged());
        let first_update = t.records.iter().position(|r| r.info.as_ref().unwrap().updated).unwrap();
        assert_eq!(t.iterations(), first_update + 1);
        assert_eq!(t.records.last().unwrap().info.as_ref().unwrap().zeta, 0);
    }

    #[test]
    fn gate_decisions_replay_offline() {
        // coarse step so the condition straddles 1 across delay patterns
        let p = desk(8, 0.05);
        let phi = p.phi_set();
        let dist = DelayDistribution::iid_shared(uniform_pmf(4), 6).unwrap();
        let opts = AsyncOptions {
            max_iter: 400,
            epsilon: 1e-300,
            seed: 3,
            ..Default::default()
        };
        let t = run_async(&p, &dist, &DVector::from_element(3, 1.0), &opts).unwrap();
        let mut holds = 0;
        let mut prev = t.y0.clone();
        for r in &t.records {
            let info = r.info.as_ref().unwrap();
            let rset = assemble_r_blocks(&phi, &info.delays, 4).unwrap();
            let cond = step_condition_value(&rset, PNorm::Two);
            assert_eq!(cond, info.condition_value);
            assert_eq!(info.updated, cond < 1.0);
            if !info.updated {
                holds += 1;
                assert_eq!(r.y, prev);
                assert_eq!(info.zeta, 1);
            }
            prev = r.y.clone();
        }
        assert!(holds > 0, "instance never exercises the hold branch");
        assert!(holds < t.iterations());
    }

    #[test]
    fn freshen_policy_clears_staleness_during_holds() {
        let p = desk(8, 0.05);
        let dist = DelayDistribution::iid_shared(uniform_pmf(4), 6).unwrap();
        let opts = AsyncOptions {
            max_iter: 400,
            epsilon: 1e-300,
            seed: 3,
            ..Default::default()
        };
        let t = run_async(&p, &dist, &DVector::from_element(3, 1.0), &opts).unwrap();
        let mut run = 0;
        for r in &t.records {
            let info = r.info.as_ref().unwrap();
            assert!(info.delays.max_staleness() <= 3usize.saturating_sub(run));
            run = if info.updated { 0 } else { run + 1 };
        }
    }

    #[test]
    fn freeze_policy_stalls_on_persistent_violation() {
        let p = desk(8, 0.05);
        let dist = DelayDistribution::iid_shared(uniform_pmf(4), 6).unwrap();
        let opts = AsyncOptions {
            max_iter: 100_000,
            epsilon: 1e-300,
            seed: 3,
            hold_policy: HoldPolicy::Freeze,
            ..Default::default()
        };
        let t = run_async(&p, &dist, &DVector::from_element(3, 1.0), &opts).unwrap();
        assert_eq!(t.terminal_status, TerminalStatus::Stalled);
        // 10 q consecutive holds allowed, the next one stalls
        let trailing = t.records.iter().rev().take_while(|r| !r.info.as_ref().unwrap().updated).count();
        assert_eq!(trailing, 41);
        assert!(t.check().is_err());
    }

    #[test]
    fn huge_step_size_stalls_gated_and_diverges_ungated() {
        let p = desk(9, 50.0);
        let dist = DelayDistribution::iid_shared(exponential_pmf(3, 1.2).unwrap(), 6).unwrap();
        let y0 = DVector::from_element(3, 1.0);
        let t = run_async(&p, &dist, &y0, &AsyncOptions::default()).unwrap();
        assert_eq!(t.terminal_status, TerminalStatus::Stalled);
        assert!(t.records.iter().all(|r| r.y == t.y0));
        let ungated = AsyncOptions {
            gate_enabled: false,
            ..Default::default()
        };
        let t = run_async(&p, &dist, &y0, &ungated).unwrap();
        assert_eq!(t.terminal_status, TerminalStatus::Diverged);
    }

    #[test]
    fn gated_runs_reach_the_fixed_point() {
        let p = desk(10, 0.05);
        let ystar = sync_fixed_point(&p).unwrap();
        let dist = DelayDistribution::iid_shared(exponential_pmf(5, 1.2).unwrap(), 6).unwrap();
        for seed in 0..10 {
            let opts = AsyncOptions {
                epsilon: 1e-12,
                seed,
                ..Default::default()
            };
            let t = run_async(&p, &dist, &DVector::zeros(3), &opts).unwrap();
            assert!(t.converged());
            let y = DVector::from_column_slice(t.final_y());
            assert!((y - &ystar).amax() < 1e-6);
        }
    }

    #[test]
    fn mismatched_distribution_rejected() {
        let p = desk(1, 0.05);
        let dist = DelayDistribution::synchronous(3, 4);
        assert!(run_async(&p, &dist, &DVector::zeros(3), &AsyncOptions::default()).is_err());
    }
}
