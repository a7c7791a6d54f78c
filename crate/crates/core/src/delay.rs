//! Bounded random staleness of worker contributions.
//!
//! A worker's staleness `d_i` counts how many iterations old the data the
//! master uses is: `d_i = 0` is current, `d_i = q - 1` is the oldest slot of
//! the window. Probability vectors are indexed by staleness, so entry `j`
//! (0-based) is the probability of `d_i = j`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PMF_TOL: f64 = 1e-12;

/// Cap on `q^N` for anything that materializes the whole mode space.
pub const MODE_LIMIT: u64 = 1 << 62;

/// Normalized `e^{-rate * j}` for `j = 1..=q`; entry `j - 1` is staleness `j - 1`.
pub fn exponential_pmf(q: usize, rate: f64) -> Result<Vec<f64>> {
    if q == 0 {
        return Err(Error::InvalidParameter("q must be at least 1".into()));
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!("rate must be positive, got {rate}")));
    }
    // Shifted by one factor of e^{-rate}, which normalization cancels.
    let weights: Vec<f64> = (0..q).map(|j| (-rate * j as f64).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

pub fn uniform_pmf(q: usize) -> Vec<f64> {
    vec![1.0 / q as f64; q]
}

pub fn validate_pmf(pmf: &[f64], q: usize) -> Result<()> {
    if pmf.len() != q {
        return Err(Error::InvalidPmf(format!("length {} but q = {q}", pmf.len())));
    }
    if pmf.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidPmf("entries must be finite and nonnegative".into()));
    }
    let total: f64 = pmf.iter().sum();
    if (total - 1.0).abs() > PMF_TOL {
        return Err(Error::InvalidPmf(format!("sums to {total}, not 1")));
    }
    Ok(())
}

/// Independent-across-nodes staleness law over the window `{0, .., q-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DelayDistribution {
    /// Every iteration draws each node's staleness from its own pmf.
    Iid { q: usize, pmfs: Vec<Vec<f64>> },
    /// Each node's staleness follows its own Markov chain on `{0, .., q-1}`.
    Markov {
        q: usize,
        transitions: Vec<Vec<Vec<f64>>>,
        initial: Vec<Vec<f64>>,
    },
}

impl DelayDistribution {
    pub fn iid(q: usize, pmfs: Vec<Vec<f64>>) -> Result<Self> {
        let d = DelayDistribution::Iid { q, pmfs };
        d.validate()?;
        Ok(d)
    }

    /// Same pmf for each of `n_nodes` nodes.
    pub fn iid_shared(pmf: Vec<f64>, n_nodes: usize) -> Result<Self> {
        let q = pmf.len();
        Self::iid(q, vec![pmf; n_nodes])
    }

    /// Degenerate law with every node always current.
    pub fn synchronous(q: usize, n_nodes: usize) -> Self {
        let mut pmf = vec![0.0; q];
        pmf[0] = 1.0;
        DelayDistribution::Iid {
            q,
            pmfs: vec![pmf; n_nodes],
        }
    }

    pub fn markov(q: usize, transitions: Vec<Vec<Vec<f64>>>, initial: Vec<Vec<f64>>) -> Result<Self> {
        let d = DelayDistribution::Markov {
            q,
            transitions,
            initial,
        };
        d.validate()?;
        Ok(d)
    }

    /// Markov chain whose every row is the node's iid pmf, so it samples
    /// exactly like the iid law.
    pub fn markov_from_iid(pmfs: &[Vec<f64>]) -> Result<Self> {
        let q = pmfs.first().map_or(0, Vec::len);
        Self::markov(
            q,
            pmfs.iter().map(|p| vec![p.clone(); q]).collect(),
            pmfs.to_vec(),
        )
    }

    pub fn q(&self) -> usize {
        match self {
            DelayDistribution::Iid { q, .. } | DelayDistribution::Markov { q, .. } => *q,
        }
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            DelayDistribution::Iid { pmfs, .. } => pmfs.len(),
            DelayDistribution::Markov { initial, .. } => initial.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.q();
        if q == 0 {
            return Err(Error::InvalidParameter("q must be at least 1".into()));
        }
        match self {
            DelayDistribution::Iid { pmfs, .. } => {
                if pmfs.is_empty() {
                    return Err(Error::InvalidPmf("no nodes".into()));
                }
                for pmf in pmfs {
                    validate_pmf(pmf, q)?;
                }
            }
            DelayDistribution::Markov {
                transitions,
                initial,
                ..
            } => {
                if initial.is_empty() || transitions.len() != initial.len() {
                    return Err(Error::InvalidPmf(format!(
                        "{} transition matrices for {} initial distributions",
                        transitions.len(),
                        initial.len()
                    )));
                }
                for (t, init) in transitions.iter().zip(initial) {
                    validate_pmf(init, q)?;
                    if t.len() != q {
                        return Err(Error::InvalidPmf(format!("transition matrix has {} rows", t.len())));
                    }
                    for row in t {
                        validate_pmf(row, q)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Long-run staleness frequencies per node: the pmf itself for iid, the
    /// stationary distribution for Markov (Cesàro average from the initial
    /// law when the chain is reducible and the stationary law is not unique).
    pub fn stationary(&self) -> Vec<Vec<f64>> {
        match self {
            DelayDistribution::Iid { pmfs, .. } => pmfs.clone(),
            DelayDistribution::Markov {
                transitions,
                initial,
                ..
            } => transitions
                .iter()
                .zip(initial)
                .map(|(t, init)| stationary_of(t).unwrap_or_else(|| cesaro_limit(t, init)))
                .collect(),
        }
    }
}

/// Solves `π P = π`, `sum π = 1`; `None` if the system is singular.
fn stationary_of(t: &[Vec<f64>]) -> Option<Vec<f64>> {
    let q = t.len();
    let mut lhs = DMatrix::from_fn(q, q, |i, j| t[j][i] - if i == j { 1.0 } else { 0.0 });
    let mut rhs = DVector::zeros(q);
    for j in 0..q {
        lhs[(q - 1, j)] = 1.0;
    }
    rhs[q - 1] = 1.0;
    let lu = lhs.lu();
    let pi = lu.solve(&rhs)?;
    let residual: f64 = (0..q)
        .map(|j| ((0..q).map(|i| pi[i] * t[i][j]).sum::<f64>() - pi[j]).abs())
        .sum();
    (residual < 1e-10 && pi.iter().all(|&x| x > -1e-12))
        .then(|| pi.iter().map(|x| x.max(0.0)).collect())
}

fn cesaro_limit(t: &[Vec<f64>], init: &[f64]) -> Vec<f64> {
    let q = t.len();
    let steps = 100_000;
    let mut v = init.to_vec();
    let mut avg = vec![0.0; q];
    for _ in 0..steps {
        v = (0..q).map(|j| (0..q).map(|i| v[i] * t[i][j]).sum()).collect();
        for (a, x) in avg.iter_mut().zip(&v) {
            *a += x / steps as f64;
        }
    }
    avg
}

/// One joint staleness outcome across all nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DelaySample {
    pub staleness: Vec<usize>,
}

impl DelaySample {
    pub fn new(staleness: Vec<usize>) -> Self {
        DelaySample { staleness }
    }

    pub fn current(n_nodes: usize) -> Self {
        DelaySample {
            staleness: vec![0; n_nodes],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.staleness.len()
    }

    pub fn max_staleness(&self) -> usize {
        self.staleness.iter().copied().max().unwrap_or(0)
    }

    /// Each staleness reduced by `steps`, floored at zero.
    pub fn fresher_by(&self, steps: usize) -> Self {
        DelaySample {
            staleness: self.staleness.iter().map(|d| d.saturating_sub(steps)).collect(),
        }
    }

    /// Staleness capped at `max`; at iteration `k` nothing older than `y^0`
    /// exists, so `d_i <= k`.
    pub fn clamped(&self, max: usize) -> Self {
        DelaySample {
            staleness: self.staleness.iter().map(|&d| d.min(max)).collect(),
        }
    }

    /// Semicolon-joined staleness list, as written in trajectory files.
    pub fn joined(&self) -> String {
        self.staleness
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse_joined(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(DelaySample { staleness: vec![] });
        }
        text.split(';')
            .map(|t| t.trim().parse::<usize>().map_err(|e| Error::format("delay sample", e)))
            .collect::<Result<_>>()
            .map(DelaySample::new)
    }
}

/// Stateful sampler for one run. Uses ChaCha8 seeded through
/// `SeedableRng::seed_from_u64`, both of which are portable and fully
/// specified, so a seed replays bit-identically on every platform.
#[derive(Debug, Clone)]
pub struct DelaySampler {
    dist: DelayDistribution,
    rng: ChaCha8Rng,
    cdfs: Vec<Vec<Vec<f64>>>,
    chain_state: Option<Vec<usize>>,
}

fn cdf(pmf: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    pmf.iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

fn draw(rng: &mut ChaCha8Rng, cdf: &[f64]) -> usize {
    let u: f64 = rng.random();
    // u in [0,1); index of first cdf entry exceeding u, skipping zero-mass tails
    let total = *cdf.last().unwrap();
    let u = u * total;
    match cdf.iter().position(|&c| u < c) {
        Some(i) => i,
        None => cdf.iter().rposition(|_| true).unwrap(),
    }
}

impl DelaySampler {
    pub fn new(dist: DelayDistribution, seed: u64) -> Self {
        let cdfs = match &dist {
            DelayDistribution::Iid { pmfs, .. } => pmfs.iter().map(|p| vec![cdf(p)]).collect(),
            DelayDistribution::Markov { transitions, .. } => transitions
                .iter()
                .map(|t| t.iter().map(|row| cdf(row)).collect())
                .collect(),
        };
        DelaySampler {
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cdfs,
            chain_state: None,
        }
    }

    pub fn distribution(&self) -> &DelayDistribution {
        &self.dist
    }

    /// Draws the next joint staleness outcome.
    pub fn sample(&mut self) -> DelaySample {
        let staleness = match &self.dist {
            DelayDistribution::Iid { .. } => {
                let rng = &mut self.rng;
                self.cdfs.iter().map(|c| draw(rng, &c[0])).collect()
            }
            DelayDistribution::Markov { initial, .. } => {
                let next: Vec<usize> = match &self.chain_state {
                    None => initial.iter().map(|p| draw(&mut self.rng, &cdf(p))).collect(),
                    Some(state) => state
                        .iter()
                        .zip(&self.cdfs)
                        .map(|(&s, rows)| draw(&mut self.rng, &rows[s]))
                        .collect(),
                };
                self.chain_state = Some(next.clone());
                next
            }
        };
        DelaySample { staleness }
    }
}

/// Number of switching modes `q^N`, or an overflow error past `limit`.
pub fn mode_count(q: usize, n_nodes: usize, limit: u64) -> Result<u64> {
    let mut count: u64 = 1;
    for _ in 0..n_nodes {
        count = match count.checked_mul(q as u64) {
            Some(c) if c <= limit => c,
            _ => {
                return Err(Error::ModeOverflow {
                    q,
                    n: n_nodes,
                    limit,
                })
            }
        };
    }
    Ok(count)
}

/// Base-`q` code of a staleness pattern, node 1 as the most significant
/// digit (the ordering of `Π_1 ⊗ ... ⊗ Π_N`). Mode 0 is all-current.
pub fn mode_index(sample: &DelaySample, q: usize) -> Result<u64> {
    mode_count(q, sample.n_nodes(), MODE_LIMIT)?;
    let mut index = 0u64;
    for &d in &sample.staleness {
        if d >= q {
            return Err(Error::InvalidParameter(format!("staleness {d} outside window of {q}")));
        }
        index = index * q as u64 + d as u64;
    }
    Ok(index)
}

pub fn decode_mode(index: u64, q: usize, n_nodes: usize) -> Result<DelaySample> {
    let count = mode_count(q, n_nodes, MODE_LIMIT)?;
    if index >= count {
        return Err(Error::InvalidParameter(format!("mode {index} >= {count}")));
    }
    let mut rest = index;
    let mut staleness = vec![0; n_nodes];
    for d in staleness.iter_mut().rev() {
        *d = (rest % q as u64) as usize;
        rest /= q as u64;
    }
    Ok(DelaySample { staleness })
}

/// Probability of each mode under an iid law, ordered by [`mode_index`].
pub fn joint_pmf(dist: &DelayDistribution, limit: u64) -> Result<Vec<f64>> {
    let DelayDistribution::Iid { q, pmfs } = dist else {
        return Err(Error::InvalidParameter("joint pmf needs an iid distribution".into()));
    };
    let count = mode_count(*q, pmfs.len(), limit)? as usize;
    // Π_1 ⊗ Π_2 ⊗ ... so the last node varies fastest.
    let mut joint = vec![1.0];
    for pmf in pmfs {
        let mut next = Vec::with_capacity(joint.len() * q);
        for &j in &joint {
            next.extend(pmf.iter().map(|p| j * p));
        }
        joint = next;
    }
    debug_assert_eq!(joint.len(), count);
    Ok(joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_pmf_values() {
        assert_eq!(exponential_pmf(1, 3.0).unwrap(), vec![1.0]);
        let p = exponential_pmf(2, 1.2).unwrap();
        let (a, b) = ((-1.2f64).exp(), (-2.4f64).exp());
        assert_relative_eq!(p[0], a / (a + b), epsilon = 1e-15);
        assert_relative_eq!(p[1], b / (a + b), epsilon = 1e-15);
        assert!((p[0] - 0.76852).abs() < 1e-5);
        let p30 = exponential_pmf(30, 1.2).unwrap();
        assert!((p30.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(exponential_pmf(0, 1.0).is_err());
        assert!(exponential_pmf(3, 0.0).is_err());
    }

    #[test]
    fn degenerate_pmfs() {
        let mut s = DelaySampler::new(DelayDistribution::synchronous(4, 3), 1);
        for _ in 0..100 {
            assert_eq!(s.sample().staleness, vec![0, 0, 0]);
        }
        let last = DelayDistribution::iid_shared(vec![0.0, 0.0, 0.0, 1.0], 3).unwrap();
        let mut s = DelaySampler::new(last, 1);
        for _ in 0..100 {
            assert_eq!(s.sample().staleness, vec![3, 3, 3]);
        }
    }

    #[test]
    fn uniform_frequencies() {
        let dist = DelayDistribution::iid_shared(uniform_pmf(3), 1).unwrap();
        let mut s = DelaySampler::new(dist, 42);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[s.sample().staleness[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn sampler_replays() {
        let dist = DelayDistribution::iid_shared(exponential_pmf(5, 1.2).unwrap(), 4).unwrap();
        let a: Vec<_> = {
            let mut s = DelaySampler::new(dist.clone(), 9);
            (0..50).map(|_| s.sample()).collect()
        };
        let mut s = DelaySampler::new(dist, 9);
        let b: Vec<_> = (0..50).map(|_| s.sample()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn markov_chain_frequencies() {
        let t = vec![vec![0.9, 0.1], vec![0.5, 0.5]];
        let dist = DelayDistribution::markov(2, vec![t], vec![vec![1.0, 0.0]]).unwrap();
        let stat = dist.stationary();
        // π0 = 0.5 / (0.1 + 0.5)
        assert_relative_eq!(stat[0][0], 5.0 / 6.0, epsilon = 1e-12);
        let mut s = DelaySampler::new(dist, 3);
        let n = 100_000;
        let hits = (0..n).filter(|_| s.sample().staleness[0] == 0).count();
        assert!((hits as f64 / n as f64 - 5.0 / 6.0).abs() < 0.01);
    }

    #[test]
    fn markov_from_iid_matches_iid_marginals() {
        let pmf = vec![0.6, 0.3, 0.1];
        let dist = DelayDistribution::markov_from_iid(&[pmf.clone()]).unwrap();
        assert_relative_eq!(dist.stationary()[0][1], 0.3, epsilon = 1e-12);
        let bad = vec![vec![vec![0.5, 0.6]; 2]];
        assert!(DelayDistribution::markov(2, bad, vec![vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn invalid_pmfs_rejected() {
        assert!(DelayDistribution::iid_shared(vec![0.5, 0.6], 2).is_err());
        assert!(DelayDistribution::iid_shared(vec![1.5, -0.5], 2).is_err());
        assert!(DelayDistribution::iid(3, vec![vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn base_q_encoding() {
        let cases = [(vec![0, 0], 0), (vec![0, 1], 1), (vec![1, 0], 2), (vec![1, 1], 3)];
        for (d, idx) in cases {
            assert_eq!(mode_index(&DelaySample::new(d), 2).unwrap(), idx);
        }
        assert_eq!(mode_count(2, 20, MODE_LIMIT).unwrap(), 1_048_576);
        assert!(mode_count(30, 150, MODE_LIMIT).is_err());
        assert!(mode_index(&DelaySample::new(vec![0; 150]), 30).is_err());
    }

    #[test]
    fn exhaustive_bijection() {
        for (q, n) in [(2usize, 10usize), (3, 5), (10, 4), (5, 3)] {
            let count = mode_count(q, n, 10_000).unwrap();
            for idx in 0..count {
                let s = decode_mode(idx, q, n).unwrap();
                assert_eq!(mode_index(&s, q).unwrap(), idx);
            }
        }
    }

    #[test]
    fn joint_pmf_products() {
        let single = DelayDistribution::iid(2, vec![vec![0.7, 0.3]]).unwrap();
        assert_eq!(joint_pmf(&single, 1 << 20).unwrap(), vec![0.7, 0.3]);
        let d = DelayDistribution::iid(2, vec![vec![0.5, 0.5]; 2]).unwrap();
        assert_eq!(joint_pmf(&d, 1 << 20).unwrap(), vec![0.25; 4]);
        let d = DelayDistribution::iid(2, vec![vec![0.7, 0.3], vec![0.9, 0.1]]).unwrap();
        let j = joint_pmf(&d, 1 << 20).unwrap();
        for (got, want) in j.iter().zip([0.63, 0.07, 0.27, 0.03]) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
        let big = DelayDistribution::iid_shared(uniform_pmf(3), 20).unwrap();
        assert!(joint_pmf(&big, 10_000).is_err());
    }

    proptest::proptest! {
        #[test]
        fn decode_encode_round_trip(digits in proptest::collection::vec(0usize..3, 5)) {
            let s = DelaySample::new(digits);
            let idx = mode_index(&s, 3).unwrap();
            proptest::prop_assert!(idx < 243);
            proptest::prop_assert_eq!(decode_mode(idx, 3, 5).unwrap(), s);
        }

        #[test]
        fn joint_pmf_sums_to_one(raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 1..5)) {
            let pmfs: Vec<Vec<f64>> = raw.iter().map(|r| {
                let t: f64 = r.iter().sum();
                r.iter().map(|x| x / t).collect()
            }).collect();
            let d = DelayDistribution::iid(3, pmfs).unwrap();
            let total: f64 = joint_pmf(&d, 1 << 20).unwrap().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
