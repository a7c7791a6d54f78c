//! Stability analysis of the delayed dual recursion.
//!
//! Three tiers, from cheapest to most exact:
//!
//! * the per-step norm condition `sum_j ||R_1j||_p < 1`, which certifies a
//!   contraction for whatever delay pattern produced the blocks and is what
//!   the gate evaluates online;
//! * the classical totally-asynchronous test `ρ(|I + ΣΦ_i|) < 1`;
//! * mean-square tests over the full switched system, which need all
//!   `q^N` companion matrices and are only usable on tiny instances.

mod norms;

pub use norms::{
    dense_spectral_radius, jacobi_eigenvalues, largest_singular_value, matrix_p_norm, perron_radius,
    spectral_radius, vector_p_norm, PNorm, DENSE_RADIUS_LIMIT,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::async_engine::{assemble_r_blocks, build_w_matrix, RBlockSet};
use crate::delay::{decode_mode, mode_count, validate_pmf};
use crate::error::{Error, Result};
use crate::problem::PhiSet;

/// Largest mode count [`enumerate_modes`] will materialize.
pub const ENUMERATION_LIMIT: u64 = 10_000;

/// Largest lifted dimension `(qm)^2` (times `η` for the Markov test) the
/// Kronecker tests will build.
pub const KRONECKER_DIM_LIMIT: usize = 2_500;

/// `ρ(|I + ΣΦ_i|)` with the absolute value taken entrywise.
pub fn bertsekas_condition(phi_set: &PhiSet) -> Result<f64> {
    spectral_radius(&phi_set.sync_matrix().abs())
}

/// `ρ(I + ΣΦ_i)`, the synchronous rate.
pub fn sync_radius(phi_set: &PhiSet) -> Result<f64> {
    spectral_radius(&phi_set.sync_matrix())
}

/// `sum_j ||R_1j||_p`; the gate updates only when this is strictly below 1.
pub fn step_condition_value(rset: &RBlockSet, p: PNorm) -> f64 {
    rset.r_blocks
        .iter()
        .zip(&rset.occupied)
        .enumerate()
        .filter(|(j, (_, &occ))| *j == 0 || occ)
        .map(|(_, (blk, _))| matrix_p_norm(blk, p))
        .sum()
}

/// One companion matrix per delay pattern, ordered by mode index.
pub fn enumerate_modes(phi_set: &PhiSet, q: usize) -> Result<Vec<DMatrix<f64>>> {
    let n = phi_set.n_blocks();
    let count = mode_count(q, n, ENUMERATION_LIMIT)?;
    (0..count)
        .map(|idx| {
            let sample = decode_mode(idx, q, n)?;
            Ok(build_w_matrix(&assemble_r_blocks(phi_set, &sample, q)?))
        })
        .collect()
}

/// The four two-node, two-slot companion matrices written out by hand:
///
/// ```text
/// W1 = [I+Φ1+Φ2, 0; I, 0]   W2 = [I+Φ1, Φ2; I, 0]
/// W3 = [I+Φ2, Φ1; I, 0]     W4 = [I, Φ1+Φ2; I, 0]
/// ```
///
/// W1 is all-current, W2 has node 2 stale, W3 node 1 stale, W4 both.
pub fn two_node_reference_modes(phi_set: &PhiSet) -> Result<[DMatrix<f64>; 4]> {
    if phi_set.n_blocks() != 2 {
        return Err(Error::Dimension(format!(
            "reference modes need N = 2, got {}",
            phi_set.n_blocks()
        )));
    }
    let m = phi_set.m();
    let eye = DMatrix::<f64>::identity(m, m);
    let zero = DMatrix::<f64>::zeros(m, m);
    let (p1, p2) = (&phi_set.phis[0], &phi_set.phis[1]);
    let mk = |r11: DMatrix<f64>, r12: DMatrix<f64>| {
        let mut w = DMatrix::zeros(2 * m, 2 * m);
        w.view_mut((0, 0), (m, m)).copy_from(&r11);
        w.view_mut((0, m), (m, m)).copy_from(&r12);
        w.view_mut((m, 0), (m, m)).copy_from(&eye);
        w
    };
    Ok([
        mk(&eye + p1 + p2, zero.clone()),
        mk(&eye + p1, p2.clone()),
        mk(&eye + p2, p1.clone()),
        mk(eye.clone(), &zero + p1 + p2),
    ])
}

fn check_modes(modes: &[DMatrix<f64>]) -> Result<usize> {
    let first = modes
        .first()
        .ok_or_else(|| Error::InvalidParameter("no modes given".into()))?;
    let d = first.nrows();
    if modes.iter().any(|w| w.nrows() != d || w.ncols() != d) {
        return Err(Error::Dimension("modes must be square and of equal size".into()));
    }
    Ok(d)
}

/// Mean-square test for iid switching: `ρ(sum_r π_r W_r ⊗ W_r)`.
pub fn iid_kronecker_test(modes: &[DMatrix<f64>], pmf: &[f64]) -> Result<f64> {
    let d = check_modes(modes)?;
    validate_pmf(pmf, modes.len())?;
    if d * d > KRONECKER_DIM_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "lifted dimension {} exceeds {KRONECKER_DIM_LIMIT}",
            d * d
        )));
    }
    let mut lifted = DMatrix::zeros(d * d, d * d);
    for (w, &pi) in modes.iter().zip(pmf) {
        if pi != 0.0 {
            lifted += w.kronecker(w) * pi;
        }
    }
    spectral_radius(&lifted)
}

/// Mean-square test for Markov switching with mode transition matrix `P`
/// (row-stochastic, `P[r][s]` = probability of mode `s` after mode `r`):
/// `ρ((P' ⊗ I) diag(W_r ⊗ W_r))`.
pub fn markov_kronecker_test(modes: &[DMatrix<f64>], transition: &[Vec<f64>]) -> Result<f64> {
    let d = check_modes(modes)?;
    let eta = modes.len();
    if transition.len() != eta {
        return Err(Error::Dimension(format!(
            "transition matrix has {} rows for {eta} modes",
            transition.len()
        )));
    }
    for row in transition {
        validate_pmf(row, eta)?;
    }
    let block = d * d;
    if block * eta > KRONECKER_DIM_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "lifted dimension {} exceeds {KRONECKER_DIM_LIMIT}",
            block * eta
        )));
    }
    let lifts: Vec<DMatrix<f64>> = modes.iter().map(|w| w.kronecker(w)).collect();
    let mut big = DMatrix::zeros(block * eta, block * eta);
    // block (s, r) = P[r][s] * (W_r ⊗ W_r)
    for s in 0..eta {
        for r in 0..eta {
            let p = transition[r][s];
            if p != 0.0 {
                big.view_mut((s * block, r * block), (block, block))
                    .copy_from(&(&lifts[r] * p));
            }
        }
    }
    spectral_radius(&big)
}

/// Min / mean / max of the per-step condition over sampled delay patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub samples: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub fraction_below_one: f64,
}

impl ConditionStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return ConditionStats {
                samples: 0,
                min: f64::NAN,
                mean: f64::NAN,
                max: f64::NAN,
                fraction_below_one: 0.0,
            };
        }
        ConditionStats {
            samples: n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            mean: values.iter().sum::<f64>() / n as f64,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            fraction_below_one: values.iter().filter(|&&v| v < 1.0).count() as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub bertsekas_rho: f64,
    pub sync_rho: f64,
    pub norm_condition_samples: ConditionStats,
    pub p: PNorm,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::{joint_pmf, DelayDistribution, DelaySample};
    use crate::problem::{generate_random_problem, GeneratorSpec};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_phis(values: &[f64]) -> PhiSet {
        PhiSet {
            phis: values.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
            bias: DVector::zeros(1),
        }
    }

    fn tiny(seed: u64, n_blocks: usize, m: usize, alpha: f64) -> PhiSet {
        generate_random_problem(
            seed,
            GeneratorSpec {
                n_blocks,
                n: 3,
                m,
                alpha,
                conditioning: 10.0,
            },
        )
        .unwrap()
        .phi_set()
    }

    #[test]
    fn bertsekas_of_scaled_identity() {
        let phi = PhiSet {
            phis: vec![DMatrix::identity(2, 2) * -0.25, DMatrix::identity(2, 2) * -0.25],
            bias: DVector::zeros(2),
        };
        assert!((bertsekas_condition(&phi).unwrap() - 0.5).abs() < 1e-14);
        assert!((sync_radius(&phi).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn bertsekas_is_conservative_under_positive_correlation() {
        // -ΣΦ = α S with S = (1 - s) I + s J: eigenvalues 1 - s (x2) and 1 + 2s
        let s = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.6 });
        let phi = PhiSet {
            phis: vec![&s * -0.5],
            bias: DVector::zeros(3),
        };
        let bert = bertsekas_condition(&phi).unwrap();
        let sync = sync_radius(&phi).unwrap();
        // |I - αS| = (1 - α) I + 0.6α (J - I) has Perron root 1 - α + 1.2α
        assert!((bert - 1.1).abs() < 1e-12);
        assert!((sync - 0.8).abs() < 1e-12);
    }

    #[test]
    fn condition_value_cases() {
        let phi = scalar_phis(&[-0.3, -0.4]);
        let r = assemble_r_blocks(&phi, &DelaySample::new(vec![0, 1]), 2).unwrap();
        assert!((step_condition_value(&r, PNorm::Two) - 1.1).abs() < 1e-15);
        let r = assemble_r_blocks(&phi, &DelaySample::new(vec![0, 0]), 2).unwrap();
        assert!((step_condition_value(&r, PNorm::Two) - 0.3).abs() < 1e-15);

        let phi = tiny(1, 5, 3, 0.1);
        let base = matrix_p_norm(&phi.sync_matrix(), PNorm::Two);
        let r = assemble_r_blocks(&phi, &DelaySample::current(5), 4).unwrap();
        assert!((step_condition_value(&r, PNorm::Two) - base).abs() < 1e-14);
    }

    #[test]
    fn condition_value_triangle_bound() {
        let phi = tiny(2, 6, 3, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in [PNorm::One, PNorm::Two, PNorm::Inf] {
            let base = matrix_p_norm(&phi.sync_matrix(), p);
            for _ in 0..200 {
                let s = DelaySample::new((0..6).map(|_| rng.random_range(0..3)).collect());
                let r = assemble_r_blocks(&phi, &s, 3).unwrap();
                let stale: f64 = r.r_blocks[1..].iter().map(|b| matrix_p_norm(b, p)).sum();
                let v = step_condition_value(&r, p);
                assert!(v >= base - 2.0 * stale - 1e-12);
                assert!(v >= base - 1e-12);
            }
        }
    }

    #[test]
    fn single_slot_enumeration() {
        let phi = tiny(3, 3, 2, 0.1);
        let modes = enumerate_modes(&phi, 1).unwrap();
        assert_eq!(modes.len(), 1);
        assert_eq!(modes[0], phi.sync_matrix());
    }

    #[test]
    fn two_node_enumeration_matches_hand_built_modes() {
        let phi = tiny(4, 2, 3, 0.1);
        let modes = enumerate_modes(&phi, 2).unwrap();
        let [w1, w2, w3, w4] = two_node_reference_modes(&phi).unwrap();
        assert_eq!(modes, vec![w1, w2, w3, w4]);
    }

    #[test]
    fn enumeration_partition_sweep() {
        let phi = tiny(5, 2, 2, 0.1);
        let modes = enumerate_modes(&phi, 3).unwrap();
        assert_eq!(modes.len(), 9);
        let target = phi.sync_matrix();
        for w in &modes {
            let mut top = DMatrix::zeros(2, 2);
            for j in 0..3 {
                top += w.view((0, 2 * j), (2, 2));
            }
            assert!((top - &target).amax() < 1e-12);
        }
        let big = tiny(5, 14, 2, 0.1);
        assert!(matches!(enumerate_modes(&big, 2), Err(Error::ModeOverflow { .. })));
    }

    #[test]
    fn kronecker_scalar_and_single_mode() {
        let modes = vec![DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 1.2)];
        let v = iid_kronecker_test(&modes, &[0.9, 0.1]).unwrap();
        assert!((v - 0.369).abs() < 1e-14);

        let w = DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.0, -0.7]);
        let s = spectral_radius(&w).unwrap();
        let v = iid_kronecker_test(&[w], &[1.0]).unwrap();
        assert!((v - s * s).abs() < 1e-12);
        assert!(iid_kronecker_test(&modes, &[0.5]).is_err());
    }

    #[test]
    fn markov_test_reduces_to_iid_with_identical_rows() {
        let phi = tiny(6, 2, 2, 0.15);
        let modes = enumerate_modes(&phi, 2).unwrap();
        let dist = DelayDistribution::iid(2, vec![vec![0.7, 0.3], vec![0.6, 0.4]]).unwrap();
        let pi = joint_pmf(&dist, ENUMERATION_LIMIT).unwrap();
        let iid = iid_kronecker_test(&modes, &pi).unwrap();
        let markov = markov_kronecker_test(&modes, &vec![pi.clone(); 4]).unwrap();
        assert!((iid - markov).abs() < 1e-9, "{iid} vs {markov}");
    }

    #[test]
    fn all_stale_mode_never_passes_the_norm_condition() {
        // R_11 = I whenever every node is stale
        let phi = tiny(7, 2, 2, 0.05);
        let r = assemble_r_blocks(&phi, &DelaySample::new(vec![1, 1]), 2).unwrap();
        assert!(step_condition_value(&r, PNorm::Two) >= 1.0);
    }

    #[test]
    fn admissible_modes_are_mean_square_stable() {
        let phi = tiny(7, 2, 2, 0.05);
        let modes = enumerate_modes(&phi, 2).unwrap();
        let admissible: Vec<DMatrix<f64>> = (0..4)
            .filter(|&idx| {
                let s = decode_mode(idx, 2, 2).unwrap();
                step_condition_value(&assemble_r_blocks(&phi, &s, 2).unwrap(), PNorm::Two) < 1.0
            })
            .map(|idx| modes[idx as usize].clone())
            .collect();
        assert!(!admissible.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let raw: Vec<f64> = (0..admissible.len()).map(|_| rng.random_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let pmf: Vec<f64> = raw.iter().map(|x| x / total).collect();
            assert!(iid_kronecker_test(&admissible, &pmf).unwrap() < 1.0);
        }
    }

    #[test]
    fn stats_summary() {
        let s = ConditionStats::from_values(&[0.5, 1.5, 0.9, 1.0]);
        assert_eq!(s.min, 0.5);
        assert_eq!(s.max, 1.5);
        assert!((s.mean - 0.975).abs() < 1e-15);
        assert_eq!(s.fraction_below_one, 0.5);
    }
}
