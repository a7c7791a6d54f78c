//! Matrix and vector p-norms, spectral radius.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Schur};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Which induced p-norm to use. Defaults to the 2-norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PNorm {
    One,
    #[default]
    Two,
    Inf,
}

impl PNorm {
    pub fn vector(self, v: &DVector<f64>) -> f64 {
        vector_p_norm(v.as_slice(), self)
    }

    pub fn matrix(self, m: &DMatrix<f64>) -> f64 {
        matrix_p_norm(m, self)
    }
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PNorm::One => "1",
            PNorm::Two => "2",
            PNorm::Inf => "inf",
        })
    }
}

impl FromStr for PNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" => Ok(PNorm::One),
            "2" => Ok(PNorm::Two),
            "inf" | "infinity" | "∞" => Ok(PNorm::Inf),
            other => Err(Error::InvalidParameter(format!(
                "p must be one of 1, 2, inf (got {other:?})"
            ))),
        }
    }
}

impl Serialize for PNorm {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PNorm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        // Accept both `2` and `"2"`.
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Int(v) => v.to_string(),
            Raw::Str(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

pub fn vector_p_norm(v: &[f64], p: PNorm) -> f64 {
    match p {
        PNorm::One => v.iter().map(|x| x.abs()).sum(),
        PNorm::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        PNorm::Inf => v.iter().fold(0.0, |acc, x| acc.max(x.abs())),
    }
}

/// Induced matrix p-norm.
///
/// `p = 1` is the max absolute column sum, `p = inf` the max absolute row
/// sum, and `p = 2` the largest singular value, found by cyclic Jacobi
/// iteration on the smaller Gram matrix to relative tolerance 1e-10 or
/// better.
pub fn matrix_p_norm(m: &DMatrix<f64>, p: PNorm) -> f64 {
    match p {
        PNorm::One => m
            .column_iter()
            .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        PNorm::Inf => m
            .row_iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        PNorm::Two => largest_singular_value(m),
    }
}

pub fn largest_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() || m.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    let top = jacobi_eigenvalues(gram)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    top.max(0.0).sqrt()
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps continue until the off-diagonal Frobenius mass drops below
/// `1e-15 * ||A||_F`; Jacobi converges quadratically, so this is reached in
/// a handful of sweeps for the small blocks used here.
pub fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let scale = a.norm();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    let tol = 1e-15 * scale;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// Size above which nonnegative matrices go through power iteration instead
/// of the dense Schur decomposition.
pub const DENSE_RADIUS_LIMIT: usize = 200;

const SCHUR_MAX_ITER: usize = 10_000;
const POWER_MAX_ITER: usize = 100_000;
const POWER_TOL: f64 = 1e-12;

/// Spectral radius `max |λ_i|`.
///
/// Matrices up to [`DENSE_RADIUS_LIMIT`] use a dense real Schur
/// decomposition. Larger entrywise-nonnegative matrices use power
/// iteration (Perron root); larger general matrices still use Schur.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "spectral radius of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() > DENSE_RADIUS_LIMIT && m.iter().all(|&x| x >= 0.0) {
        return perron_radius(m);
    }
    dense_spectral_radius(m)
}

pub fn dense_spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER).ok_or(
        Error::NoConvergence {
            iterations: SCHUR_MAX_ITER,
        },
    )?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Perron root of an entrywise-nonnegative matrix by power iteration.
///
/// Iterates on `(A + I) / 2`, which shares the Perron vector, is primitive
/// whenever `A` is irreducible, and so avoids the oscillation plain power
/// iteration shows on periodic matrices.
pub fn perron_radius(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    if m.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidParameter(
            "power iteration path requires an entrywise-nonnegative matrix".into(),
        ));
    }
    let shifted = (m + DMatrix::identity(n, n)) * 0.5;
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let w = &shifted * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = 2.0 * norm - 1.0;
        v = w / norm;
        if (next - estimate).abs() <= POWER_TOL * next.abs().max(1.0) {
            return Ok(next.max(0.0));
        }
        estimate = next;
    }
    Err(Error::NoConvergence {
        iterations: POWER_MAX_ITER,
    })
}
