//! Separable QP instances and their block-level dual quantities.
//!
//! The primal problem is
//!
//! ```text
//! minimize   sum_i ( 1/2 x_i' Q_i x_i + c_i' x_i )
//! subject to sum_i A_i x_i <= b
//! ```
//!
//! and each block contributes a dual curvature term
//! `Φ_i = -α_i A_i Q_i^{-1} A_i'` to the dual ascent recursion.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Max absolute asymmetry allowed in `Q_i`.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Block {
    q: DMatrix<f64>,
    a: DMatrix<f64>,
    c: DVector<f64>,
    alpha: f64,
    chol: Cholesky<f64, Dyn>,
}

impl Block {
    /// Validates and factors a block. `Q` must be symmetric to
    /// [`SYMMETRY_TOL`] and positive definite; `A` must have `n_i` columns.
    pub fn new(q: DMatrix<f64>, a: DMatrix<f64>, c: DVector<f64>, alpha: f64) -> Result<Self> {
        let n = q.nrows();
        if n == 0 || !q.is_square() {
            return Err(Error::Dimension(format!(
                "Q must be a nonempty square matrix, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        if a.ncols() != n || c.len() != n {
            return Err(Error::Dimension(format!(
                "block with n_i = {n} has A with {} columns and c of length {}",
                a.ncols(),
                c.len()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
        }
        let asym = (&q - q.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidParameter(format!(
                "Q is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let chol = Cholesky::new(q.clone()).ok_or(Error::SingularQ { block: 0 })?;
        Ok(Block { q, a, c, alpha, chol })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Local variable dimension `n_i`.
    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// Constraint dimension `m`.
    pub fn constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Block { alpha, ..self.clone() })
    }

    /// `Φ_i = -α_i A_i Q_i^{-1} A_i'`, via the Cholesky factor of `Q_i`.
    pub fn phi(&self) -> DMatrix<f64> {
        let qinv_at = self.chol.solve(&self.a.transpose());
        let mut phi = &self.a * qinv_at * (-self.alpha);
        symmetrize(&mut phi);
        phi
    }

    /// This block's share of the bias: `-α_i A_i Q_i^{-1} c_i - α_i b / N`.
    pub fn bias_term(&self, b: &DVector<f64>, n_blocks: usize) -> DVector<f64> {
        let qinv_c = self.chol.solve(&self.c);
        (&self.a * qinv_c) * (-self.alpha) - b * (self.alpha / n_blocks as f64)
    }

    /// Minimizer of the block Lagrangian at fixed dual `y`:
    /// `x_i = -Q_i^{-1} (A_i' y + c_i)`.
    pub fn primal_from_dual(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.constraints() {
            return Err(Error::Dimension(format!(
                "dual vector has length {}, expected {}",
                y.len(),
                self.constraints()
            )));
        }
        let rhs = self.a.transpose() * y + &self.c;
        Ok(-self.chol.solve(&rhs))
    }
}

impl PartialEq for Block {
    fn eq(&self, other: &Self) -> bool {
        self.q == other.q && self.a == other.a && self.c == other.c && self.alpha == other.alpha
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparableQpProblem {
    blocks: Vec<Block>,
    b: DVector<f64>,
    seed: Option<u64>,
}

impl SeparableQpProblem {
    pub fn new(blocks: Vec<Block>, b: DVector<f64>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Dimension("problem needs at least one block".into()));
        }
        let m = b.len();
        if m == 0 {
            return Err(Error::Dimension("constraint dimension m must be positive".into()));
        }
        for (i, blk) in blocks.iter().enumerate() {
            if blk.constraints() != m {
                return Err(Error::Dimension(format!(
                    "block {i}: A has {} rows, expected m = {m}",
                    blk.constraints()
                )));
            }
        }
        Ok(SeparableQpProblem { blocks, b, seed: None })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// Number of blocks `N`.
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Constraint dimension `m`.
    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Same instance with every step size set to `alpha`.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.with_alpha(alpha))
            .collect::<Result<_>>()?;
        Ok(SeparableQpProblem { blocks, ..self.clone() })
    }

    /// Same instance with every step size multiplied by `factor`.
    pub fn scale_alpha(&self, factor: f64) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.with_alpha(b.alpha * factor))
            .collect::<Result<_>>()?;
        Ok(SeparableQpProblem { blocks, ..self.clone() })
    }

    /// Extreme eigenvalues of `sum_i A_i Q_i^{-1} A_i'`, the dual curvature
    /// at unit step size.
    pub fn curvature_bounds(&self) -> (f64, f64) {
        let m = self.m();
        let mut h = DMatrix::zeros(m, m);
        for blk in &self.blocks {
            h -= blk.phi() / blk.alpha;
        }
        let ev = h.symmetric_eigenvalues();
        (ev.min(), ev.max())
    }

    /// Same instance with a common step size chosen so the synchronous
    /// iteration contracts at `rate` (the smaller of the two admissible
    /// step sizes). Rates below `(κ-1)/(κ+1)` are unreachable.
    pub fn with_sync_rate(&self, rate: f64) -> Result<Self> {
        let (lo, hi) = self.curvature_bounds();
        if !(lo > 0.0) {
            return Err(Error::SingularAggregate);
        }
        let alpha = (1.0 - rate) / lo;
        if !(rate < 1.0) || alpha * hi - 1.0 > rate {
            return Err(Error::InvalidParameter(format!(
                "sync rate {rate} outside [{}, 1)",
                (hi - lo) / (hi + lo)
            )));
        }
        self.with_alpha(alpha)
    }

    /// Same coupling with `c_i = 0` and `b = 0`.
    pub fn homogeneous(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                c: DVector::zeros(b.dim()),
                ..b.clone()
            })
            .collect();
        SeparableQpProblem {
            blocks,
            b: DVector::zeros(self.m()),
            seed: self.seed,
        }
    }

    pub fn phi_set(&self) -> PhiSet {
        PhiSet {
            phis: self.blocks.iter().map(Block::phi).collect(),
            bias: compute_bias(self),
        }
    }

    pub fn primal_from_dual(&self, y: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.blocks.iter().map(|b| b.primal_from_dual(y)).collect()
    }

    /// `sum_i A_i x_i - b`, the dual gradient.
    pub fn constraint_residual(&self, x: &[DVector<f64>]) -> DVector<f64> {
        let mut r = -self.b.clone();
        for (blk, xi) in self.blocks.iter().zip(x) {
            r += blk.a() * xi;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ProblemFile::from(self)).expect("problem serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile =
            serde_json::from_str(text).map_err(|e| Error::format("problem JSON", e))?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }
}

/// The per-block curvature matrices `Φ_i` and the aggregate bias `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiSet {
    pub phis: Vec<DMatrix<f64>>,
    pub bias: DVector<f64>,
}

impl PhiSet {
    pub fn m(&self) -> usize {
        self.bias.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.phis.len()
    }

    /// `I + sum_i Φ_i`, accumulated in block order.
    pub fn sync_matrix(&self) -> DMatrix<f64> {
        let mut r = DMatrix::identity(self.m(), self.m());
        for phi in &self.phis {
            r += phi;
        }
        r
    }

    /// `sum_i Φ_i`.
    pub fn phi_sum(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.m(), self.m());
        for phi in &self.phis {
            s += phi;
        }
        s
    }
}

pub fn compute_phi(block: &Block) -> DMatrix<f64> {
    block.phi()
}

/// `B = sum_i ( -α_i A_i Q_i^{-1} c_i - α_i b / N )`.
pub fn compute_bias(problem: &SeparableQpProblem) -> DVector<f64> {
    let n = problem.n_blocks();
    let mut bias = DVector::zeros(problem.m());
    for blk in problem.blocks() {
        bias += blk.bias_term(problem.b(), n);
    }
    bias
}

pub fn primal_from_dual(block: &Block, y: &DVector<f64>) -> Result<DVector<f64>> {
    block.primal_from_dual(y)
}

/// Relative pivot threshold for declaring `sum Φ_i` singular.
const AGGREGATE_RCOND: f64 = 1e-12;

/// Stationary point of the dual recursion, `y* = -(sum Φ_i)^{-1} B`.
///
/// `-sum Φ_i` is symmetric positive semidefinite, so a Cholesky factor
/// exists exactly when the stacked coupling has full row rank.
pub fn sync_fixed_point(problem: &SeparableQpProblem) -> Result<DVector<f64>> {
    fixed_point_of(&problem.phi_set())
}

pub fn fixed_point_of(phi_set: &PhiSet) -> Result<DVector<f64>> {
    let neg = -phi_set.phi_sum();
    let scale = neg.amax();
    if scale == 0.0 {
        return Err(Error::SingularAggregate);
    }
    let chol = Cholesky::new(neg.clone()).ok_or(Error::SingularAggregate)?;
    let l = chol.l();
    let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |a, &x| a.min(x * x));
    if min_pivot < AGGREGATE_RCOND * scale {
        return Err(Error::SingularAggregate);
    }
    // (-ΣΦ) y* = B
    Ok(chol.solve(&phi_set.bias))
}

/// Dimensions and knobs for the random instance generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(rename = "N")]
    pub n_blocks: usize,
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    /// Upper bound on cond(Q_i).
    pub conditioning: f64,
}

/// Deterministic random instance.
///
/// Each `Q_i = M'M + δI` with `M` uniform(-1,1) entries and the smallest `δ`
/// making `cond(Q_i) <= conditioning`; `A_i`, `c_i` uniform(-1,1); `b`
/// uniform(-1,1) scaled by `N`, standing in for the sum of per-block
/// right-hand sides.
pub fn generate_random_problem(seed: u64, spec: GeneratorSpec) -> Result<SeparableQpProblem> {
    let GeneratorSpec {
        n_blocks,
        n,
        m,
        alpha,
        conditioning,
    } = spec;
    if n_blocks == 0 || n == 0 || m == 0 {
        return Err(Error::Dimension(format!(
            "N, n, m must be positive (got N={n_blocks}, n={n}, m={m})"
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    if !(conditioning >= 1.0 && conditioning.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "conditioning must be >= 1, got {conditioning}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));

    let mut parts = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mm = uniform(n, n);
        let a = uniform(m, n);
        let c = uniform(n, 1).column(0).into_owned();
        parts.push((mm, a, c));
    }
    let b = uniform(m, 1).column(0).into_owned() * n_blocks as f64;

    let mut blocks = Vec::with_capacity(n_blocks);
    for (i, (mm, a, c)) in parts.into_iter().enumerate() {
        let mut q = mm.transpose() * &mm;
        symmetrize(&mut q);
        let eig = crate::stability::jacobi_eigenvalues(q.clone());
        let lmax = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        // cond(M'M + δI) = (lmax + δ) / (lmin + δ) <= κ
        let mut delta = if conditioning > 1.0 {
            ((lmax - conditioning * lmin) / (conditioning - 1.0)).max(0.0)
        } else {
            0.0
        };
        // guard against rank deficiency and rounding right at the cap
        delta = delta.max(1e-12 * lmax.max(1.0)) * (1.0 + 1e-9);
        if conditioning == 1.0 {
            q = DMatrix::identity(n, n) * lmax.max(1.0);
        } else {
            for d in 0..n {
                q[(d, d)] += delta;
            }
        }
        let blk = Block::new(q, a, c, alpha).map_err(|e| match e {
            Error::SingularQ { .. } => Error::SingularQ { block: i },
            other => other,
        })?;
        blocks.push(blk);
    }
    let mut problem = SeparableQpProblem::new(blocks, b)?;
    problem.seed = Some(seed);
    Ok(problem)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    #[serde(rename = "N")]
    n_blocks: usize,
    m: usize,
    #[serde(default)]
    seed: Option<u64>,
    blocks: Vec<BlockFile>,
    b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockFile {
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    c: Vec<f64>,
    alpha: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension(format!("{what}: ragged rows (expected {cols} columns)")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl From<&SeparableQpProblem> for ProblemFile {
    fn from(p: &SeparableQpProblem) -> Self {
        ProblemFile {
            n_blocks: p.n_blocks(),
            m: p.m(),
            seed: p.seed,
            blocks: p
                .blocks
                .iter()
                .map(|b| BlockFile {
                    q: rows_of(&b.q),
                    a: rows_of(&b.a),
                    c: b.c.iter().copied().collect(),
                    alpha: b.alpha,
                })
                .collect(),
            b: p.b.iter().copied().collect(),
        }
    }
}

impl TryFrom<ProblemFile> for SeparableQpProblem {
    type Error = Error;

    fn try_from(f: ProblemFile) -> Result<Self> {
        if f.blocks.len() != f.n_blocks {
            return Err(Error::Dimension(format!(
                "N = {} but {} blocks given",
                f.n_blocks,
                f.blocks.len()
            )));
        }
        if f.b.len() != f.m {
            return Err(Error::Dimension(format!("m = {} but b has length {}", f.m, f.b.len())));
        }
        let mut blocks = Vec::with_capacity(f.blocks.len());
        for (i, bf) in f.blocks.into_iter().enumerate() {
            let n = bf.q.len();
            let q = matrix_from_rows(&bf.q, n, &format!("block {i} Q"))?;
            let a = matrix_from_rows(&bf.a, n, &format!("block {i} A"))?;
            let blk = Block::new(q, a, DVector::from_vec(bf.c), bf.alpha).map_err(|e| match e {
                Error::SingularQ { .. } => Error::SingularQ { block: i },
                other => other,
            })?;
            blocks.push(blk);
        }
        let mut p = SeparableQpProblem::new(blocks, DVector::from_vec(f.b))?;
        p.seed = f.seed;
        Ok(p)
    }
}
