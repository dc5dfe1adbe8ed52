//! Gaussian log-likelihood and Lq-likelihood of replicated fields via one
//! Cholesky factorization of `Σ(θ)` per parameter point.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matern::{build_cov, LocationSet, MaternParams};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative diagonal jitter tried once when a factorization fails.
pub const JITTER: f64 = 1e-10;

/// `m` replicates observed at the same `n` locations; column `i` is `Z_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSet {
    data: DMatrix<f64>,
}

impl ReplicateSet {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() == 0 {
            return Err(Error::dimension("replicate set must have n ≥ 1 rows and m ≥ 1 columns"));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            let (r, c) = (idx % data.nrows(), idx / data.nrows());
            return Err(Error::domain(format!("non-finite value at location {r}, replicate {c}")));
        }
        Ok(ReplicateSet { data })
    }

    /// Builds from replicate vectors, each of length `n`.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let n = cols.first().map(Vec::len).unwrap_or(0);
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::dimension("replicates have different lengths"));
        }
        let data = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
        Self::new(data)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn m(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.data.column(i).into_owned()
    }

    /// Keeps only the listed replicates, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let cols: Vec<_> = idx.iter().map(|&i| self.data.column(i)).collect();
        Self::new(DMatrix::from_columns(&cols))
    }

    /// Mean of `z²` over all cells (the variance of a zero-mean field).
    pub fn pooled_mean_square(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn check_locations(&self, locs: &LocationSet) -> Result<()> {
        if locs.len() != self.n() {
            return Err(Error::dimension(format!(
                "{} locations but replicates have length {}",
                locs.len(),
                self.n()
            )));
        }
        Ok(())
    }
}

/// Lower Cholesky factor `L` of `Σ` with `log|Σ|`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: DMatrix<f64>,
    log_det: f64,
    jitter: f64,
}

impl CholFactor {
    /// Factors `sigma`; on failure retries once with `JITTER·max(diag)` added to
    /// the diagonal. `theta` only labels the error.
    pub fn new(sigma: DMatrix<f64>, theta: &MaternParams) -> Result<Self> {
        if let Some(c) = sigma.clone().cholesky() {
            return Ok(Self::from_l(c.unpack(), 0.0));
        }
        let scale = sigma.diagonal().amax();
        let jitter = JITTER * scale;
        let mut bumped = sigma;
        for i in 0..bumped.nrows() {
            bumped[(i, i)] += jitter;
        }
        match bumped.cholesky() {
            Some(c) => Ok(Self::from_l(c.unpack(), jitter)),
            None => Err(Error::NotPositiveDefinite { theta: *theta }),
        }
    }

    fn from_l(l: DMatrix<f64>, jitter: f64) -> Self {
        let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        CholFactor { l, log_det, jitter }
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn n(&self) -> usize {
        self.l.nrows()
    }

    /// `log|Σ| = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Diagonal jitter that had to be added, or 0.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Solves `L Y = B` column by column.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = b.clone();
        self.l.solve_lower_triangular_mut(&mut y);
        y
    }

    /// `Σ⁻¹ B` through the two triangular solves.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = self.solve_lower(b);
        self.l.tr_solve_lower_triangular_mut(&mut y);
        y
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = b.clone();
        self.l.solve_lower_triangular_mut(&mut y);
        self.l.tr_solve_lower_triangular_mut(&mut y);
        y
    }

    /// Gaussian log-density of each column of `z`.
    pub fn log_densities(&self, z: &DMatrix<f64>) -> Vec<f64> {
        let y = self.solve_lower(z);
        let n = self.n() as f64;
        let base = -0.5 * n * LN_2PI - 0.5 * self.log_det;
        y.column_iter().map(|c| base - 0.5 * c.norm_squared()).collect()
    }
}

/// Factors `Σ(θ)` over `locs`.
pub fn factor(locs: &LocationSet, theta: &MaternParams) -> Result<CholFactor> {
    CholFactor::new(build_cov(locs, theta)?, theta)
}

/// `l = -(n/2)ln(2π) - ½‖y‖² - ½log|Σ|` with `L y = z`.
pub fn log_likelihood(z: &DVector<f64>, chol: &CholFactor) -> Result<f64> {
    if z.len() != chol.n() {
        return Err(Error::dimension(format!(
            "vector of length {} against a {}x{} factor",
            z.len(),
            chol.n(),
            chol.n()
        )));
    }
    let mut y = z.clone();
    chol.l.solve_lower_triangular_mut(&mut y);
    let n = z.len() as f64;
    Ok(-0.5 * n * LN_2PI - 0.5 * y.norm_squared() - 0.5 * chol.log_det)
}

/// An Lq-transformed log-likelihood value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqValue {
    pub value: f64,
    pub q: f64,
    /// True when the value is `exp[(l+n)(1-q)]` rather than the exact `L_q`.
    pub scaled: bool,
}

pub(crate) fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain(format!("q must lie in (0, 1], got {q}")));
    }
    Ok(())
}

/// Maps a log-likelihood `l` to the Lq scale.
///
/// `q = 1` returns `l`. Otherwise `scale = false` gives the exact
/// `(e^{l(1-q)} - 1)/(1-q)` and `scale = true` gives `e^{(l+n)(1-q)}`, a strictly
/// increasing transform of it that does not underflow for large `n`.
pub fn lq_of_loglik(l: f64, q: f64, n: usize, scale: bool) -> Result<LqValue> {
    check_q(q)?;
    if q == 1.0 {
        return Ok(LqValue {
            value: l,
            q,
            scaled: false,
        });
    }
    let a = 1.0 - q;
    let value = if scale {
        ((l + n as f64) * a).exp()
    } else {
        (l * a).exp_m1() / a
    };
    Ok(LqValue { value, q, scaled: scale })
}

/// `Σ_i L_q(Z_i)` with one factorization shared by all replicates, summed in
/// replicate order.
pub fn total_lq(
    reps: &ReplicateSet,
    locs: &LocationSet,
    theta: &MaternParams,
    q: f64,
    scale: bool,
) -> Result<f64> {
    check_q(q)?;
    reps.check_locations(locs)?;
    let chol = factor(locs, theta)?;
    total_lq_with(reps, &chol, q, scale)
}

pub(crate) fn total_lq_with(reps: &ReplicateSet, chol: &CholFactor, q: f64, scale: bool) -> Result<f64> {
    let n = reps.n();
    let mut total = 0.0;
    for l in chol.log_densities(reps.data()) {
        total += lq_of_loglik(l, q, n, scale)?.value;
    }
    Ok(total)
}
