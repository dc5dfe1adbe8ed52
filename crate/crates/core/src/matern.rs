//! Matérn covariance `M(h; θ) = σ²/(Γ(ν)2^{ν-1}) (h/β)^ν K_ν(h/β)`, covariance
//! matrices over a location set, and first/second derivatives in `θ`.

use std::fmt;

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::specfun::{self, NuOrder};

pub type CovMatrix = DMatrix<f64>;

/// Parameter vector `θ = (σ², β, ν)`: variance, range and smoothness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    pub sigma2: f64,
    pub beta: f64,
    pub nu: f64,
}

impl MaternParams {
    pub const DEFAULT_NU_CAP: f64 = 5.0;

    pub fn new(sigma2: f64, beta: f64, nu: f64) -> Result<Self> {
        Self::with_nu_cap(sigma2, beta, nu, Self::DEFAULT_NU_CAP)
    }

    pub fn with_nu_cap(sigma2: f64, beta: f64, nu: f64, cap: f64) -> Result<Self> {
        let theta = MaternParams { sigma2, beta, nu };
        theta.validate()?;
        if nu > cap {
            return Err(Error::domain(format!("nu = {nu} exceeds the cap {cap}")));
        }
        Ok(theta)
    }

    /// Checks that all three components are strictly positive and finite.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma2", self.sigma2), ("beta", self.beta), ("nu", self.nu)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.sigma2, self.beta, self.nu]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        MaternParams {
            sigma2: a[0],
            beta: a[1],
            nu: a[2],
        }
    }

    /// `σ² β^{−2ν}`.
    pub fn kappa(&self) -> f64 {
        self.sigma2 * self.beta.powf(-2.0 * self.nu)
    }
}

impl fmt::Display for MaternParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(sigma2={}, beta={}, nu={})", self.sigma2, self.beta, self.nu)
    }
}

/// Distinct planar locations with their pairwise distance table.
///
/// Pair distances are stored once per unordered pair; identical distances
/// (bitwise) share one slot so kernels are evaluated once per distinct value.
#[derive(Debug, Clone)]
pub struct LocationSet {
    coords: Vec<[f64; 2]>,
    unique: Vec<f64>,
    pair_slot: Vec<u32>,
}

impl LocationSet {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::domain("a location set needs at least one point"));
        }
        if let Some(i) = coords.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::domain(format!("location {i} is not finite")));
        }
        let n = coords.len();
        let mut dists = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = euclid(coords[i], coords[j]);
                if d == 0.0 {
                    return Err(Error::DuplicateLocation(i, j));
                }
                dists.push(d);
            }
        }
        let mut order: Vec<u32> = (0..dists.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| dists[a as usize].total_cmp(&dists[b as usize]));
        let mut unique = Vec::new();
        let mut pair_slot = vec![0u32; dists.len()];
        for &p in &order {
            let d = dists[p as usize];
            if unique.last() != Some(&d) {
                unique.push(d);
            }
            pair_slot[p as usize] = (unique.len() - 1) as u32;
        }
        Ok(LocationSet {
            coords,
            unique,
            pair_slot,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclid(self.coords[i], self.coords[j])
    }

    /// Distinct off-diagonal distances, ascending.
    pub fn unique_distances(&self) -> &[f64] {
        &self.unique
    }

    pub fn max_distance(&self) -> f64 {
        self.unique.last().copied().unwrap_or(0.0)
    }

    /// Calls `f(i, j, slot)` for every pair `i < j`, where `slot` indexes
    /// [`unique_distances`](Self::unique_distances).
    pub(crate) fn for_each_pair(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.len();
        let mut p = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                f(i, j, self.pair_slot[p] as usize);
                p += 1;
            }
        }
    }

    /// Symmetric matrix with `diag` on the diagonal and `values[slot]` off it.
    pub(crate) fn fill_symmetric(&self, diag: f64, values: &[f64]) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::from_element(n, n, diag);
        self.for_each_pair(|i, j, s| {
            m[(i, j)] = values[s];
            m[(j, i)] = values[s];
        });
        m
    }
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per-θ constants of the Matérn kernel.
#[derive(Debug, Clone, Copy)]
struct Kernel {
    theta: MaternParams,
    /// `1 / (Γ(ν) 2^{ν-1})`
    norm: f64,
}

impl Kernel {
    fn new(theta: MaternParams) -> Result<Self> {
        theta.validate()?;
        let nu = theta.nu;
        let log_norm = -specfun::log_gamma(nu)? - (nu - 1.0) * std::f64::consts::LN_2;
        Ok(Kernel {
            theta,
            norm: log_norm.exp(),
        })
    }

    fn cov(&self, h: f64) -> Result<f64> {
        if h == 0.0 {
            return Ok(self.theta.sigma2);
        }
        let x = h / self.theta.beta;
        let v = self.theta.sigma2 * self.norm * specfun::xnu_k(self.theta.nu, x)?;
        // Rounding near h → 0 can push the product a hair above σ².
        Ok(v.min(self.theta.sigma2))
    }

    fn derivs(&self, h: f64) -> Result<Derivs> {
        if h == 0.0 {
            return Ok(Derivs {
                grad: Vector3::new(1.0, 0.0, 0.0),
                hess: Matrix3::zeros(),
            });
        }
        let MaternParams { sigma2, beta, nu } = self.theta;
        let c = self.norm;
        let x = h / beta;
        let xn = (nu * x.ln()).exp();
        let k = specfun::bessel_k(nu, x)?;
        let kp = specfun::bessel_k_dx(nu, x)?;
        let kpp = specfun::k_second_from(nu, x, k, kp);
        let g = xn * k;
        let dg = specfun::dnu_xnu_k(nu, x, NuOrder::First)?;
        let d2g = specfun::dnu_xnu_k(nu, x, NuOrder::Second)?;
        let dp = specfun::dnu_xnu_kprime(nu, x)?;
        let lg = std::f64::consts::LN_2 + specfun::digamma(nu)?;
        let tri = specfun::trigamma(nu)?;

        // β-derivative of σ²c·g, with dx/dβ = -x/β
        let d_beta_unit = c * (-(nu / beta) * g - (x / beta) * xn * kp);
        let d_nu_unit = c * (-lg * g + dg);

        let grad = Vector3::new(c * g, sigma2 * d_beta_unit, sigma2 * d_nu_unit);

        let bb = sigma2 * c / (beta * beta)
            * (nu * (nu + 1.0) * g + 2.0 * (nu + 1.0) * x * xn * kp + x * x * xn * kpp);
        let nn = sigma2 * c * (lg * lg * g - tri * g - 2.0 * lg * dg + d2g);
        let bn = sigma2
            * c
            * (lg * ((nu / beta) * g + (x / beta) * xn * kp)
                - g / beta
                - (nu / beta) * dg
                - (x / beta) * dp);

        let mut hess = Matrix3::zeros();
        hess[(0, 1)] = d_beta_unit;
        hess[(0, 2)] = d_nu_unit;
        hess[(1, 1)] = bb;
        hess[(1, 2)] = bn;
        hess[(2, 2)] = nn;
        for r in 0..3 {
            for s in 0..r {
                hess[(r, s)] = hess[(s, r)];
            }
        }
        Ok(Derivs { grad, hess })
    }
}

#[derive(Debug, Clone, Copy)]
struct Derivs {
    grad: Vector3<f64>,
    hess: Matrix3<f64>,
}

/// `M(h; θ)`; exactly `σ²` at `h = 0`.
pub fn matern_cov(h: f64, theta: &MaternParams) -> Result<f64> {
    if !(h >= 0.0) || !h.is_finite() {
        return Err(Error::domain(format!("distance must be nonnegative, got {h}")));
    }
    Kernel::new(*theta)?.cov(h)
}

/// `(∂M/∂σ², ∂M/∂β, ∂M/∂ν)`. At `h = 0` this is `(1, 0, 0)`.
pub fn matern_grad(h: f64, theta: &MaternParams) -> Result<Vector3<f64>> {
    if !(h >= 0.0) {
        return Err(Error::domain(format!("distance must be nonnegative, got {h}")));
    }
    Ok(Kernel::new(*theta)?.derivs(h)?.grad)
}

/// Symmetric Hessian of `M` in `(σ², β, ν)`. Zero at `h = 0`.
pub fn matern_hess(h: f64, theta: &MaternParams) -> Result<Matrix3<f64>> {
    if !(h >= 0.0) {
        return Err(Error::domain(format!("distance must be nonnegative, got {h}")));
    }
    Ok(Kernel::new(*theta)?.derivs(h)?.hess)
}

/// `Σ(θ)` with entries `M(‖s_i - s_j‖; θ)`.
pub fn build_cov(locs: &LocationSet, theta: &MaternParams) -> Result<CovMatrix> {
    let kernel = Kernel::new(*theta)?;
    let values = locs
        .unique_distances()
        .iter()
        .map(|&h| kernel.cov(h))
        .collect::<Result<Vec<_>>>()?;
    Ok(locs.fill_symmetric(theta.sigma2, &values))
}

/// Entrywise first and second θ-derivatives of `Σ(θ)`.
#[derive(Debug, Clone)]
pub struct CovDerivatives {
    /// `∂Σ/∂θ_j` for `j` in (σ², β, ν).
    pub grad: [DMatrix<f64>; 3],
    /// Upper triangle of `∂²Σ/∂θ_j∂θ_k`, ordered (00, 01, 02, 11, 12, 22).
    hess: [DMatrix<f64>; 6],
}

impl CovDerivatives {
    /// `∂²Σ/∂θ_j∂θ_k`.
    pub fn hess(&self, j: usize, k: usize) -> &DMatrix<f64> {
        &self.hess[hess_slot(j, k)]
    }
}

fn hess_slot(j: usize, k: usize) -> usize {
    let (a, b) = if j <= k { (j, k) } else { (k, j) };
    match (a, b) {
        (0, 0) => 0,
        (0, 1) => 1,
        (0, 2) => 2,
        (1, 1) => 3,
        (1, 2) => 4,
        (2, 2) => 5,
        _ => panic!("parameter index out of range: ({j}, {k})"),
    }
}

const HESS_PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

fn kernel_derivs(locs: &LocationSet, theta: &MaternParams) -> Result<(Derivs, Vec<Derivs>)> {
    let kernel = Kernel::new(*theta)?;
    let diag = kernel.derivs(0.0)?;
    let off = locs
        .unique_distances()
        .iter()
        .map(|&h| kernel.derivs(h))
        .collect::<Result<Vec<_>>>()?;
    Ok((diag, off))
}

/// The three matrices `∂Σ/∂σ²`, `∂Σ/∂β`, `∂Σ/∂ν`.
pub fn build_cov_grad(locs: &LocationSet, theta: &MaternParams) -> Result<[DMatrix<f64>; 3]> {
    let (diag, off) = kernel_derivs(locs, theta)?;
    Ok(std::array::from_fn(|j| {
        let vals: Vec<f64> = off.iter().map(|d| d.grad[j]).collect();
        locs.fill_symmetric(diag.grad[j], &vals)
    }))
}

/// The six distinct second-derivative matrices of `Σ`, with the gradient.
pub fn build_cov_hess(locs: &LocationSet, theta: &MaternParams) -> Result<CovDerivatives> {
    let (diag, off) = kernel_derivs(locs, theta)?;
    let grad = std::array::from_fn(|j| {
        let vals: Vec<f64> = off.iter().map(|d| d.grad[j]).collect();
        locs.fill_symmetric(diag.grad[j], &vals)
    });
    let hess = std::array::from_fn(|s| {
        let (j, k) = HESS_PAIRS[s];
        let vals: Vec<f64> = off.iter().map(|d| d.hess[(j, k)]).collect();
        locs.fill_symmetric(diag.hess[(j, k)], &vals)
    });
    Ok(CovDerivatives { grad, hess })
}
