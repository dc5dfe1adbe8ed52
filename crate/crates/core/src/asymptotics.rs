//! Estimating-function moments for the MLqE: per-replicate `U*` (gradient of
//! the exact Lq contribution) and `V*` (its Hessian), their plug-in averages
//! `K` and `J`, and standard errors built from them.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::likelihood::{check_q, factor, CholFactor, ReplicateSet};
use crate::matern::{build_cov_hess, CovDerivatives, LocationSet, MaternParams};

/// Relative floor on the eigenvalues of `|J|`.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Condition number beyond which `J` is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// `(1−q)·l` magnitude past which `sandwich` rescales the weights.
const WEIGHT_SHIFT_LIMIT: f64 = 300.0;

/// Everything about `Σ(θ)` that does not depend on the data.
pub struct ScoreContext {
    chol: CholFactor,
    dsig: CovDerivatives,
    /// `tr(Σ⁻¹ Σ_j)`
    tr_w: [f64; 3],
    /// `½tr(Σ⁻¹Σ_k Σ⁻¹Σ_j) − ½tr(Σ⁻¹Σ_jk)`
    h_const: Matrix3<f64>,
}

/// Log-density and its θ-gradient and Hessian for one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDensityDerivs {
    pub log_density: f64,
    pub grad: Vector3<f64>,
    pub hess: Matrix3<f64>,
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(AB) = Σ_ij A_ij B_ji
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}

impl ScoreContext {
    pub fn new(locs: &LocationSet, theta: &MaternParams) -> Result<Self> {
        let chol = factor(locs, theta)?;
        let dsig = build_cov_hess(locs, theta)?;
        let w: [DMatrix<f64>; 3] = std::array::from_fn(|j| chol.solve(&dsig.grad[j]));
        let tr_w = std::array::from_fn(|j| w[j].trace());
        let mut h_const = Matrix3::zeros();
        for j in 0..3 {
            for k in j..3 {
                let s_jk = chol.solve(dsig.hess(j, k)).trace();
                let v = 0.5 * trace_product(&w[k], &w[j]) - 0.5 * s_jk;
                h_const[(j, k)] = v;
                h_const[(k, j)] = v;
            }
        }
        Ok(ScoreContext {
            chol,
            dsig,
            tr_w,
            h_const,
        })
    }

    pub fn n(&self) -> usize {
        self.chol.n()
    }

    pub fn derivs(&self, z: &DVector<f64>) -> Result<LogDensityDerivs> {
        if z.len() != self.n() {
            return Err(Error::dimension(format!("vector of length {} for {} locations", z.len(), self.n())));
        }
        let log_density = crate::likelihood::log_likelihood(z, &self.chol)?;
        let alpha = self.chol.solve_vec(z);
        let s: [DVector<f64>; 3] = std::array::from_fn(|j| &self.dsig.grad[j] * &alpha);
        let t: [DVector<f64>; 3] = std::array::from_fn(|j| self.chol.solve_vec(&s[j]));
        let grad = Vector3::from_fn(|j, _| -0.5 * self.tr_w[j] + 0.5 * alpha.dot(&s[j]));
        let mut hess = self.h_const;
        for j in 0..3 {
            for k in j..3 {
                let quad = alpha.dot(&(self.dsig.hess(j, k) * &alpha));
                let v = hess[(j, k)] + 0.5 * quad - s[j].dot(&t[k]);
                hess[(j, k)] = v;
                hess[(k, j)] = v;
            }
        }
        Ok(LogDensityDerivs {
            log_density,
            grad,
            hess,
        })
    }
}

/// `f^{1−q} g` and `(1−q) f^{1−q} g gᵀ + f^{1−q} H`, with `f^{1−q}` given as
/// `exp(log_w)`.
fn lq_moments(d: &LogDensityDerivs, q: f64, log_w: f64) -> (Vector3<f64>, Matrix3<f64>) {
    let w = log_w.exp();
    let u = d.grad * w;
    let v = d.grad * d.grad.transpose() * ((1.0 - q) * w) + d.hess * w;
    (u, v)
}

/// Gradient in θ of the exact Lq contribution of `z`.
pub fn ustar(z: &DVector<f64>, locs: &LocationSet, theta: &MaternParams, q: f64) -> Result<Vector3<f64>> {
    check_q(q)?;
    let d = ScoreContext::new(locs, theta)?.derivs(z)?;
    Ok(lq_moments(&d, q, (1.0 - q) * d.log_density).0)
}

/// Hessian in θ of the exact Lq contribution of `z`; the Jacobian of `ustar`.
pub fn vstar(z: &DVector<f64>, locs: &LocationSet, theta: &MaternParams, q: f64) -> Result<Matrix3<f64>> {
    check_q(q)?;
    let d = ScoreContext::new(locs, theta)?.derivs(z)?;
    Ok(lq_moments(&d, q, (1.0 - q) * d.log_density).1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichParts {
    /// Mean of `U* U*ᵀ`.
    pub k: Matrix3<f64>,
    /// Mean of `V*`.
    pub j: Matrix3<f64>,
    pub m: usize,
    /// Every weight `f^{1−q}` was multiplied by `exp(−log_weight_shift)`
    /// to stay in floating-point range. The true K and J are
    /// `exp(2s)·k` and `exp(s)·j`; standard errors do not depend on it.
    pub log_weight_shift: f64,
}

/// Plug-in `K` and `J` at `theta` averaged over the replicates in order.
pub fn sandwich(reps: &ReplicateSet, locs: &LocationSet, theta: &MaternParams, q: f64) -> Result<SandwichParts> {
    check_q(q)?;
    reps.check_locations(locs)?;
    let ctx = ScoreContext::new(locs, theta)?;
    let ds = (0..reps.m())
        .map(|i| ctx.derivs(&reps.column(i)))
        .collect::<Result<Vec<_>>>()?;
    let a = 1.0 - q;
    let max_lw = ds.iter().map(|d| a * d.log_density).fold(f64::NEG_INFINITY, f64::max);
    let shift = if max_lw.abs() > WEIGHT_SHIFT_LIMIT { max_lw } else { 0.0 };
    let mut k = Matrix3::zeros();
    let mut j = Matrix3::zeros();
    for d in &ds {
        let (u, v) = lq_moments(d, q, a * d.log_density - shift);
        k += u * u.transpose();
        j += v;
    }
    let m = reps.m() as f64;
    k /= m;
    j /= m;
    Ok(SandwichParts {
        k: 0.5 * (k + k.transpose()),
        j: 0.5 * (j + j.transpose()),
        m: reps.m(),
        log_weight_shift: shift,
    })
}

/// How `J` was turned into the positive-definite `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JConvention {
    /// J was positive definite; `S = J`.
    Positive,
    /// J was negative definite; `S = −J`.
    Negated,
    /// Mixed signs; `S = |J|` through the eigendecomposition.
    Absolute,
}

impl std::fmt::Display for JConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            JConvention::Positive => "positive",
            JConvention::Negated => "negated",
            JConvention::Absolute => "absolute",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StdErrs {
    /// Diagonal of `S^{−1/2} K^{1/2} S^{−1/2}`.
    pub se: [f64; 3],
    /// `sqrt(diag(J⁻¹ K J⁻¹))`, the usual sandwich.
    pub classical: [f64; 3],
    pub convention: JConvention,
    /// `max|λ| / min|λ|` over the eigenvalues of J.
    pub condition: f64,
}

fn sym_function(eig: &SymmetricEigen<f64, nalgebra::U3>, f: impl Fn(f64) -> f64) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(f));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub fn std_errs(parts: &SandwichParts) -> Result<StdErrs> {
    let (j, k) = (parts.j, parts.k);
    if !j.iter().chain(k.iter()).all(|v| v.is_finite()) {
        return Err(Error::SingularJ { condition: f64::INFINITY });
    }
    let eig = SymmetricEigen::new(j);
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|l| l.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(max > 0.0) || condition > MAX_CONDITION {
        return Err(Error::SingularJ { condition });
    }
    let convention = if eig.eigenvalues.iter().all(|&l| l > 0.0) {
        JConvention::Positive
    } else if eig.eigenvalues.iter().all(|&l| l < 0.0) {
        JConvention::Negated
    } else {
        JConvention::Absolute
    };
    let eps = EIGEN_FLOOR * abs.iter().sum::<f64>();
    let s_inv_half = sym_function(&eig, |l| 1.0 / (l.abs() + eps).sqrt());
    let k_half = sym_function(&SymmetricEigen::new(k), |l| l.max(0.0).sqrt());
    let m = s_inv_half * k_half * s_inv_half;
    let j_inv = sym_function(&eig, |l| 1.0 / l);
    let c = j_inv * k * j_inv;
    Ok(StdErrs {
        se: [m[(0, 0)], m[(1, 1)], m[(2, 2)]],
        classical: [0, 1, 2].map(|r| c[(r, r)].max(0.0).sqrt()),
        convention,
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{log_likelihood, lq_of_loglik};
    use crate::matern::build_cov;
    use crate::simulate::{gen_replicates, make_locations, Layout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_locs(rng: &mut ChaCha8Rng, n: usize) -> LocationSet {
        LocationSet::new((0..n).map(|_| [rng.random(), rng.random()]).collect()).unwrap()
    }

    fn random_theta(rng: &mut ChaCha8Rng) -> MaternParams {
        MaternParams::new(
            rng.random_range(0.5..2.0),
            rng.random_range(0.05..0.4),
            rng.random_range(0.3..2.0),
        )
        .unwrap()
    }

    /// Exact (unscaled) Lq contribution of one replicate.
    fn lq_value(z: &DVector<f64>, locs: &LocationSet, th: &MaternParams, q: f64) -> f64 {
        let chol = factor(locs, th).unwrap();
        let l = log_likelihood(z, &chol).unwrap();
        lq_of_loglik(l, q, z.len(), false).unwrap().value
    }

    fn bump(th: &MaternParams, j: usize, h: f64) -> MaternParams {
        let mut a = th.to_array();
        a[j] += h;
        MaternParams::from_array(a)
    }

    fn step(th: &MaternParams, j: usize) -> f64 {
        1e-4 * th.to_array()[j]
    }

    fn rel_err_vec(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-12)
    }

    #[test]
    fn scalar_cases() {
        let locs = LocationSet::new(vec![[0.5, 0.5]]).unwrap();
        let th = MaternParams::new(1.0, 0.2, 0.7).unwrap();
        let u = ustar(&DVector::from_element(1, 1.0), &locs, &th, 1.0).unwrap();
        assert!(u.amax() < 1e-15);
        let v = vstar(&DVector::zeros(1), &locs, &th, 1.0).unwrap();
        assert!((v[(0, 0)] - 0.5).abs() < 1e-14);
        // σ²=2, z=3: ½(z²/σ⁴ − 1/σ²) and 1/(2σ⁴) − z²/σ⁶
        let th = MaternParams::new(2.0, 0.2, 0.7).unwrap();
        let z = DVector::from_element(1, 3.0);
        let u = ustar(&z, &locs, &th, 1.0).unwrap();
        assert!((u[0] - 0.5 * (9.0 / 4.0 - 0.5)).abs() < 1e-14);
        let v = vstar(&z, &locs, &th, 1.0).unwrap();
        assert!((v[(0, 0)] - (1.0 / 8.0 - 9.0 / 8.0)).abs() < 1e-14);
    }

    #[test]
    fn score_matches_fd_of_loglik() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.random_range(2..=8);
            let locs = random_locs(&mut rng, n);
            let th = random_theta(&mut rng);
            let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let u = ustar(&z, &locs, &th, 1.0).unwrap();
            let fd = Vector3::from_fn(|j, _| {
                let h = step(&th, j);
                (lq_value(&z, &locs, &bump(&th, j, h), 1.0) - lq_value(&z, &locs, &bump(&th, j, -h), 1.0)) / (2.0 * h)
            });
            assert!(rel_err_vec(&u, &fd) < 1e-6, "{u} vs {fd}");
        }
    }

    #[test]
    fn ustar_matches_fd_of_lq() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..30 {
            let n = rng.random_range(2..=8);
            let locs = random_locs(&mut rng, n);
            let th = random_theta(&mut rng);
            let q = rng.random_range(0.7..1.0);
            let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let u = ustar(&z, &locs, &th, q).unwrap();
            let fd = Vector3::from_fn(|j, _| {
                let h = step(&th, j);
                (lq_value(&z, &locs, &bump(&th, j, h), q) - lq_value(&z, &locs, &bump(&th, j, -h), q)) / (2.0 * h)
            });
            assert!(rel_err_vec(&u, &fd) < 1e-5, "{u} vs {fd}");
        }
    }

    #[test]
    fn vstar_matches_fd_of_ustar() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.random_range(1..=8);
            let locs = random_locs(&mut rng, n);
            let th = random_theta(&mut rng);
            let q = rng.random_range(0.7..=1.0);
            let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let v = vstar(&z, &locs, &th, q).unwrap();
            assert_eq!(v, v.transpose());
            let mut fd = Matrix3::zeros();
            for k in 0..3 {
                let h = step(&th, k);
                let up = ustar(&z, &locs, &bump(&th, k, h), q).unwrap();
                let dn = ustar(&z, &locs, &bump(&th, k, -h), q).unwrap();
                fd.set_column(k, &((up - dn) / (2.0 * h)));
            }
            let err = (v - fd).amax() / fd.amax().max(1e-12);
            assert!(err < 1e-4, "n={n} {v} vs {fd}");
        }
    }

    #[test]
    fn quadratic_forms_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            let n = rng.random_range(2..=8);
            let locs = random_locs(&mut rng, n);
            let th = random_theta(&mut rng);
            let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let inv = build_cov(&locs, &th).unwrap().try_inverse().unwrap();
            let ds = build_cov_hess(&locs, &th).unwrap();
            let got = ScoreContext::new(&locs, &th).unwrap().derivs(&z).unwrap();
            for j in 0..3 {
                let w = &inv * &ds.grad[j];
                let g = -0.5 * w.trace() + 0.5 * (z.transpose() * &w * &inv * &z)[(0, 0)];
                assert!((got.grad[j] - g).abs() < 1e-9 * (1.0 + g.abs()));
                for k in 0..3 {
                    let wk = &inv * &ds.grad[k];
                    let hjk = 0.5 * (&wk * &w).trace() - 0.5 * (&inv * ds.hess(j, k)).trace()
                        + 0.5 * (z.transpose() * &inv * ds.hess(j, k) * &inv * &z)[(0, 0)]
                        - (z.transpose() * &inv * &ds.grad[j] * &inv * &ds.grad[k] * &inv * &z)[(0, 0)];
                    assert!((got.hess[(j, k)] - hjk).abs() < 1e-9 * (1.0 + hjk.abs()));
                }
            }
        }
    }

    #[test]
    fn sandwich_basics() {
        let locs = make_locations(9, Layout::Grid, 0).unwrap();
        let th = MaternParams::new(1.0, 0.1, 0.5).unwrap();
        let reps = gen_replicates(&locs, &th, 40, 3).unwrap();
        let one = reps.select(&[0]).unwrap();
        let p = sandwich(&one, &locs, &th, 0.9).unwrap();
        let u = ustar(&one.column(0), &locs, &th, 0.9).unwrap();
        assert!((p.k - u * u.transpose()).amax() < 1e-14 * p.k.amax());
        assert_eq!(p.log_weight_shift, 0.0);
        let p = sandwich(&reps, &locs, &th, 0.95).unwrap();
        assert_eq!(p.k, p.k.transpose());
        assert_eq!(p.j, p.j.transpose());
        assert!(SymmetricEigen::new(p.k).eigenvalues.iter().all(|&l| l > -1e-12 * p.k.amax()));
    }

    #[test]
    fn sandwich_shift_cancels_in_se() {
        // small σ² and many sites make (1−q)·l large enough to need the shift
        let locs = make_locations(256, Layout::Grid, 0).unwrap();
        let th = MaternParams::new(1e-3, 0.1, 0.5).unwrap();
        let reps = gen_replicates(&locs, &th, 30, 1).unwrap();
        let q = 0.1;
        let p = sandwich(&reps, &locs, &th, q).unwrap();
        assert!(p.log_weight_shift != 0.0);
        let se = std_errs(&p).unwrap();
        // same computation with the shift removed by hand
        let ctx = ScoreContext::new(&locs, &th).unwrap();
        let (mut k, mut j) = (Matrix3::zeros(), Matrix3::zeros());
        for i in 0..reps.m() {
            let d = ctx.derivs(&reps.column(i)).unwrap();
            let (u, v) = lq_moments(&d, q, (1.0 - q) * d.log_density - 500.0);
            k += u * u.transpose();
            j += v;
        }
        let alt = SandwichParts {
            k: k / 30.0,
            j: j / 30.0,
            m: 30,
            log_weight_shift: 500.0,
        };
        let se2 = std_errs(&alt).unwrap();
        for r in 0..3 {
            assert!((se.se[r] - se2.se[r]).abs() < 1e-8 * se.se[r]);
            assert!((se.classical[r] - se2.classical[r]).abs() < 1e-8 * se.classical[r]);
        }
    }

    #[test]
    fn std_err_examples() {
        let mk = |j: Matrix3<f64>, k: Matrix3<f64>| SandwichParts {
            k,
            j,
            m: 10,
            log_weight_shift: 0.0,
        };
        let s = std_errs(&mk(Matrix3::identity(), Matrix3::identity())).unwrap();
        assert!(s.se.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert_eq!(s.convention, JConvention::Positive);
        let s = std_errs(&mk(Matrix3::identity() * 4.0, Matrix3::identity() * 9.0)).unwrap();
        assert!(s.se.iter().all(|v| (v - 0.75).abs() < 1e-9));
        assert!(s.classical.iter().all(|v| (v - 0.75).abs() < 1e-9));
        let s = std_errs(&mk(Matrix3::identity() * -4.0, Matrix3::identity() * 9.0)).unwrap();
        assert_eq!(s.convention, JConvention::Negated);
        assert!(s.se.iter().all(|v| (v - 0.75).abs() < 1e-9));
        let s = std_errs(&mk(Matrix3::from_diagonal(&Vector3::new(-4.0, 4.0, 4.0)), Matrix3::identity() * 9.0))
            .unwrap();
        assert_eq!(s.convention, JConvention::Absolute);
        let sing = std_errs(&mk(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)), Matrix3::identity()));
        assert!(matches!(sing, Err(Error::SingularJ { .. })));
    }
}
