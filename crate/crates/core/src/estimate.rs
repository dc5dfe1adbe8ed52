//! Maximum Lq-likelihood fits by a bounded Nelder–Mead search.
//!
//! The search runs in unit-cube coordinates
//! `u_j = (ln θ_j − ln lo_j) / (ln hi_j − ln lo_j)`; trial points are clamped
//! to the cube so every evaluated θ lies within the bounds. A run stops when
//! the simplex ∞-diameter drops below `tol`, then restarts from the best vertex
//! until a restart no longer moves it by more than `RESTART_FACTOR·tol`.

use crate::error::{Error, Result};
use crate::likelihood::{check_q, factor, total_lq_with, ReplicateSet};
use crate::matern::{LocationSet, MaternParams};

const RESTART_FACTOR: f64 = 10.0;
const MAX_RESTARTS: usize = 10;
const INIT_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: MaternParams,
    pub upper: MaternParams,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            lower: MaternParams {
                sigma2: 1e-3,
                beta: 1e-3,
                nu: 0.05,
            },
            upper: MaternParams {
                sigma2: 1e3,
                beta: 10.0,
                nu: 5.0,
            },
        }
    }
}

impl Bounds {
    pub fn new(lower: MaternParams, upper: MaternParams) -> Result<Self> {
        let b = Bounds { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.lower.to_array(), self.upper.to_array());
        for j in 0..3 {
            if !(lo[j] > 0.0 && lo[j] < hi[j] && hi[j].is_finite()) {
                return Err(Error::domain(format!("bounds need 0 < lower < upper, got {} and {}", lo[j], hi[j])));
            }
        }
        Ok(())
    }

    pub fn contains(&self, theta: &MaternParams) -> bool {
        let (lo, hi, t) = (self.lower.to_array(), self.upper.to_array(), theta.to_array());
        (0..3).all(|j| t[j] >= lo[j] && t[j] <= hi[j])
    }

    pub fn clamp(&self, theta: &MaternParams) -> MaternParams {
        let (lo, hi, t) = (self.lower.to_array(), self.upper.to_array(), theta.to_array());
        MaternParams::from_array([0, 1, 2].map(|j| t[j].clamp(lo[j], hi[j])))
    }

    fn to_unit(&self, theta: &MaternParams) -> [f64; 3] {
        let (lo, hi, t) = (self.lower.to_array(), self.upper.to_array(), theta.to_array());
        [0, 1, 2].map(|j| ((t[j].ln() - lo[j].ln()) / (hi[j].ln() - lo[j].ln())).clamp(0.0, 1.0))
    }

    fn from_unit(&self, u: &[f64; 3]) -> MaternParams {
        let (lo, hi) = (self.lower.to_array(), self.upper.to_array());
        MaternParams::from_array([0, 1, 2].map(|j| match u[j] {
            x if x <= 0.0 => lo[j],
            x if x >= 1.0 => hi[j],
            x => (lo[j].ln() + x * (hi[j].ln() - lo[j].ln())).exp().clamp(lo[j], hi[j]),
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Simplex ∞-diameter at which a run stops, in unit-cube coordinates.
    pub tol: f64,
    pub max_evals: usize,
    /// Use `exp[(l+n)(1−q)]` instead of the exact Lq value for q < 1.
    pub scale: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-6,
            max_evals: 5000,
            scale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: MaternParams,
    pub objective: f64,
    pub q: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub init: MaternParams,
    /// Set when the fit failed outright; `theta_hat` is then the init.
    pub error: Option<String>,
}

impl FitResult {
    pub fn kappa(&self) -> f64 {
        self.theta_hat.kappa()
    }
}

/// σ² from the pooled mean square, β = 0.1, ν = 0.5, clamped to `bounds`.
pub fn default_init(reps: &ReplicateSet, bounds: &Bounds) -> MaternParams {
    let s2 = reps.pooled_mean_square();
    let s2 = if s2 > 0.0 { s2 } else { 1.0 };
    bounds.clamp(&MaternParams {
        sigma2: s2,
        beta: 0.1,
        nu: 0.5,
    })
}

/// Objective at θ, or `None` when Σ(θ) is not positive definite.
pub fn objective(reps: &ReplicateSet, locs: &LocationSet, theta: &MaternParams, q: f64, scale: bool) -> Result<Option<f64>> {
    match factor(locs, theta) {
        Ok(chol) => {
            let v = total_lq_with(reps, &chol, q, scale)?;
            Ok(if v.is_nan() { None } else { Some(v) })
        }
        Err(Error::NotPositiveDefinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn fit(
    reps: &ReplicateSet,
    locs: &LocationSet,
    q: f64,
    bounds: &Bounds,
    init: &MaternParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_q(q)?;
    bounds.validate()?;
    reps.check_locations(locs)?;
    if !bounds.contains(init) {
        return Err(Error::domain(format!("initial point {init} is outside the bounds")));
    }
    if !(opts.tol > 0.0) || opts.max_evals == 0 {
        return Err(Error::domain("tol must be positive and max_evals at least 1"));
    }
    let mut failure = None;
    let mut f = |u: &[f64; 3]| -> f64 {
        if failure.is_some() {
            return f64::INFINITY;
        }
        match objective(reps, locs, &bounds.from_unit(u), q, opts.scale) {
            Ok(Some(v)) => -v,
            Ok(None) => f64::INFINITY,
            Err(e) => {
                failure = Some(e);
                f64::INFINITY
            }
        }
    };
    let u0 = bounds.to_unit(init);
    let run = minimize_box(&mut f, u0, opts.tol, opts.max_evals);
    if let Some(e) = failure {
        return Err(e);
    }
    if run.f_start == f64::INFINITY {
        return Err(Error::InfeasibleInit(*init));
    }
    let theta_hat = bounds.from_unit(&run.u);
    Ok(FitResult {
        theta_hat,
        objective: -run.f,
        q,
        iterations: run.iterations,
        evaluations: run.evaluations,
        converged: run.converged,
        init: *init,
        error: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QProfile {
    pub grid: Vec<f64>,
    pub fits: Vec<FitResult>,
}

impl QProfile {
    pub fn get(&self, q: f64) -> Option<&FitResult> {
        self.grid.iter().position(|&g| g == q).map(|k| &self.fits[k])
    }
}

/// Checks that `grid` starts at 1 and strictly decreases within (0, 1].
pub fn validate_profile_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&1.0) {
        return Err(Error::domain("q grid must start at 1"));
    }
    for w in grid.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::domain(format!("q grid must strictly decrease ({} then {})", w[0], w[1])));
        }
    }
    if let Some(&last) = grid.last() {
        check_q(last)?;
    }
    Ok(())
}

/// Fits along `grid` in order, each fit starting from the previous estimate.
/// A fit that fails is recorded as non-converged and the next one restarts
/// from the last good estimate.
pub fn fit_profile(
    reps: &ReplicateSet,
    locs: &LocationSet,
    grid: &[f64],
    bounds: &Bounds,
    init: &MaternParams,
    opts: &FitOptions,
) -> Result<QProfile> {
    validate_profile_grid(grid)?;
    let mut start = *init;
    let mut fits = Vec::with_capacity(grid.len());
    for &q in grid {
        match fit(reps, locs, q, bounds, &start, opts) {
            Ok(r) => {
                start = r.theta_hat;
                fits.push(r);
            }
            Err(e) => fits.push(failed_fit(q, &start, &e)),
        }
    }
    Ok(QProfile {
        grid: grid.to_vec(),
        fits,
    })
}

pub(crate) fn failed_fit(q: f64, init: &MaternParams, e: &Error) -> FitResult {
    FitResult {
        theta_hat: *init,
        objective: f64::NEG_INFINITY,
        q,
        iterations: 0,
        evaluations: 0,
        converged: false,
        init: *init,
        error: Some(e.to_string()),
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BoxRun {
    pub u: [f64; 3],
    pub f: f64,
    pub f_start: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn clamp_unit(mut u: [f64; 3]) -> [f64; 3] {
    for v in &mut u {
        *v = v.clamp(0.0, 1.0);
    }
    u
}

fn diameter(s: &[([f64; 3], f64)]) -> f64 {
    let b = s[0].0;
    s[1..]
        .iter()
        .flat_map(|(v, _)| (0..3).map(move |j| (v[j] - b[j]).abs()))
        .fold(0.0, f64::max)
}

/// Minimizes `f` over `[0,1]³` from `u0`. `f` may return `+∞` to reject a point.
pub(crate) fn minimize_box<F: FnMut(&[f64; 3]) -> f64>(f: &mut F, u0: [f64; 3], tol: f64, max_evals: usize) -> BoxRun {
    let mut evals = 0usize;
    let mut iters = 0usize;
    let mut eval = |u: &[f64; 3], evals: &mut usize| {
        *evals += 1;
        f(u)
    };
    let u0 = clamp_unit(u0);
    let f_start = eval(&u0, &mut evals);
    let mut best = (u0, f_start);
    if f_start == f64::INFINITY {
        return BoxRun {
            u: u0,
            f: f_start,
            f_start,
            iterations: 0,
            evaluations: evals,
            converged: false,
        };
    }
    let mut converged = false;
    'restarts: for _ in 0..=MAX_RESTARTS {
        let start = best;
        let mut s: Vec<([f64; 3], f64)> = vec![start];
        for j in 0..3 {
            let mut v = start.0;
            v[j] += if v[j] + INIT_STEP <= 1.0 { INIT_STEP } else { -INIT_STEP };
            let fv = eval(&v, &mut evals);
            s.push((v, fv));
        }
        loop {
            s.sort_by(|a, b| a.1.total_cmp(&b.1));
            if diameter(&s) < tol {
                break;
            }
            if evals >= max_evals {
                best = s[0];
                break 'restarts;
            }
            iters += 1;
            let mut c = [0.0; 3];
            for (v, _) in &s[..3] {
                for j in 0..3 {
                    c[j] += v[j] / 3.0;
                }
            }
            let worst = s[3];
            let along = |t: f64| clamp_unit([0, 1, 2].map(|j| c[j] + t * (worst.0[j] - c[j])));
            let r = along(-1.0);
            let fr = eval(&r, &mut evals);
            if fr < s[0].1 {
                let e = along(-2.0);
                let fe = eval(&e, &mut evals);
                s[3] = if fe < fr { (e, fe) } else { (r, fr) };
            } else if fr < s[2].1 {
                s[3] = (r, fr);
            } else {
                let (k, fk) = if fr < worst.1 {
                    let k = along(-0.5);
                    (k, eval(&k, &mut evals))
                } else {
                    let k = along(0.5);
                    (k, eval(&k, &mut evals))
                };
                if fk < worst.1.min(fr) {
                    s[3] = (k, fk);
                } else {
                    let b = s[0].0;
                    for v in s.iter_mut().skip(1) {
                        let p = [0, 1, 2].map(|j| b[j] + 0.5 * (v.0[j] - b[j]));
                        *v = (p, eval(&p, &mut evals));
                    }
                }
            }
        }
        let moved = (0..3).map(|j| (s[0].0[j] - start.0[j]).abs()).fold(0.0, f64::max);
        if s[0].1 <= best.1 {
            best = s[0];
        }
        if moved <= RESTART_FACTOR * tol {
            converged = true;
            break;
        }
        if evals >= max_evals {
            break;
        }
    }
    BoxRun {
        u: best.0,
        f: best.1,
        f_start,
        iterations: iters,
        evaluations: evals,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_replicates, make_locations, Layout};

    fn theta0() -> MaternParams {
        MaternParams::new(1.0, 0.1, 0.5).unwrap()
    }

    fn data(n: usize, m: usize, seed: u64) -> (ReplicateSet, LocationSet) {
        // uniform sites: the coarse 4x4 grid barely identifies ν at β = 0.1
        let locs = make_locations(n, Layout::Uniform, seed).unwrap();
        let reps = gen_replicates(&locs, &theta0(), m, seed).unwrap();
        (reps, locs)
    }

    #[test]
    fn box_minimizer_on_quadratic() {
        let target = [0.3, 0.7, 0.5];
        let mut seen = Vec::new();
        let mut f = |u: &[f64; 3]| {
            seen.push(*u);
            (0..3).map(|j| (j + 1) as f64 * (u[j] - target[j]).powi(2)).sum()
        };
        let run = minimize_box(&mut f, [0.9, 0.1, 0.0], 1e-8, 5000);
        assert!(run.converged);
        for j in 0..3 {
            assert!((run.u[j] - target[j]).abs() < 1e-6);
        }
        assert!(seen.iter().all(|u| u.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn box_minimizer_at_boundary() {
        // minimum outside the cube: the answer is the nearest face
        let mut f = |u: &[f64; 3]| (u[0] + 0.5).powi(2) + (u[1] - 0.4).powi(2) + (u[2] - 2.0).powi(2);
        let run = minimize_box(&mut f, [0.5, 0.5, 0.5], 1e-8, 5000);
        assert!(run.u[0] < 1e-6 && (run.u[1] - 0.4).abs() < 1e-6 && run.u[2] > 1.0 - 1e-6);
    }

    #[test]
    fn box_minimizer_rejects_and_budget() {
        let mut f = |u: &[f64; 3]| if u[0] > 0.5 { f64::INFINITY } else { -u[0] + u[1] * u[1] + u[2] * u[2] };
        let run = minimize_box(&mut f, [0.2, 0.2, 0.2], 1e-8, 5000);
        assert!(run.u[0] <= 0.5 && run.u[0] > 0.5 - 1e-6);
        let mut g = |u: &[f64; 3]| (u[0] - 0.3).powi(2) + u[1] + u[2];
        let run = minimize_box(&mut g, [0.9, 0.9, 0.9], 1e-12, 20);
        assert!(!run.converged);
        assert!(run.evaluations <= 20 + 4);
    }

    #[test]
    fn unit_map_round_trip() {
        let b = Bounds::default();
        let t = MaternParams::new(2.5, 0.3, 1.7).unwrap();
        let back = b.from_unit(&b.to_unit(&t));
        for (x, y) in back.to_array().iter().zip(t.to_array().iter()) {
            assert!((x - y).abs() < 1e-12 * y);
        }
        assert_eq!(b.from_unit(&[0.0; 3]), b.lower);
        assert_eq!(b.from_unit(&[1.0; 3]), b.upper);
    }

    #[test]
    fn bounds_validation() {
        let lo = MaternParams::new(1.0, 1.0, 1.0).unwrap();
        assert!(Bounds::new(lo, lo).is_err());
        let b = Bounds::default();
        assert!(b.contains(&theta0()));
        let out = MaternParams::new(1e4, 0.1, 0.5).unwrap();
        assert!(!b.contains(&out));
        assert_eq!(b.clamp(&out).sigma2, 1e3);
    }

    #[test]
    fn fit_improves_and_recovers() {
        let (reps, locs) = data(16, 200, 3);
        let b = Bounds::default();
        let init = default_init(&reps, &b);
        let r = fit(&reps, &locs, 1.0, &b, &init, &FitOptions::default()).unwrap();
        let f0 = objective(&reps, &locs, &init, 1.0, true).unwrap().unwrap();
        assert!(r.objective >= f0);
        assert!(r.converged);
        assert!(b.contains(&r.theta_hat));
        assert_eq!(objective(&reps, &locs, &r.theta_hat, 1.0, true).unwrap().unwrap(), r.objective);
        // the maximizer should beat the generating parameters
        let truth = objective(&reps, &locs, &theta0(), 1.0, true).unwrap().unwrap();
        assert!(r.objective >= truth);
        // reproducible
        let again = fit(&reps, &locs, 1.0, &b, &init, &FitOptions::default()).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn scaled_and_exact_fits_agree() {
        let (reps, locs) = data(16, 100, 11);
        let b = Bounds::default();
        let init = default_init(&reps, &b);
        for q in [0.9, 0.99] {
            let s = fit(&reps, &locs, q, &b, &init, &FitOptions::default()).unwrap();
            let e = fit(
                &reps,
                &locs,
                q,
                &b,
                &init,
                &FitOptions {
                    scale: false,
                    ..FitOptions::default()
                },
            )
            .unwrap();
            for (x, y) in s.theta_hat.to_array().iter().zip(e.theta_hat.to_array().iter()) {
                assert!((x - y).abs() <= 1e-6 * y.abs(), "q={q}: {} vs {}", s.theta_hat, e.theta_hat);
            }
        }
    }

    #[test]
    fn profile_warm_starts() {
        let (reps, locs) = data(9, 50, 1);
        let b = Bounds::default();
        let init = default_init(&reps, &b);
        let single = fit_profile(&reps, &locs, &[1.0], &b, &init, &FitOptions::default()).unwrap();
        assert_eq!(single.fits.len(), 1);
        assert_eq!(single.fits[0], fit(&reps, &locs, 1.0, &b, &init, &FitOptions::default()).unwrap());
        let p = fit_profile(&reps, &locs, &[1.0, 0.95, 0.9], &b, &init, &FitOptions::default()).unwrap();
        assert_eq!(p.fits[0].init, init);
        for k in 1..3 {
            assert_eq!(p.fits[k].init, p.fits[k - 1].theta_hat);
            assert_eq!(p.fits[k].q, p.grid[k]);
        }
        assert!(p.get(0.95).is_some());
        assert!(fit_profile(&reps, &locs, &[0.9, 1.0], &b, &init, &FitOptions::default()).is_err());
        assert!(fit_profile(&reps, &locs, &[1.0, 0.9, 0.9], &b, &init, &FitOptions::default()).is_err());
    }

    #[test]
    fn fit_input_errors() {
        let (reps, locs) = data(9, 5, 1);
        let b = Bounds::default();
        let bad = MaternParams::new(1e5, 0.1, 0.5).unwrap();
        assert!(fit(&reps, &locs, 1.0, &b, &bad, &FitOptions::default()).is_err());
        assert!(fit(&reps, &locs, 0.0, &b, &theta0(), &FitOptions::default()).is_err());
        let other = make_locations(4, Layout::Grid, 0).unwrap();
        assert!(fit(&reps, &other, 1.0, &b, &theta0(), &FitOptions::default()).is_err());
    }
}
