//! Choosing q by grid refinement: the κ stability rule and the standardized
//! quadratic variation (SQV) rule.
//!
//! Both selectors walk a descending grid `q_0 = 1 > … > q_K = q_min`. A pass
//! fits every grid point, forms a series over consecutive points, and either
//! accepts `q_0` or refines to an equally spaced grid from `q_{k*}` down to
//! `q_min`. When the span `q_0 − q_min` drops to `eps` without acceptance the
//! result is `q* = 1`.

use crate::asymptotics::StdErrs;
use crate::error::{Error, Result};
use crate::matern::MaternParams;

pub const DEFAULT_GRID: [f64; 8] = [1.0, 0.999, 0.99, 0.98, 0.97, 0.95, 0.925, 0.9];
pub const DEFAULT_EPS: f64 = 0.005;
pub const DEFAULT_K: usize = 7;
pub const DEFAULT_L_SQV: f64 = 0.05;
pub const DEFAULT_L_KAPPA: f64 = 4.0;

/// `σ² β^{−2ν}`.
pub fn kappa(theta: &MaternParams) -> Result<f64> {
    theta.validate()?;
    Ok(theta.kappa())
}

/// `θ̂_r / (√m · se_r)`.
pub fn standardized(theta_hat: &MaternParams, se: &StdErrs, m: usize) -> Result<[f64; 3]> {
    if m == 0 {
        return Err(Error::domain("m must be at least 1"));
    }
    if let Some(s) = se.se.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::domain(format!("standard errors must be positive, got {s}")));
    }
    let t = theta_hat.to_array();
    let rm = (m as f64).sqrt();
    Ok([0, 1, 2].map(|r| t[r] / (rm * se.se[r])))
}

/// `‖z_prev − z_cur‖ / p`.
pub fn sqv(z_prev: &[f64], z_cur: &[f64], p: usize) -> Result<f64> {
    if z_prev.len() != z_cur.len() {
        return Err(Error::dimension("standardized vectors differ in length"));
    }
    if p == 0 {
        return Err(Error::domain("p must be at least 1"));
    }
    let d2: f64 = z_prev.iter().zip(z_cur).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(d2.sqrt() / p as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QGridSpec {
    /// Initial grid, descending from 1.
    pub grid: Vec<f64>,
    /// Minimum span `q_0 − q_min` worth refining.
    pub eps: f64,
    /// SQV threshold, or the ratio coefficient for the κ rule.
    pub l: f64,
    /// Refined grids have `k + 1` points.
    pub k: usize,
}

impl QGridSpec {
    pub fn default_kappa() -> Self {
        QGridSpec {
            grid: DEFAULT_GRID.to_vec(),
            eps: DEFAULT_EPS,
            l: DEFAULT_L_KAPPA,
            k: DEFAULT_K,
        }
    }

    pub fn default_sqv() -> Self {
        QGridSpec {
            l: DEFAULT_L_SQV,
            ..Self::default_kappa()
        }
    }

    pub fn validate(&self, ratio_rule: bool) -> Result<()> {
        crate::estimate::validate_profile_grid(&self.grid)?;
        if !(self.eps > 0.0) {
            return Err(Error::domain("eps must be positive"));
        }
        if !(self.l > 0.0) || (ratio_rule && !(self.l > 1.0)) {
            return Err(Error::domain(format!(
                "threshold L must be positive (and above 1 for the κ rule), got {}",
                self.l
            )));
        }
        if self.k == 0 {
            return Err(Error::domain("K must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// A pass met the acceptance rule; `q*` is that pass's `q_0`.
    Stabilized,
    /// No pass could be evaluated; `q* = 1`.
    FallbackToOne,
    /// Refinement ran out of span without acceptance; `q* = 1`.
    SpanExhausted,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Stabilized => "stabilized",
            StopReason::FallbackToOne => "fallback-to-one",
            StopReason::SpanExhausted => "span-exhausted",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassTrace {
    pub pass: usize,
    pub grid: Vec<f64>,
    /// Grid points whose fit (or κ, or standard errors) failed.
    pub excluded: Vec<f64>,
    /// q values that entered the series, in order.
    pub used: Vec<f64>,
    /// `values[k-1]` compares `used[k-1]` with `used[k]`.
    pub values: Vec<f64>,
    /// Index into `used` of the refinement start, when the pass refined.
    pub k_star: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub q_star: f64,
    pub trace: Vec<PassTrace>,
    pub reason: StopReason,
}

/// `k+1` equally spaced points from `from` down to `to`, endpoints exact.
pub fn refine_grid(from: f64, to: f64, k: usize) -> Vec<f64> {
    if from == to {
        return vec![from];
    }
    let mut g: Vec<f64> = (0..=k).map(|i| from + (to - from) * i as f64 / k as f64).collect();
    g[0] = from;
    g[k] = to;
    g
}

/// Drives the shared pass / accept / refine loop. `series` maps a grid to the
/// usable points and the consecutive-pair values; `rule` returns `None` to
/// accept, or the 1-based `k*` to refine from.
fn select<S, R>(spec: &QGridSpec, mut series: S, rule: R) -> SelectionResult
where
    S: FnMut(&[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>),
    R: Fn(&[f64]) -> Option<usize>,
{
    let mut grid = spec.grid.clone();
    let mut trace = Vec::new();
    let span = |g: &[f64]| g[0] - g[g.len() - 1];
    if span(&grid) <= spec.eps {
        trace.push(PassTrace {
            pass: 0,
            grid,
            excluded: vec![],
            used: vec![],
            values: vec![],
            k_star: None,
        });
        return SelectionResult {
            q_star: 1.0,
            trace,
            reason: StopReason::FallbackToOne,
        };
    }
    let mut pass = 0;
    while span(&grid) > spec.eps {
        let (used, excluded, values) = series(&grid);
        let mut t = PassTrace {
            pass,
            grid: grid.clone(),
            excluded,
            used: used.clone(),
            values: values.clone(),
            k_star: None,
        };
        if values.is_empty() {
            trace.push(t);
            return SelectionResult {
                q_star: 1.0,
                trace,
                reason: StopReason::FallbackToOne,
            };
        }
        match rule(&values) {
            None => {
                trace.push(t);
                return SelectionResult {
                    q_star: used[0],
                    trace,
                    reason: StopReason::Stabilized,
                };
            }
            Some(k) => {
                t.k_star = Some(k);
                trace.push(t);
                let q_min = grid[grid.len() - 1];
                grid = refine_grid(used[k], q_min, spec.k);
            }
        }
        pass += 1;
    }
    SelectionResult {
        q_star: 1.0,
        trace,
        reason: StopReason::SpanExhausted,
    }
}

/// SQV rule. `fit_fn(q)` returns θ̂_q and `se_fn(θ̂, q)` its standard errors;
/// `m` is the replicate count used for standardization. Points where either
/// fails are dropped from the pass.
pub fn select_q_sqv<F, G>(mut fit_fn: F, mut se_fn: G, spec: &QGridSpec, m: usize) -> Result<SelectionResult>
where
    F: FnMut(f64) -> Result<MaternParams>,
    G: FnMut(&MaternParams, f64) -> Result<StdErrs>,
{
    spec.validate(false)?;
    let l = spec.l;
    let series = |grid: &[f64]| {
        let mut used = Vec::new();
        let mut excluded = Vec::new();
        let mut zs: Vec<[f64; 3]> = Vec::new();
        for &q in grid {
            let z = fit_fn(q).and_then(|th| {
                let se = se_fn(&th, q)?;
                standardized(&th, &se, m)
            });
            match z {
                Ok(z) if z.iter().all(|v| v.is_finite()) => {
                    used.push(q);
                    zs.push(z);
                }
                _ => excluded.push(q),
            }
        }
        let values = zs.windows(2).map(|w| sqv(&w[0], &w[1], 3).unwrap_or(f64::NAN)).collect();
        (used, excluded, values)
    };
    let rule = |v: &[f64]| {
        if v.iter().all(|&s| s < l) {
            None
        } else {
            v.iter().rposition(|&s| s >= l).map(|i| i + 1)
        }
    };
    Ok(select(spec, series, rule))
}

/// κ rule with `dκ_k = |κ_{k−1}/κ_k − 1|`; accepts when `max dκ ≤ L·min dκ`.
pub fn select_q_kappa<F>(mut fit_fn: F, spec: &QGridSpec) -> Result<SelectionResult>
where
    F: FnMut(f64) -> Result<MaternParams>,
{
    spec.validate(true)?;
    let l = spec.l;
    let series = |grid: &[f64]| {
        let mut used = Vec::new();
        let mut excluded = Vec::new();
        let mut ks = Vec::new();
        for &q in grid {
            match fit_fn(q).and_then(|th| kappa(&th)) {
                Ok(k) if k.is_finite() && k > 0.0 => {
                    used.push(q);
                    ks.push(k);
                }
                _ => excluded.push(q),
            }
        }
        let values = ks.windows(2).map(|w| (w[0] / w[1] - 1.0).abs()).collect();
        (used, excluded, values)
    };
    let rule = |v: &[f64]| {
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        if max <= l * min {
            None
        } else {
            v.iter().rposition(|&d| d >= l * min).map(|i| i + 1)
        }
    };
    Ok(select(spec, series, rule))
}
