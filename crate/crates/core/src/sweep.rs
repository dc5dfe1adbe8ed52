//! Simulation-study driver: for each repetition generate data, fit the q
//! profile, select q, and tabulate estimates.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::asymptotics::{sandwich, std_errs};
use crate::config::{ExperimentConfig, Selector};
use crate::error::{Error, Result};
use crate::estimate::{default_init, failed_fit, fit, Bounds, FitOptions, FitResult};
use crate::likelihood::ReplicateSet;
use crate::matern::{LocationSet, MaternParams};
use crate::qselect::{select_q_kappa, select_q_sqv, QGridSpec, SelectionResult};
use crate::simulate::simulate;

/// Memoized fits on one dataset. A new q starts from the estimate at the
/// nearest larger q already fitted, or from `init` when there is none.
pub struct Fitter<'a> {
    reps: &'a ReplicateSet,
    locs: &'a LocationSet,
    bounds: Bounds,
    opts: FitOptions,
    init: MaternParams,
    cache: BTreeMap<u64, FitResult>,
}

impl<'a> Fitter<'a> {
    pub fn new(
        reps: &'a ReplicateSet,
        locs: &'a LocationSet,
        bounds: Bounds,
        opts: FitOptions,
        init: Option<MaternParams>,
    ) -> Self {
        let init = init.unwrap_or_else(|| default_init(reps, &bounds));
        Fitter {
            reps,
            locs,
            bounds,
            opts,
            init,
            cache: BTreeMap::new(),
        }
    }

    // q > 0, so the bit patterns order like the values
    fn key(q: f64) -> u64 {
        q.to_bits()
    }

    /// The recorded fit at `q`, running it if needed. Failures are cached too.
    pub fn fit_result(&mut self, q: f64) -> FitResult {
        if let Some(r) = self.cache.get(&Self::key(q)) {
            return r.clone();
        }
        let start = self
            .cache
            .range(Self::key(q)..)
            .find(|(_, r)| r.error.is_none())
            .map(|(_, r)| r.theta_hat)
            .unwrap_or(self.init);
        let r = fit(self.reps, self.locs, q, &self.bounds, &start, &self.opts).unwrap_or_else(|e| failed_fit(q, &start, &e));
        self.cache.insert(Self::key(q), r.clone());
        r
    }

    pub fn fit(&mut self, q: f64) -> Result<FitResult> {
        let r = self.fit_result(q);
        match &r.error {
            None => Ok(r),
            Some(msg) => Err(Error::domain(format!("fit at q={q} failed: {msg}"))),
        }
    }

    pub fn reps(&self) -> &ReplicateSet {
        self.reps
    }

    pub fn locs(&self) -> &LocationSet {
        self.locs
    }
}

/// Runs the chosen selector with fits from `fitter`.
pub fn run_selector(fitter: &mut Fitter, selector: Selector, spec: &QGridSpec) -> Result<Option<SelectionResult>> {
    let (reps, locs) = (fitter.reps, fitter.locs);
    match selector {
        Selector::None => Ok(None),
        Selector::Kappa => select_q_kappa(|q| fitter.fit(q).map(|r| r.theta_hat), spec).map(Some),
        Selector::Sqv => select_q_sqv(
            |q| fitter.fit(q).map(|r| r.theta_hat),
            |th, q| std_errs(&sandwich(reps, locs, th, q)?),
            spec,
            reps.m(),
        )
        .map(Some),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rep: usize,
    pub q: f64,
    pub sigma2: f64,
    pub beta: f64,
    pub nu: f64,
    pub kappa: f64,
    pub objective: f64,
    pub converged: bool,
    /// The row records the fit at the selected q.
    pub selected: bool,
}

impl SweepRow {
    fn from_fit(rep: usize, r: &FitResult, selected: bool) -> Self {
        let ok = r.error.is_none();
        let v = |x: f64| if ok { x } else { f64::NAN };
        SweepRow {
            rep,
            q: r.q,
            sigma2: v(r.theta_hat.sigma2),
            beta: v(r.theta_hat.beta),
            nu: v(r.theta_hat.nu),
            kappa: v(r.theta_hat.kappa()),
            objective: r.objective,
            converged: ok && r.converged,
            selected,
        }
    }

    fn failed(rep: usize, q: f64, selected: bool) -> Self {
        SweepRow {
            rep,
            q,
            sigma2: f64::NAN,
            beta: f64::NAN,
            nu: f64::NAN,
            kappa: f64::NAN,
            objective: f64::NAN,
            converged: false,
            selected,
        }
    }

    fn values(&self) -> [f64; 4] {
        [self.sigma2, self.beta, self.nu, self.kappa]
    }
}

#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub rows: Vec<SweepRow>,
    pub selection: Option<SelectionResult>,
    pub contaminated: usize,
    pub error: Option<String>,
}

/// Seed of repetition `rep`.
pub fn rep_seed(base: u64, rep: usize) -> u64 {
    base.wrapping_add(rep as u64)
}

/// One repetition; never fails, problems become non-converged rows.
pub fn run_repetition(cfg: &ExperimentConfig, rep: usize) -> RepOutcome {
    let grid = &cfg.q_grid.grid;
    let mut sim_cfg = cfg.sim.clone();
    sim_cfg.seed = rep_seed(cfg.sim.seed, rep);
    let data = match simulate(&sim_cfg) {
        Ok(d) => d,
        Err(e) => {
            let mut rows: Vec<_> = grid.iter().map(|&q| SweepRow::failed(rep, q, false)).collect();
            if cfg.selector != Selector::None {
                rows.push(SweepRow::failed(rep, 1.0, true));
            }
            return RepOutcome {
                rows,
                selection: None,
                contaminated: 0,
                error: Some(e.to_string()),
            };
        }
    };
    let mut fitter = Fitter::new(&data.reps, &data.locs, cfg.bounds, cfg.fit, cfg.init);
    let mut rows: Vec<_> = grid
        .iter()
        .map(|&q| SweepRow::from_fit(rep, &fitter.fit_result(q), false))
        .collect();
    let mut error = None;
    let selection = match run_selector(&mut fitter, cfg.selector, &cfg.effective_q_grid(cfg.selector)) {
        Ok(s) => s,
        Err(e) => {
            error = Some(e.to_string());
            None
        }
    };
    if let Some(s) = &selection {
        rows.push(SweepRow::from_fit(rep, &fitter.fit_result(s.q_star), true));
    } else if cfg.selector != Selector::None {
        rows.push(SweepRow::failed(rep, 1.0, true));
    }
    RepOutcome {
        rows,
        selection,
        contaminated: data.contaminated.iter().filter(|c| **c).count(),
        error,
    }
}

/// Per-q error summary against the generating parameters, over successful
/// fits. Variances divide by the count, so `mse = bias² + var`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// The q value, or `selected` for the rows at the chosen q.
    pub label: String,
    pub count: usize,
    /// Order: σ², β, ν, κ.
    pub mean: [f64; 4],
    pub bias: [f64; 4],
    pub var: [f64; 4],
    pub mse: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub outcomes: Vec<RepOutcome>,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
    /// Selected q values with their counts, largest q first.
    pub histogram: Vec<(f64, usize)>,
}

fn summarize(label: String, rows: &[&SweepRow], truth: &MaternParams) -> SummaryRow {
    let t = [truth.sigma2, truth.beta, truth.nu, truth.kappa()];
    let ok: Vec<[f64; 4]> = rows
        .iter()
        .map(|r| r.values())
        .filter(|v| v.iter().all(|x| x.is_finite()))
        .collect();
    let n = ok.len() as f64;
    let mut s = SummaryRow {
        label,
        count: ok.len(),
        mean: [f64::NAN; 4],
        bias: [f64::NAN; 4],
        var: [f64::NAN; 4],
        mse: [f64::NAN; 4],
    };
    if ok.is_empty() {
        return s;
    }
    for j in 0..4 {
        let mean = ok.iter().map(|v| v[j]).sum::<f64>() / n;
        s.mean[j] = mean;
        s.bias[j] = mean - t[j];
        s.var[j] = ok.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / n;
        s.mse[j] = ok.iter().map(|v| (v[j] - t[j]).powi(2)).sum::<f64>() / n;
    }
    s
}

pub fn summarize_rows(rows: &[SweepRow], grid: &[f64], truth: &MaternParams) -> (Vec<SummaryRow>, Vec<(f64, usize)>) {
    let mut summary: Vec<SummaryRow> = grid
        .iter()
        .map(|&q| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| !r.selected && r.q == q).collect();
            summarize(q.to_string(), &sel, truth)
        })
        .collect();
    let chosen: Vec<&SweepRow> = rows.iter().filter(|r| r.selected).collect();
    if !chosen.is_empty() {
        summary.push(summarize("selected".into(), &chosen, truth));
    }
    let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
    for r in &chosen {
        *hist.entry(r.q.to_bits()).or_default() += 1;
    }
    let histogram = hist.into_iter().rev().map(|(b, c)| (f64::from_bits(b), c)).collect();
    (summary, histogram)
}

/// All repetitions, in parallel, gathered in repetition order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let outcomes: Vec<RepOutcome> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition(cfg, rep))
        .collect();
    let rows: Vec<SweepRow> = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    let (summary, histogram) = summarize_rows(&rows, &cfg.q_grid.grid, &cfg.sim.theta);
    Ok(SweepOutput {
        outcomes,
        rows,
        summary,
        histogram,
    })
}

pub fn write_rows<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["rep", "q", "sigma2", "beta", "nu", "kappa", "objective", "converged", "selected"])?;
    for r in rows {
        wtr.write_record([
            r.rep.to_string(),
            r.q.to_string(),
            r.sigma2.to_string(),
            r.beta.to_string(),
            r.nu.to_string(),
            r.kappa.to_string(),
            r.objective.to_string(),
            r.converged.to_string(),
            r.selected.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(w: W, summary: &[SummaryRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["q".to_string(), "count".to_string()];
    for stat in ["mean", "bias", "var", "mse"] {
        for p in ["sigma2", "beta", "nu", "kappa"] {
            header.push(format!("{stat}_{p}"));
        }
    }
    wtr.write_record(&header)?;
    for s in summary {
        let mut rec = vec![s.label.clone(), s.count.to_string()];
        for arr in [&s.mean, &s.bias, &s.var, &s.mse] {
            rec.extend(arr.iter().map(|v| v.to_string()));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_histogram<W: Write>(w: W, hist: &[(f64, usize)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["q", "count"])?;
    for (q, c) in hist {
        wtr.write_record([q.to_string(), c.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Trace of a selection as `pass,q,used,value,k_star`: one line per grid point;
/// `value` compares the point with the previous used point.
pub fn write_trace<W: Write>(w: W, sel: &SelectionResult) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["pass", "q", "used", "value", "k_star"])?;
    for t in &sel.trace {
        let k_star_q = t.k_star.map(|k| t.used[k]);
        for &q in &t.grid {
            let pos = t.used.iter().position(|&u| u == q);
            let value = match pos {
                Some(k) if k > 0 => t.values[k - 1].to_string(),
                _ => String::new(),
            };
            wtr.write_record([
                t.pass.to_string(),
                q.to_string(),
                pos.is_some().to_string(),
                value,
                (k_star_q == Some(q)).to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
