//! Experiment configuration as flat `key=value` text with dotted sections.
//!
//! ```text
//! sim.sigma2 = 1        sim.beta = 0.1        sim.nu = 0.5
//! sim.n = 100           sim.m = 100           sim.layout = grid
//! sim.seed = 1          sim.contam_r = 0      sim.contam_sd = 1
//! sim.noise = gaussian
//! q.grid = 1,0.999,0.99,0.98,0.97,0.95,0.925,0.9
//! q.eps = 0.005         q.l = 4               q.k = 7
//! estimate.lower = 0.001,0.001,0.05
//! estimate.upper = 1000,10,5
//! estimate.init = auto   (or σ²,β,ν)
//! estimate.tol = 1e-6   estimate.max_evals = 5000   estimate.scale = true
//! sweep.repetitions = 100   sweep.selector = kappa   (kappa | sqv | none)
//! output.dir = mlqe_out
//! ```
//!
//! Keys under `run.` are provenance notes and are ignored, so a metadata
//! record written by the CLI reads back as the configuration that made it.
//!
//! Omitting `q.l` gives 4 for the κ rule and 0.05 for the SQV rule.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::estimate::{Bounds, FitOptions};
use crate::io::KvRecord;
use crate::matern::MaternParams;
use crate::qselect::{QGridSpec, DEFAULT_L_KAPPA, DEFAULT_L_SQV};
use crate::simulate::{ContaminationSpec, Layout, SimConfig};

pub const OUT_DIR_ENV: &str = "MLQE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "mlqe_out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selector {
    #[default]
    Kappa,
    Sqv,
    None,
}

impl std::str::FromStr for Selector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kappa" => Ok(Selector::Kappa),
            "sqv" => Ok(Selector::Sqv),
            "none" => Ok(Selector::None),
            _ => Err(Error::Config(format!("unknown selector '{s}' (expected kappa, sqv or none)"))),
        }
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Selector::Kappa => "kappa",
            Selector::Sqv => "sqv",
            Selector::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub q_grid: QGridSpec,
    /// Whether `q_grid.l` was set explicitly rather than by selector default.
    pub l_explicit: bool,
    pub bounds: Bounds,
    /// `None` means the data-driven default start.
    pub init: Option<MaternParams>,
    pub fit: FitOptions,
    pub repetitions: usize,
    pub selector: Selector,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig {
                theta: MaternParams {
                    sigma2: 1.0,
                    beta: 0.1,
                    nu: 0.5,
                },
                n: 100,
                m: 100,
                layout: Layout::Grid,
                seed: 1,
                contamination: ContaminationSpec::none(),
            },
            q_grid: QGridSpec::default_kappa(),
            l_explicit: false,
            bounds: Bounds::default(),
            init: None,
            fit: FitOptions::default(),
            repetitions: 1,
            selector: Selector::Kappa,
            output_dir: default_output_dir(),
        }
    }
}

/// `$MLQE_OUT_DIR`, else `mlqe_out`.
pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

pub fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

pub fn parse_triple(key: &str, v: &str) -> Result<MaternParams> {
    let xs = parse_list(key, v)?;
    if xs.len() != 3 {
        return Err(Error::Config(format!("{key}: expected three comma-separated values")));
    }
    Ok(MaternParams::from_array([xs[0], xs[1], xs[2]]))
}

fn triple_text(t: &MaternParams) -> String {
    format!("{},{},{}", t.sigma2, t.beta, t.nu)
}

impl ExperimentConfig {
    /// Applies one setting; unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "sim.sigma2" => self.sim.theta.sigma2 = num(key, v)?,
            "sim.beta" => self.sim.theta.beta = num(key, v)?,
            "sim.nu" => self.sim.theta.nu = num(key, v)?,
            "sim.n" => self.sim.n = num(key, v)?,
            "sim.m" => self.sim.m = num(key, v)?,
            "sim.layout" => self.sim.layout = v.parse()?,
            "sim.seed" => self.sim.seed = num(key, v)?,
            "sim.contam_r" => self.sim.contamination.r = num(key, v)?,
            "sim.contam_sd" => self.sim.contamination.noise_sd = num(key, v)?,
            "sim.noise" => self.sim.contamination.noise_kind = v.parse()?,
            "q.grid" => self.q_grid.grid = parse_list(key, v)?,
            "q.eps" => self.q_grid.eps = num(key, v)?,
            "q.l" => {
                self.q_grid.l = num(key, v)?;
                self.l_explicit = true;
            }
            "q.k" => self.q_grid.k = num(key, v)?,
            "estimate.lower" => self.bounds.lower = parse_triple(key, v)?,
            "estimate.upper" => self.bounds.upper = parse_triple(key, v)?,
            "estimate.init" => {
                self.init = if v == "auto" { None } else { Some(parse_triple(key, v)?) };
            }
            "estimate.tol" => self.fit.tol = num(key, v)?,
            "estimate.max_evals" => self.fit.max_evals = num(key, v)?,
            "estimate.scale" => self.fit.scale = num(key, v)?,
            "sweep.repetitions" => self.repetitions = num(key, v)?,
            "sweep.selector" => self.selector = v.parse()?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            // provenance written next to outputs; not settings
            k if k.starts_with("run.") => {}
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_record(rec: &KvRecord) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in rec.entries() {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_record(&KvRecord::read(path)?)
    }

    /// The SQV and κ rules use different default thresholds.
    pub fn effective_q_grid(&self, selector: Selector) -> QGridSpec {
        let mut g = self.q_grid.clone();
        if !self.l_explicit {
            g.l = if selector == Selector::Sqv { DEFAULT_L_SQV } else { DEFAULT_L_KAPPA };
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.bounds.validate()?;
        if let Some(init) = &self.init {
            if !self.bounds.contains(init) {
                return Err(Error::Config(format!("estimate.init {init} lies outside the bounds")));
            }
        }
        if self.repetitions == 0 {
            return Err(Error::Config("sweep.repetitions must be at least 1".into()));
        }
        if !(self.fit.tol > 0.0) || self.fit.max_evals == 0 {
            return Err(Error::Config("estimate.tol must be positive and max_evals at least 1".into()));
        }
        self.effective_q_grid(self.selector)
            .validate(self.selector == Selector::Kappa)
    }

    /// Every setting, in a form `from_record` reads back.
    pub fn to_record(&self) -> KvRecord {
        let mut r = KvRecord::new();
        let s = &self.sim;
        r.push("sim.sigma2", s.theta.sigma2)
            .push("sim.beta", s.theta.beta)
            .push("sim.nu", s.theta.nu)
            .push("sim.n", s.n)
            .push("sim.m", s.m)
            .push("sim.layout", s.layout)
            .push("sim.seed", s.seed)
            .push("sim.contam_r", s.contamination.r)
            .push("sim.contam_sd", s.contamination.noise_sd)
            .push("sim.noise", s.contamination.noise_kind);
        let g = self.effective_q_grid(self.selector);
        r.push(
            "q.grid",
            g.grid.iter().map(|q| q.to_string()).collect::<Vec<_>>().join(","),
        )
        .push("q.eps", g.eps)
        .push("q.l", g.l)
        .push("q.k", g.k)
        .push("estimate.lower", triple_text(&self.bounds.lower))
        .push("estimate.upper", triple_text(&self.bounds.upper))
        .push(
            "estimate.init",
            self.init.as_ref().map(triple_text).unwrap_or_else(|| "auto".into()),
        )
        .push("estimate.tol", self.fit.tol)
        .push("estimate.max_evals", self.fit.max_evals)
        .push("estimate.scale", self.fit.scale)
        .push("sweep.repetitions", self.repetitions)
        .push("sweep.selector", self.selector)
        .push("output.dir", self.output_dir.display());
        r
    }
}
