//! `mlqe` command-line tool. Settings come from defaults, then `--config`,
//! then flags. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical
//! failure.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlqe::asymptotics::{sandwich, std_errs};
use mlqe::config::{parse_triple, ExperimentConfig, Selector};
use mlqe::estimate::{default_init, fit, FitResult};
use mlqe::io::{self, KvRecord};
use mlqe::simulate::{simulate, GENERATOR};
use mlqe::sweep::{self, run_selector, run_sweep, Fitter};
use mlqe::variogram::{center_replicates, default_max_dist, variograms, DEFAULT_BINS};
use mlqe::{Error, LocationSet, MaternParams, ReplicateSet, Result};

#[derive(Parser)]
#[command(name = "mlqe", version, about = "Robust Lq-likelihood estimation of Matérn covariance parameters")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate locations and replicates, optionally contaminated.
    Simulate(Common),
    /// Fit θ at one q on a dataset.
    Fit(DataArgs),
    /// Choose q with the κ or SQV rule.
    SelectQ(DataArgs),
    /// Sandwich matrices and standard errors at a fit.
    Se(SeArgs),
    /// Empirical variogram of each centered replicate.
    Variogram(VariogramArgs),
    /// Repeated simulate, fit profile and select q.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// q for single fits
    #[arg(long, default_value_t = 1.0)]
    q: f64,
    /// Comma-separated q grid, starting at 1
    #[arg(long)]
    q_grid: Option<String>,
    #[arg(long)]
    contam_r: Option<f64>,
    #[arg(long)]
    contam_sd: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// grid or uniform
    #[arg(long)]
    layout: Option<String>,
    #[arg(long, alias = "repetitions")]
    reps: Option<usize>,
    /// kappa, sqv or none
    #[arg(long)]
    selector: Option<String>,
    /// Output directory [default: $MLQE_OUT_DIR or mlqe_out]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding locations.csv and replicates.csv [default: the output directory]
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// θ as σ²,β,ν; fitted at --q when absent
    #[arg(long)]
    theta: Option<String>,
}

#[derive(Args)]
struct VariogramArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Largest distance binned [default: half the largest pairwise distance]
    #[arg(long)]
    max_dist: Option<f64>,
}

const LOCATIONS: &str = "locations.csv";
const REPLICATES: &str = "replicates.csv";
const METADATA: &str = "metadata.txt";

fn config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let mut set = |k: &str, v: Option<String>| match v {
        Some(v) => cfg.set(k, &v),
        None => Ok(()),
    };
    set("sim.seed", c.seed.map(|v| v.to_string()))?;
    set("q.grid", c.q_grid.clone())?;
    set("sim.contam_r", c.contam_r.map(|v| v.to_string()))?;
    set("sim.contam_sd", c.contam_sd.map(|v| v.to_string()))?;
    set("sim.n", c.n.map(|v| v.to_string()))?;
    set("sim.m", c.m.map(|v| v.to_string()))?;
    set("sim.layout", c.layout.clone())?;
    set("sweep.repetitions", c.reps.map(|v| v.to_string()))?;
    set("sweep.selector", c.selector.clone())?;
    set("output.dir", c.out.as_ref().map(|p| p.display().to_string()))?;
    if !(c.q > 0.0 && c.q <= 1.0) {
        return Err(Error::Config(format!("--q must lie in (0, 1], got {}", c.q)));
    }
    // bad settings are usage errors whatever layer caught them
    cfg.validate().map_err(|e| match e {
        Error::Config(_) => e,
        e => Error::Config(e.to_string()),
    })?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(&cfg.output_dir)
}

fn load(args: &DataArgs, cfg: &ExperimentConfig) -> Result<(LocationSet, ReplicateSet)> {
    let dir = args.data.as_deref().unwrap_or(&cfg.output_dir);
    io::read_dataset(&dir.join(LOCATIONS), &dir.join(REPLICATES)).map_err(|e| match e {
        Error::Io(err) => Error::Io(std::io::Error::new(err.kind(), format!("{}: {err}", dir.display()))),
        e => e,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn theta_fields(rec: &mut KvRecord, prefix: &str, t: &MaternParams) {
    rec.push(format!("{prefix}sigma2"), t.sigma2)
        .push(format!("{prefix}beta"), t.beta)
        .push(format!("{prefix}nu"), t.nu)
        .push(format!("{prefix}kappa"), t.kappa());
}

fn metadata(cfg: &ExperimentConfig, command: &str) -> KvRecord {
    let mut rec = cfg.to_record();
    rec.push("run.command", command)
        .push("run.generator", GENERATOR)
        .push("run.version", env!("CARGO_PKG_VERSION"));
    rec
}

fn cmd_simulate(c: &Common) -> Result<()> {
    let cfg = config(c)?;
    let out = simulate(&cfg.sim)?;
    let dir = out_dir(&cfg)?;
    io::write_locations(&dir.join(LOCATIONS), &out.locs)?;
    io::write_replicates(&dir.join(REPLICATES), &out.reps)?;
    let hit: Vec<String> = (0..out.contaminated.len())
        .filter(|&i| out.contaminated[i])
        .map(|i| i.to_string())
        .collect();
    let mut rec = metadata(&cfg, "simulate");
    rec.push("run.contaminated_count", hit.len())
        .push("run.contaminated_reps", hit.join(","));
    rec.write(&dir.join(METADATA))?;
    println!("wrote n={} m={} ({} contaminated) to {}", cfg.sim.n, cfg.sim.m, hit.len(), dir.display());
    Ok(())
}

fn fit_at(q: f64, cfg: &ExperimentConfig, locs: &LocationSet, reps: &ReplicateSet) -> Result<FitResult> {
    let init = cfg.init.unwrap_or_else(|| default_init(reps, &cfg.bounds));
    fit(reps, locs, q, &cfg.bounds, &init, &cfg.fit)
}

fn cmd_fit(args: &DataArgs) -> Result<()> {
    let cfg = config(&args.common)?;
    let (locs, reps) = load(args, &cfg)?;
    let r = fit_at(args.common.q, &cfg, &locs, &reps)?;
    let mut rec = KvRecord::new();
    rec.push("q", r.q);
    theta_fields(&mut rec, "", &r.theta_hat);
    rec.push("objective", r.objective)
        .push("scaled", cfg.fit.scale)
        .push("iterations", r.iterations)
        .push("evaluations", r.evaluations)
        .push("converged", r.converged);
    theta_fields(&mut rec, "init_", &r.init);
    let dir = out_dir(&cfg)?;
    rec.write(&dir.join("fit.txt"))?;
    print!("{}", rec.to_text());
    Ok(())
}

fn cmd_select_q(args: &DataArgs) -> Result<()> {
    let cfg = config(&args.common)?;
    let selector = if cfg.selector == Selector::None { Selector::Kappa } else { cfg.selector };
    let (locs, reps) = load(args, &cfg)?;
    let mut fitter = Fitter::new(&reps, &locs, cfg.bounds, cfg.fit, cfg.init);
    let sel = run_selector(&mut fitter, selector, &cfg.effective_q_grid(selector))?
        .expect("selector is not none");
    let chosen = fitter.fit(sel.q_star)?;
    let mut rec = KvRecord::new();
    rec.push("selector", selector)
        .push("q_star", sel.q_star)
        .push("reason", sel.reason)
        .push("passes", sel.trace.len());
    theta_fields(&mut rec, "", &chosen.theta_hat);
    rec.push("objective", chosen.objective);
    let dir = out_dir(&cfg)?;
    rec.write(&dir.join("selection.txt"))?;
    sweep::write_trace(create(&dir.join("selection_trace.csv"))?, &sel)?;
    print!("{}", rec.to_text());
    Ok(())
}

fn matrix_text(m: &nalgebra::Matrix3<f64>) -> String {
    m.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn cmd_se(args: &SeArgs) -> Result<()> {
    let cfg = config(&args.data.common)?;
    let (locs, reps) = load(&args.data, &cfg)?;
    let q = args.data.common.q;
    let theta = match &args.theta {
        Some(t) => {
            let t = parse_triple("--theta", t)?;
            t.validate()?;
            t
        }
        None => fit_at(q, &cfg, &locs, &reps)?.theta_hat,
    };
    let parts = sandwich(&reps, &locs, &theta, q)?;
    let se = std_errs(&parts)?;
    let mut rec = KvRecord::new();
    rec.push("q", q);
    theta_fields(&mut rec, "", &theta);
    rec.push("m", parts.m)
        .push("k", matrix_text(&parts.k))
        .push("j", matrix_text(&parts.j))
        .push("log_weight_shift", parts.log_weight_shift)
        .push("se_sigma2", se.se[0])
        .push("se_beta", se.se[1])
        .push("se_nu", se.se[2])
        .push("classical_sigma2", se.classical[0])
        .push("classical_beta", se.classical[1])
        .push("classical_nu", se.classical[2])
        .push("convention", se.convention)
        .push("condition", se.condition);
    let dir = out_dir(&cfg)?;
    rec.write(&dir.join("se.txt"))?;
    print!("{}", rec.to_text());
    Ok(())
}

fn cmd_variogram(args: &VariogramArgs) -> Result<()> {
    let cfg = config(&args.data.common)?;
    let (locs, reps) = load(&args.data, &cfg)?;
    let max_dist = args.max_dist.unwrap_or_else(|| default_max_dist(&locs));
    let curves = variograms(&center_replicates(&reps), &locs, args.bins, max_dist)?;
    let dir = out_dir(&cfg)?;
    io::write_variograms_to(create(&dir.join("variogram.csv"))?, &curves)?;
    println!("wrote {} curves to {}", curves.len(), dir.join("variogram.csv").display());
    Ok(())
}

fn cmd_sweep(c: &Common) -> Result<()> {
    let cfg = config(c)?;
    let out = run_sweep(&cfg)?;
    let dir = out_dir(&cfg)?;
    sweep::write_rows(create(&dir.join("sweep_rows.csv"))?, &out.rows)?;
    sweep::write_summary(create(&dir.join("sweep_summary.csv"))?, &out.summary)?;
    sweep::write_histogram(create(&dir.join("sweep_selected_q.csv"))?, &out.histogram)?;
    let failed = out.outcomes.iter().filter(|o| o.error.is_some()).count();
    let mut rec = metadata(&cfg, "sweep");
    rec.push("run.failed_repetitions", failed);
    rec.write(&dir.join(METADATA))?;
    for o in out.outcomes.iter().filter_map(|o| o.error.as_ref()) {
        eprintln!("warning: {o}");
    }
    println!("{} rows, {} failed repetitions, written to {}", out.rows.len(), failed, dir.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numerical() => 3,
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.cmd {
        Cmd::Simulate(c) => cmd_simulate(c),
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::SelectQ(a) => cmd_select_q(a),
        Cmd::Se(a) => cmd_se(a),
        Cmd::Variogram(a) => cmd_variogram(a),
        Cmd::Sweep(c) => cmd_sweep(c),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
