//! Executes experiment configs and writes their artifacts.
//!
//! A run directory contains:
//!
//! * `resolved_config.toml`: the config with every default filled in,
//! * `ledger.jsonl`: one JSON record per report, appended,
//! * `summary.tsv`: one row per report,
//! * plot data (`*.tsv`) named after the report and table,
//! * `timings.tsv`: wall-clock seconds per report.
//!
//! Everything except `timings.tsv` is a deterministic function of the config
//! and seed; the worker count only changes how fast it is produced.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bound_checks::{self, run_paths, Builder, CheckReport};
use crate::chain_sim::{sample_path_form, sample_path_v_trunc, sample_path_y, write_paths_tsv, LatticePath};
use crate::config::{ChainKind, DensityParams, ExperimentConfig, Parameters, SimulateParams};
use crate::convergence_lab::run_converge;
use crate::error::{Error, Result};
use crate::kernel_model::{JumpSampler, LatticeSite, ModelSpec};
use crate::lattice_generator::{build_generator, heat_kernels, GeneratorParams};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "AXISJUMP_OUTPUT";
const DEFAULT_ROOT: &str = "axisjump-out";

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    /// Run directory for `run`, output root for `suite`.
    pub output: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub name: String,
    pub config: ExperimentConfig,
    pub reports: Vec<CheckReport>,
    pub output_dir: PathBuf,
}

impl RunOutcome {
    pub fn pass(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }

    pub fn failing(&self) -> Vec<&CheckReport> {
        self.reports.iter().filter(|r| !r.pass).collect()
    }

    /// 0 when every gated report passes, 1 otherwise.
    pub fn status(&self) -> i32 {
        if self.pass() {
            0
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SuiteStatus {
    Pass,
    Fail,
    Error(String),
}

#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub config: String,
    pub experiment: String,
    pub status: SuiteStatus,
    pub reports: usize,
    pub failed: Vec<String>,
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub rows: Vec<SuiteRow>,
    pub output_dir: PathBuf,
}

impl SuiteOutcome {
    /// 2 if any config could not run, else 1 if any check failed, else 0.
    pub fn status(&self) -> i32 {
        if self.rows.iter().any(|r| matches!(r.status, SuiteStatus::Error(_))) {
            2
        } else if self.rows.iter().any(|r| r.status == SuiteStatus::Fail) {
            1
        } else {
            0
        }
    }
}

#[derive(Serialize)]
struct LedgerRecord<'a> {
    config: &'a str,
    experiment: String,
    seed: u64,
    report: &'a CheckReport,
}

/// `$AXISJUMP_OUTPUT`, or `axisjump-out` in the working directory.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
}

fn config_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "config".to_string())
}

fn apply_overrides(config: &mut ExperimentConfig, opts: &RunOptions) -> Result<()> {
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(workers) = opts.workers {
        if workers == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        config.workers = workers;
    }
    Ok(())
}

/// Loads, runs and writes one config.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let mut config = ExperimentConfig::load(config_path)?;
    apply_overrides(&mut config, opts)?;
    let name = config_name(config_path);
    let dir = match (&opts.output, &config.output_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => dir.clone(),
        (None, None) => default_output_root().join(&name),
    };
    run_config(&name, config, &dir)
}

/// Runs an already parsed config into `dir`.
pub fn run_config(name: &str, config: ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.workers)))?;
    let artifacts = pool.install(|| execute(&config))?;
    write_artifacts(name, &config, &artifacts, dir)?;
    Ok(RunOutcome {
        name: name.to_string(),
        config,
        reports: artifacts.reports,
        output_dir: dir.to_path_buf(),
    })
}

/// Runs every `*.toml` in `dir` (sorted by name) into `<root>/<stem>`.
pub fn suite(dir: &Path, opts: &RunOptions) -> Result<SuiteOutcome> {
    let mut configs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read suite directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "toml"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(Error::Config(format!("suite directory {} contains no .toml configs", dir.display())));
    }
    let root = opts.output.clone().unwrap_or_else(default_output_root);
    let mut rows = Vec::with_capacity(configs.len());
    for path in &configs {
        let name = config_name(path);
        let outcome = ExperimentConfig::load(path).and_then(|mut config| {
            apply_overrides(&mut config, opts)?;
            run_config(&name, config, &root.join(&name))
        });
        let row = match outcome {
            Ok(o) => SuiteRow {
                config: name,
                experiment: o.config.experiment.to_string(),
                status: if o.pass() { SuiteStatus::Pass } else { SuiteStatus::Fail },
                reports: o.reports.len(),
                failed: o.failing().iter().map(|r| r.check_name.clone()).collect(),
            },
            Err(e) => SuiteRow {
                config: name,
                experiment: String::new(),
                status: SuiteStatus::Error(e.to_string()),
                reports: 0,
                failed: Vec::new(),
            },
        };
        rows.push(row);
    }
    fs::create_dir_all(&root)?;
    let mut out = fs::File::create(root.join("summary.tsv"))?;
    writeln!(out, "config\texperiment\tstatus\treports\tfailed")?;
    for r in &rows {
        let status = match &r.status {
            SuiteStatus::Pass => "PASS".to_string(),
            SuiteStatus::Fail => "FAIL".to_string(),
            SuiteStatus::Error(m) => format!("ERROR: {}", m.replace(['\t', '\n'], " ")),
        };
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.config, r.experiment, status, r.reports, r.failed.join(","))?;
    }
    Ok(SuiteOutcome { rows, output_dir: root })
}

struct Artifacts {
    reports: Vec<CheckReport>,
    /// Extra plot-data files `(file name, contents)`.
    files: Vec<(String, Vec<u8>)>,
}

fn execute(config: &ExperimentConfig) -> Result<Artifacts> {
    let spec = &config.model;
    let seed = config.seed;
    let single = |r: Result<CheckReport>| r.map(|r| (vec![r], Vec::new()));
    let (reports, files) = match &config.parameters {
        Parameters::Simulate(p) => simulate(spec, p, seed)?,
        Parameters::Density(p) => density(spec, p)?,
        Parameters::Ondiag(p) => single(bound_checks::check_ondiag_upper(spec, p))?,
        Parameters::NearDiag(p) => single(bound_checks::check_near_diag_lower(spec, p))?,
        Parameters::Truncated(p) => single(bound_checks::check_truncated_offdiag(spec, p))?,
        Parameters::ExitTime(p) => single(bound_checks::check_exit_time(spec, p, seed))?,
        Parameters::Hit(p) => single(bound_checks::check_hit_bound(spec, p, seed))?,
        Parameters::Constrained(p) => single(bound_checks::check_constrained_lower(spec, p, seed))?,
        Parameters::Levy(p) => single(bound_checks::check_levy_system(spec, p, seed))?,
        Parameters::Spacetime(p) => single(bound_checks::check_spacetime_exit(spec, p, seed))?,
        Parameters::Holder(p) => single(bound_checks::estimate_holder(spec, p))?,
        Parameters::Converge(p) => {
            let (reports, table) = run_converge(spec, p, seed)?;
            let mut buf = Vec::new();
            table.write_tsv(&mut buf)?;
            (reports, vec![(format!("{}.tsv", table.name), buf)])
        }
    };
    Ok(Artifacts { reports, files })
}

fn lattice_site(x: &[f64], scale: u32) -> Result<LatticeSite> {
    let s = scale as f64;
    let coords = x
        .iter()
        .map(|&v| {
            let r = (v * s).round();
            if (v * s - r).abs() > 1e-9 * (v * s).abs().max(1.0) {
                Err(Error::OffLattice(x.to_vec(), s))
            } else {
                Ok(r as i64)
            }
        })
        .collect::<Result<Vec<i64>>>()?;
    Ok(LatticeSite::new(coords, scale))
}

fn start_site(spec: &ModelSpec, start: &Option<Vec<f64>>, scale: u32) -> Result<LatticeSite> {
    match start {
        None => Ok(LatticeSite::origin(spec.d, scale)),
        Some(x) if x.len() != spec.d => Err(Error::Config(format!(
            "start has {} coordinates but the model has d = {}",
            x.len(),
            spec.d
        ))),
        Some(x) => lattice_site(x, scale),
    }
}

type Output = (Vec<CheckReport>, Vec<(String, Vec<u8>)>);

fn simulate(spec: &ModelSpec, p: &SimulateParams, seed: u64) -> Result<Output> {
    if p.scale == 0 {
        return Err(Error::Config("simulate: scale must be a positive integer".into()));
    }
    let scale = if p.chain == ChainKind::Unit { 1 } else { p.scale };
    let x0 = start_site(spec, &p.start, scale)?;
    let sampler = JumpSampler::new(spec);
    let lambda = p.lambda.unwrap_or(f64::INFINITY);
    let paths: Vec<LatticePath> = run_paths(p.paths, seed, 0, |rng| match p.chain {
        ChainKind::Unit => sample_path_y(&x0, p.horizon, spec, &sampler, rng),
        ChainKind::Rescaled => sample_path_v_trunc(lambda, p.scale, &x0, p.horizon, spec, &sampler, rng),
        ChainKind::Form => sample_path_form(p.scale, &x0, p.horizon, spec, &sampler, rng),
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut b = Builder::new("simulate", spec, p);
    let n = paths.len().max(1) as f64;
    b.fit("mean_jumps", paths.iter().map(|q| q.len() as f64).sum::<f64>() / n, None, "sample mean");
    b.fit("mean_max_jump", paths.iter().map(|q| q.max_jump()).sum::<f64>() / n, None, "sample mean");
    let mut buf = Vec::new();
    write_paths_tsv(&mut buf, &paths)?;
    Ok((vec![b.finish_descriptive()], vec![("paths.tsv".into(), buf)]))
}

fn density(spec: &ModelSpec, p: &DensityParams) -> Result<Output> {
    let mut gp = GeneratorParams::new(p.scale, p.radius, p.mode, p.convention);
    if let Some(lambda) = p.lambda {
        gp = gp.truncated(lambda);
    }
    let g = build_generator(spec, &gp)?;
    let x0 = start_site(spec, &p.source, p.scale)?;
    let grids = heat_kernels(&g, &p.times, &x0)?;
    let mut b = Builder::new("density", spec, p);
    let mut files = Vec::new();
    for (i, grid) in grids.iter().enumerate() {
        b.fit(format!("mass(t={})", grid.t), grid.mass(), None, "window sum");
        let mut buf = Vec::new();
        grid.write_tsv(&mut buf)?;
        files.push((format!("density_{i}.tsv"), buf));
    }
    Ok((vec![b.finish_descriptive()], files))
}

fn write_artifacts(name: &str, config: &ExperimentConfig, a: &Artifacts, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved_config.toml"), config.to_toml()?)?;

    let mut ledger = OpenOptions::new().create(true).append(true).open(dir.join("ledger.jsonl"))?;
    for r in &a.reports {
        let record = LedgerRecord {
            config: name,
            experiment: config.experiment.to_string(),
            seed: config.seed,
            report: r,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(ledger, "{line}")?;
    }

    let mut summary = fs::File::create(dir.join("summary.tsv"))?;
    writeln!(summary, "check\tstatus\tfailed_gates")?;
    let mut timings = fs::File::create(dir.join("timings.tsv"))?;
    writeln!(timings, "check\tseconds")?;
    for r in &a.reports {
        let failed: Vec<&str> = r.gates.iter().filter(|g| !g.pass).map(|g| g.name.as_str()).collect();
        let status = if r.pass { "PASS" } else { "FAIL" };
        writeln!(summary, "{}\t{}\t{}", r.check_name, status, failed.join(","))?;
        writeln!(timings, "{}\t{:.3}", r.check_name, r.runtime_secs)?;
        for t in &r.tables {
            let file = if t.name == r.check_name {
                format!("{}.tsv", t.name)
            } else {
                format!("{}_{}.tsv", r.check_name, t.name)
            };
            let mut f = fs::File::create(dir.join(file))?;
            t.write_tsv(&mut f)?;
        }
    }
    for (file, bytes) in &a.files {
        fs::write(dir.join(file), bytes)?;
    }
    Ok(())
}
