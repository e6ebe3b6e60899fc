//! Acceptance criteria for the reference suite. Runs the shipped reference
//! configs once per worker count, checks each criterion against the ledger
//! records and plot data, and prints one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use axisjump::chain_sim::sample_path_v;
use axisjump::kernel_model::JumpSampler;
use axisjump::lattice_generator::{build_generator, heat_kernel, BoundaryMode, GeneratorParams, RateConvention};
use axisjump::runner::{suite, RunOptions, SuiteStatus};
use axisjump::{LatticeSite, ModelSpec, RngStream};
use serde_json::Value;

type Outcome = std::result::Result<String, String>;

struct Run {
    dir: PathBuf,
}

impl Run {
    fn records(&self, config: &str) -> Vec<Value> {
        let text = fs::read_to_string(self.dir.join(config).join("ledger.jsonl")).expect("ledger");
        text.lines().map(|l| serde_json::from_str(l).expect("json")).collect()
    }

    fn report(&self, config: &str, check: &str) -> Value {
        self.records(config)
            .into_iter()
            .map(|r| r["report"].clone())
            .find(|r| r["check_name"] == check)
            .unwrap_or_else(|| panic!("no {check} report in {config}"))
    }

    fn table(&self, config: &str, file: &str) -> Vec<BTreeMap<String, f64>> {
        let text = fs::read_to_string(self.dir.join(config).join(file)).expect("table");
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
        lines
            .map(|l| {
                header
                    .iter()
                    .zip(l.split('\t'))
                    .map(|(h, v)| (h.to_string(), v.parse().unwrap()))
                    .collect()
            })
            .collect()
    }

    fn seconds(&self, config: &str) -> f64 {
        let text = fs::read_to_string(self.dir.join(config).join("timings.tsv")).expect("timings");
        text.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap()).sum()
    }
}

fn fitted(report: &Value, name: &str) -> f64 {
    report["fitted"]
        .as_array()
        .unwrap()
        .iter()
        .find(|f| f["name"] == name)
        .and_then(|f| f["value"].as_f64())
        .unwrap_or_else(|| panic!("missing fitted value {name}"))
}

fn fitted_ci(report: &Value, name: &str) -> (f64, f64) {
    let f = report["fitted"].as_array().unwrap().iter().find(|f| f["name"] == name).unwrap();
    (f["ci"][0].as_f64().unwrap(), f["ci"][1].as_f64().unwrap())
}

fn gate(report: &Value, name: &str) -> bool {
    report["gates"]
        .as_array()
        .unwrap()
        .iter()
        .any(|g| g["name"] == name && g["pass"] == true)
}

fn ensure(cond: bool, msg: String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// `P(V_t = k/ρ)` along one axis for the α = 1, constant-c chain in dimension
/// `d`, by Fourier inversion of `Σ_{k≥1} (1 − cos kθ)/k² = πθ/2 − θ²/4`.
fn cauchy_lattice_prob(rho: f64, d: usize, t: f64, k: f64) -> f64 {
    let panels = 200_000;
    let h = PI / panels as f64;
    let f = |th: f64| {
        let psi = rho / d as f64 * 6.0 / (PI * PI) * (PI * th / 2.0 - th * th / 4.0);
        (k * th).cos() * (-t * psi).exp()
    };
    let mut s = f(0.0) + f(PI);
    for i in 1..panels {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0 / PI
}

fn criterion_1(run: &Run) -> Outcome {
    let mut detail = Vec::new();
    for (config, d, half) in [("01_ondiag_upper_d1", 1usize, 0.08), ("02_ondiag_upper_d2", 2, 0.16)] {
        let r = run.report(config, "ondiag_upper");
        let slope = fitted(&r, "slope");
        let target = -(d as f64);
        ensure((slope - target).abs() <= half, format!("d={d}: slope {slope:.4} outside {target} ± {half}"))?;
        let rows: Vec<_> = run.table(config, "ondiag_upper_ondiag.tsv").into_iter().filter(|r| r["rho"] == 8.0).collect();
        let mut lt = Vec::new();
        let mut lp = Vec::new();
        for row in &rows {
            let exact = (8.0 * cauchy_lattice_prob(8.0, d, row["t"], 0.0)).powi(d as i32);
            let rel = (row["p"] - exact).abs() / exact;
            ensure(rel < 2e-3, format!("d={d}, t={}: p {} vs Fourier {exact} (rel {rel:.2e})", row["t"], row["p"]))?;
            lt.push(row["t"].ln());
            lp.push(exact.ln());
        }
        let oracle_slope = least_squares_slope(&lt, &lp);
        ensure(
            (slope - oracle_slope).abs() < 0.01,
            format!("d={d}: slope {slope:.4} vs Fourier slope {oracle_slope:.4}"),
        )?;
        let secs = run.seconds(config);
        ensure(secs <= 300.0, format!("d={d}: runtime {secs:.1}s"))?;
        detail.push(format!("d={d} slope {slope:.3} (Fourier {oracle_slope:.3}, {secs:.1}s)"));
    }
    Ok(detail.join("; "))
}

fn criterion_2(run: &Run) -> Outcome {
    let config = "03_near_diag_lower";
    let r = run.report(config, "near_diag_lower");
    let rho = 8.0;
    let mut ms = Vec::new();
    for row in run.table(config, "near_diag_lower_near_diag.tsv") {
        let t = row["t"];
        // density is radially decreasing, so the minimum sits at the largest |y| < 2t
        let k = (2.0 * t * rho).ceil() - 1.0;
        let exact = rho * cauchy_lattice_prob(rho, 1, t, k) * t;
        let rel = (row["m"] - exact).abs() / exact;
        ensure(rel < 5e-3, format!("t={t}: m {} vs Fourier {exact} (rel {rel:.2e})", row["m"]))?;
        ms.push(row["m"]);
    }
    let min = ms.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = ms.iter().cloned().fold(0.0, f64::max);
    ensure(min >= 0.005, format!("min {min}"))?;
    ensure(max / min <= 4.0, format!("variation {}", max / min))?;
    ensure((fitted(&r, "m_min") - min).abs() < 1e-12, "ledger m_min disagrees with table".into())?;
    let secs = run.seconds(config);
    ensure(secs <= 300.0, format!("runtime {secs:.1}s"))?;
    Ok(format!("min p·t^(d/α) {min:.4}, variation {:.3}, {secs:.1}s", max / min))
}

fn criterion_3(run: &Run) -> Outcome {
    let config = "04_truncated_offdiag";
    let r = run.report(config, "truncated_offdiag");
    let decay = fitted(&r, "decay_slope");
    let contrast = fitted(&r, "contrast_loglog_slope");
    ensure(decay <= -0.425, format!("truncated log-slope {decay}"))?;
    ensure((contrast + 2.0).abs() <= 0.1, format!("contrast slope {contrast}"))?;
    let far = run.table(config, "truncated_offdiag_truncated_far_field.tsv");
    ensure(far.len() >= 3, "truncated far field too short".into())?;
    let secs = run.seconds(config);
    ensure(secs <= 300.0, format!("runtime {secs:.1}s"))?;
    Ok(format!("log-slope {decay:.3} per unit, contrast {contrast:.3}, {secs:.1}s"))
}

fn criterion_4(run: &Run) -> Outcome {
    let config = "05_exit_time";
    let r = run.report(config, "exit_time");
    let rows = run.table(config, "exit_time.tsv");
    let radii: Vec<f64> = rows.iter().map(|r| r["r"]).collect();
    let span = radii.iter().cloned().fold(0.0, f64::max) / radii.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(span >= 10.0 - 1e-9, format!("radii span {span}"))?;
    let lr: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let lm: Vec<f64> = rows.iter().map(|r| r["median"].ln()).collect();
    let slope = least_squares_slope(&lr, &lm);
    ensure((slope - 1.0).abs() <= 0.15, format!("median slope {slope}"))?;
    let weighted = fitted(&r, "median_slope");
    ensure((weighted - 1.0).abs() <= 0.15, format!("weighted median slope {weighted}"))?;
    let mut worst: f64 = 0.0;
    for row in &rows {
        let z = (row["mean"] - row["oracle_mean"]).abs() / row["mean_se"];
        worst = worst.max(z);
    }
    ensure(worst <= 3.0, format!("MC mean vs absorbing solve: {worst:.2} standard errors"))?;
    let paths = r["parameters"]["paths"].as_u64().unwrap();
    ensure(paths >= 100_000, format!("{paths} paths"))?;
    let secs = run.seconds(config);
    ensure(secs <= 600.0, format!("runtime {secs:.1}s"))?;
    Ok(format!("median slope {weighted:.3} (unweighted {slope:.3}), worst oracle deviation {worst:.2} SE, {secs:.1}s"))
}

fn criterion_5(run: &Run) -> Outcome {
    let config = "06_levy_system";
    let r = run.report(config, "levy_system");
    let n = r["parameters"]["functions"].as_array().unwrap().len();
    ensure(n >= 2, format!("{n} functions"))?;
    let mut detail = Vec::new();
    for i in 0..n {
        let lhs = fitted(&r, &format!("lhs[{i}]"));
        let rhs = fitted(&r, &format!("rhs[{i}]"));
        let rel = (lhs - rhs).abs() / rhs.abs();
        let (a, b) = (fitted_ci(&r, &format!("lhs[{i}]")), fitted_ci(&r, &format!("rhs[{i}]")));
        ensure(rel <= 0.05, format!("f{i}: relative difference {rel}"))?;
        ensure(a.0 <= b.1 && b.0 <= a.1, format!("f{i}: CIs {a:?} and {b:?} do not overlap"))?;
        detail.push(format!("f{i} rel {rel:.4}"));
    }
    let secs = run.seconds(config);
    ensure(secs <= 600.0, format!("runtime {secs:.1}s"))?;
    Ok(format!("{}, {secs:.1}s", detail.join(", ")))
}

fn criterion_6(run: &Run) -> Outcome {
    let r = run.report("07_converge_d1", "energy_identity");
    let mut worst: f64 = 0.0;
    let mut levels = 0;
    for f in r["fitted"].as_array().unwrap() {
        if f["name"].as_str().unwrap().starts_with("rel_err(") {
            worst = worst.max(f["value"].as_f64().unwrap());
            levels += 1;
        }
    }
    ensure(levels >= 4, format!("{levels} levels"))?;
    ensure(worst <= 1e-8, format!("relative error {worst:e}"))?;
    Ok(format!("{levels} levels, worst relative error {worst:.1e}"))
}

fn criterion_7(run: &Run) -> Outcome {
    let config = "07_converge_d1";
    let r = run.report(config, "resolvent_convergence");
    let e: Vec<f64> = [2, 4, 8, 16].iter().map(|n| fitted(&r, &format!("e(n={n})"))).collect();
    ensure(e.windows(2).all(|w| w[1] < w[0]), format!("gaps not strictly decreasing: {e:?}"))?;
    let ratio = e[3] / e[0];
    ensure(ratio <= 0.35, format!("final/first {ratio}"))?;
    ensure(gate(&r, "sup_contraction") && gate(&r, "l2_contraction"), "contraction bound violated".into())?;
    let secs = run.seconds(config);
    ensure(secs <= 600.0, format!("runtime {secs:.1}s"))?;
    Ok(format!("gaps {:.2e} .. {:.2e}, ratio {ratio:.3}", e[0], e[3]))
}

fn criterion_8(run: &Run) -> Outcome {
    let config = "08_semigroup_d2";
    let r = run.report(config, "semigroup_convergence");
    ensure(r["parameters"]["model"]["d"] == 2, "not a d=2 run".into())?;
    let t = r["parameters"]["t"].as_f64().unwrap();
    let tc = r["parameters"]["t_calibration"].as_f64().unwrap();
    ensure(t != tc, "calibration time equals evaluation time".into())?;
    let err = fitted(&r, "sup_rel_err(n=16)");
    ensure(err <= 0.10, format!("sup relative error {err}"))?;
    let lattice: Vec<f64> = [2, 4, 8, 16].iter().map(|n| fitted(&r, &format!("fdd_lattice_err(n={n})"))).collect();
    ensure(lattice.windows(2).all(|w| w[1] < w[0]), format!("fdd trend {lattice:?}"))?;
    ensure(gate(&r, "fdd_within_ci"), "fdd probabilities outside MC CI".into())?;
    let secs = run.seconds(config);
    ensure(secs <= 900.0, format!("runtime {secs:.1}s"))?;
    Ok(format!("sup error {:.2}% at n=16, fdd lattice error {:.2e} → {:.2e}", err * 100.0, lattice[0], lattice[3]))
}

fn criterion_9(run: &Run) -> Outcome {
    let r = run.report("07_converge_d1", "hypothesis");
    let mut ratios = Vec::new();
    for pair in 0..2 {
        let g: Vec<f64> = [8, 16, 32, 64].iter().map(|n| fitted(&r, &format!("gap[{pair}](n={n})"))).collect();
        for w in g.windows(2) {
            let q = w[1] / w[0];
            ensure((0.375..=0.625).contains(&q), format!("pair {pair}: gap ratio {q}"))?;
            ratios.push(q);
        }
    }
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(format!("gap ratios in [{lo:.3}, {hi:.3}]"))
}

fn criterion_10(run: &Run) -> Outcome {
    let config = "09_holder";
    let r = run.report(config, "holder");
    ensure(r["parameters"]["model"]["d"] == 1, "not the d=1 setup".into())?;
    let beta = fitted(&r, "beta");
    ensure(beta >= 0.1, format!("beta {beta}"))?;
    let row = run
        .table(config, "holder.tsv")
        .into_iter()
        .find(|row| (row["beta"] - beta).abs() < 1e-12)
        .ok_or("estimated beta missing from table")?;
    let ratio = row["m_fine"] / row["m_coarse"];
    ensure((0.5..=2.0).contains(&ratio), format!("refinement ratio {ratio}"))?;
    let secs = run.seconds(config);
    ensure(secs <= 600.0, format!("runtime {secs:.1}s"))?;
    Ok(format!("beta {beta:.2}, refinement ratio {ratio:.3}"))
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn compare_runs(a: &Path, b: &Path) -> std::result::Result<usize, String> {
    let fa = files(a);
    let fb = files(b);
    let rel = |root: &Path, v: &[PathBuf]| -> Vec<PathBuf> { v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect() };
    ensure(rel(a, &fa) == rel(b, &fb), "different file sets".into())?;
    let mut compared = 0;
    for (pa, pb) in fa.iter().zip(&fb) {
        let name = pa.file_name().unwrap().to_string_lossy();
        if name == "timings.tsv" {
            continue;
        }
        let (ta, tb) = (fs::read(pa).unwrap(), fs::read(pb).unwrap());
        if name == "resolved_config.toml" {
            // the echoed config records the worker count and nothing else may differ
            let strip = |t: &[u8]| -> Vec<String> {
                String::from_utf8_lossy(t).lines().filter(|l| !l.starts_with("workers =")).map(String::from).collect()
            };
            ensure(strip(&ta) == strip(&tb), format!("{} differs beyond workers", pa.display()))?;
        } else {
            ensure(ta == tb, format!("{} differs", pa.strip_prefix(a).unwrap().display()))?;
        }
        compared += 1;
    }
    Ok(compared)
}

fn histogram_check() -> Outcome {
    let spec = ModelSpec::constant(1, 1.0, 1.0).unwrap();
    let (rho, t, paths) = (4u32, 1.0, 1_000_000usize);
    let g = build_generator(&spec, &GeneratorParams::new(rho, 64.0, BoundaryMode::Killed, RateConvention::UnitRate))
        .map_err(|e| e.to_string())?;
    let origin = LatticeSite::origin(1, rho);
    let density = heat_kernel(&g, t, &origin).map_err(|e| e.to_string())?;
    let sampler = JumpSampler::new(&spec);
    let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
    for i in 0..paths {
        let mut rng = RngStream::child(2024, 0, i as u64).rng();
        let path = sample_path_v(rho, &origin, t, &spec, &sampler, &mut rng).map_err(|e| e.to_string())?;
        *counts.entry(path.coords_at(t)[0]).or_default() += 1;
    }
    let mu = 1.0 / rho as f64;
    let mut cells = 0;
    let mut worst: f64 = 0.0;
    for k in -64i64..=64 {
        let p = density.at(&[k]).unwrap() * mu;
        let expected = p * paths as f64;
        if expected < 100.0 {
            continue;
        }
        let observed = *counts.get(&k).unwrap_or(&0) as f64;
        let z = (observed - expected).abs() / (expected * (1.0 - p)).sqrt();
        worst = worst.max(z);
        cells += 1;
        ensure(z <= 4.0, format!("cell {k}: observed {observed}, expected {expected:.1} ({z:.2}σ)"))?;
    }
    ensure(cells >= 20, format!("only {cells} qualifying cells"))?;
    Ok(format!("{cells} cells, worst {worst:.2}σ"))
}

fn criterion_11(first: &Run, second: &Run) -> Outcome {
    let compared = compare_runs(&first.dir, &second.dir)?;
    let hist = histogram_check()?;
    Ok(format!("{compared} files byte-identical across workers 1/2; histogram {hist}"))
}

fn reference_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference")
}

fn run_suite(root: &Path, workers: usize) -> std::result::Result<Run, String> {
    let dir = root.join(format!("workers{workers}"));
    let opts = RunOptions { seed: None, workers: Some(workers), output: Some(dir.clone()) };
    let outcome = suite(&reference_dir(), &opts).map_err(|e| e.to_string())?;
    for row in &outcome.rows {
        if let SuiteStatus::Error(m) = &row.status {
            return Err(format!("{}: {m}", row.config));
        }
    }
    ensure(outcome.rows.len() == 10, format!("{} suite rows", outcome.rows.len()))?;
    Ok(Run { dir })
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (first, second) = match (run_suite(tmp.path(), 1), run_suite(tmp.path(), 2)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            println!("reference suite could not run: {e}");
            return ExitCode::FAILURE;
        }
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("on-diagonal decay", Box::new(|| criterion_1(&first))),
        ("near-diagonal lower bound", Box::new(|| criterion_2(&first))),
        ("truncated off-diagonal decay", Box::new(|| criterion_3(&first))),
        ("exit-time scaling", Box::new(|| criterion_4(&first))),
        ("jump compensator identity", Box::new(|| criterion_5(&first))),
        ("energy identity", Box::new(|| criterion_6(&first))),
        ("resolvent convergence", Box::new(|| criterion_7(&first))),
        ("semigroup and fdd convergence", Box::new(|| criterion_8(&first))),
        ("pair-sum hypothesis", Box::new(|| criterion_9(&first))),
        ("Hölder regularity", Box::new(|| criterion_10(&first))),
        ("reproducibility and histogram", Box::new(|| criterion_11(&first, &second))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(Ok(detail)) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Ok(Err(msg)) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {msg}", i + 1);
            }
            Err(_) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: panicked", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
