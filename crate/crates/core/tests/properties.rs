use std::fs;

use axisjump::chain_sim::{sample_path_v, sample_path_y};
use axisjump::config::ExperimentConfig;
use axisjump::convergence_lab::{extend, restrict, TestFunction};
use axisjump::kernel_model::{
    conductance, jump_distribution, rescaled_conductance, total_conductance, JumpSampler,
};
use axisjump::lattice_generator::{
    build_generator, heat_kernel, resolvent, semigroup_apply, BoundaryMode, GeneratorParams, GridFunction,
    RateConvention, Window,
};
use axisjump::runner::{run, RunOptions};
use axisjump::stable_oracle::{stable_1d_density, stable_1d_density_quadrature};
use axisjump::{AxisJump, LatticeSite, ModelSpec, RngStream};
use proptest::prelude::*;

fn model() -> impl Strategy<Value = ModelSpec> {
    (1usize..=2, 0.3f64..1.9, 0.5f64..2.0, 1.0f64..3.0, 0u8..3).prop_map(|(d, alpha, k1, spread, kind)| {
        let k2 = k1 * spread;
        match kind {
            0 => ModelSpec::constant(d, alpha, k1).unwrap(),
            1 => ModelSpec::checkerboard(d, alpha, k1, k2).unwrap(),
            _ => ModelSpec::smooth_oscillating(d, alpha, k1, k2).unwrap(),
        }
    })
}

fn site(d: usize) -> impl Strategy<Value = Vec<i64>> {
    prop::collection::vec(-50i64..50, d)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn conductance_symmetric_bounded_and_axis_only(
        spec in model(),
        x in site(2),
        axis in 0usize..2,
        steps in prop::sample::select(vec![-40i64, -7, -2, -1, 1, 3, 9, 33]),
        off in 1i64..5,
    ) {
        let d = spec.d;
        let axis = axis % d;
        let x = LatticeSite::new(x[..d].to_vec(), 1);
        let y = x.shifted(AxisJump::new(axis, steps).unwrap());
        let cxy = conductance(&x, &y, &spec).unwrap();
        let cyx = conductance(&y, &x, &spec).unwrap();
        prop_assert_eq!(cxy, cyx);
        let k = steps.unsigned_abs() as f64;
        let (lo, hi) = (spec.kappa1 * k.powf(-1.0 - spec.alpha), spec.kappa2 * k.powf(-1.0 - spec.alpha));
        prop_assert!(cxy >= lo * (1.0 - 1e-12) && cxy <= hi * (1.0 + 1e-12), "{cxy} not in [{lo}, {hi}]");
        if d == 2 {
            let mut z = y.coords.clone();
            z[1 - axis] += off;
            let z = LatticeSite::new(z, 1);
            prop_assert_eq!(conductance(&x, &z, &spec).unwrap(), 0.0);
        }
    }

    #[test]
    fn jump_law_tail_matches_integral_bounds(spec in model(), x in site(2)) {
        let d = spec.d;
        let x = LatticeSite::new(x[..d].to_vec(), 1);
        let g = total_conductance(&x, &spec, 1e-12);
        let cutoff = 400u64;
        let tail = jump_distribution(&x, &spec).tail_mass(cutoff);
        // Σ_{k>K} k^{-s} lies between the integrals from K+1 and from K
        let a = spec.alpha;
        let lower = 2.0 * d as f64 * spec.kappa1 * ((cutoff + 1) as f64).powf(-a) / a / g;
        let upper = 2.0 * d as f64 * spec.kappa2 * (cutoff as f64).powf(-a) / a / g;
        prop_assert!(tail >= lower * (1.0 - 1e-6) - 1e-12 && tail <= upper * (1.0 + 1e-6) + 1e-12,
            "tail {tail} outside [{lower}, {upper}]");
    }

    #[test]
    fn rescaled_conductance_sums_to_scaled_total(spec in model(), rho in 1u32..5, x in site(2)) {
        let d = spec.d;
        let base = LatticeSite::new(x[..d].iter().map(|c| c * rho as i64).collect(), 1);
        let xr: Vec<f64> = x[..d].iter().map(|&c| c as f64).collect();
        let cutoff = 300i64;
        let mut sum = 0.0;
        for axis in 0..d {
            for k in (-cutoff..=cutoff).filter(|&k| k != 0) {
                let mut y = xr.clone();
                y[axis] += k as f64 / rho as f64;
                sum += rescaled_conductance(&xr, &y, rho as f64, &spec).unwrap();
            }
        }
        let r = rho as f64;
        let full = r.powf(spec.alpha - d as f64) * total_conductance(&base, &spec, 1e-12);
        let tail_bound = r.powf(spec.alpha - d as f64) * 2.0 * d as f64 * spec.kappa2
            * (cutoff as f64).powf(-spec.alpha) / spec.alpha;
        prop_assert!(sum <= full * (1.0 + 1e-9));
        prop_assert!(full - sum <= tail_bound * (1.0 + 1e-9), "gap {} > {tail_bound}", full - sum);
    }

    #[test]
    fn rescaled_chain_is_time_changed_unit_chain(spec in model(), rho in 1u32..6, seed in any::<u64>()) {
        let sampler = JumpSampler::new(&spec);
        let horizon = 0.5;
        let v = sample_path_v(rho, &LatticeSite::origin(spec.d, rho), horizon, &spec, &sampler,
            &mut RngStream::new(seed, 0).rng()).unwrap();
        let tf = (rho as f64).powf(spec.alpha);
        let y = sample_path_y(&LatticeSite::origin(spec.d, 1), horizon * tf, &spec, &sampler,
            &mut RngStream::new(seed, 0).rng()).unwrap();
        prop_assert_eq!(v.len(), y.len());
        for i in 0..v.len() {
            prop_assert_eq!(v.event_coords(i), y.event_coords(i));
            let (tv, ty) = (v.times()[i], y.times()[i] / tf);
            prop_assert!((tv - ty.min(horizon)).abs() <= 1e-12 * ty.max(1.0));
        }
        let again = sample_path_v(rho, &LatticeSite::origin(spec.d, rho), horizon, &spec, &sampler,
            &mut RngStream::new(seed, 0).rng()).unwrap();
        prop_assert_eq!(again.times(), v.times());
    }

    #[test]
    fn extension_of_restriction_is_identity_on_grid(
        cx in -1.0f64..1.0,
        radius in 0.3f64..2.0,
        n in prop::sample::select(vec![1u32, 2, 4, 8]),
        probes in prop::collection::vec(-12i64..12, 1..10),
    ) {
        let f = TestFunction::bump(vec![cx], radius);
        let w = Window::from_radius(1, n, 3.0);
        let u = restrict(&f, w);
        let e = extend(&u);
        for k in probes {
            let x = [k as f64 / n as f64];
            if w.contains(&[k]) {
                prop_assert_eq!(e.eval(&x).unwrap(), f.eval(&x));
            }
        }
    }

    #[test]
    fn resolvent_contracts(
        values in prop::collection::vec(-1.0f64..1.0, 33),
        lambda in 0.2f64..4.0,
        alpha in 0.5f64..1.8,
    ) {
        let spec = ModelSpec::checkerboard(1, alpha, 1.0, 2.0).unwrap();
        let g = build_generator(&spec, &GeneratorParams::new(4, 4.0, BoundaryMode::Restricted, RateConvention::FormRate)).unwrap();
        let f = GridFunction::new(g.window, values).unwrap();
        let (u, _) = resolvent(&g, lambda, &f).unwrap();
        prop_assert!(u.sup() <= f.sup() / lambda * (1.0 + 1e-9) + 1e-12);
        prop_assert!(lambda * u.norm2() <= f.norm2() * (1.0 + 1e-9) + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn semigroup_property_and_killed_sandwich(
        t in 0.1f64..1.5,
        s in 0.1f64..1.5,
        alpha in 0.5f64..1.8,
        checker in any::<bool>(),
        f in prop::collection::vec(-1.0f64..1.0, 49),
    ) {
        let spec = if checker {
            ModelSpec::checkerboard(1, alpha, 1.0, 2.0).unwrap()
        } else {
            ModelSpec::constant(1, alpha, 1.0).unwrap()
        };
        let gp = |mode| GeneratorParams::new(4, 6.0, mode, RateConvention::UnitRate);
        let g = build_generator(&spec, &gp(BoundaryMode::Killed)).unwrap();
        let x0 = LatticeSite::origin(1, 4);
        let direct = heat_kernel(&g, t + s, &x0).unwrap();
        let mu = g.window.site_measure();
        let lhs: f64 = direct.values.iter().zip(&f).map(|(p, v)| p * mu * v).sum();
        let inner = semigroup_apply(&g, s, &f).unwrap();
        let outer = semigroup_apply(&g, t, &inner).unwrap();
        let rhs = outer[g.window.index(&x0.coords).unwrap()];
        prop_assert!((lhs - rhs).abs() <= 1e-8, "{lhs} vs {rhs}");

        let restricted = build_generator(&spec, &gp(BoundaryMode::Restricted)).unwrap();
        let open = heat_kernel(&restricted, t, &x0).unwrap();
        let killed = heat_kernel(&g, t, &x0).unwrap();
        for (k, r) in killed.values.iter().zip(&open.values) {
            prop_assert!(*k <= r + 1e-12, "killed {k} > restricted {r}");
        }
    }

    #[test]
    fn cauchy_closed_form_matches_quadrature(x in -50.0f64..50.0, tau in 0.1f64..10.0) {
        let a = stable_1d_density(1.0, tau, x).unwrap();
        let b = stable_1d_density_quadrature(1.0, tau, x).unwrap();
        prop_assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }

    #[test]
    fn unknown_parameter_keys_are_rejected(key in "[a-z]{3,10}_x") {
        let text = format!(
            "experiment = \"check:exit_time\"\n[model]\nd = 1\nalpha = 1.0\nkappa1 = 1.0\nkappa2 = 1.0\nsymbol = {{ name = \"constant\" }}\n[parameters]\n{key} = 1\n"
        );
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        prop_assert!(err.contains(&key), "{err}");
    }
}

#[test]
fn runs_write_only_inside_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.toml");
    fs::write(
        &cfg,
        "experiment = \"simulate\"\nseed = 5\n[model]\nd = 2\nalpha = 1.2\nkappa1 = 1.0\nkappa2 = 2.0\nsymbol = { name = \"checkerboard\" }\n[parameters]\npaths = 8\n",
    )
    .unwrap();
    let out = tmp.path().join("nested").join("out");
    let outcome = run(&cfg, &RunOptions { output: Some(out.clone()), ..Default::default() }).unwrap();
    assert_eq!(outcome.status(), 0);
    let mut top: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, vec!["nested", "sim.toml"]);
    let nested: Vec<_> = fs::read_dir(tmp.path().join("nested")).unwrap().collect();
    assert_eq!(nested.len(), 1);
    assert!(out.join("ledger.jsonl").exists());
}

#[test]
fn same_seed_gives_identical_ledger_records() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exit.toml");
    fs::write(
        &cfg,
        "experiment = \"check:exit_time\"\nseed = 21\n[model]\nd = 1\nalpha = 1.0\nkappa1 = 1.0\nkappa2 = 1.0\nsymbol = { name = \"constant\" }\n[parameters]\nrho = 4\npaths = 2000\nradii = [1.0, 2.0]\n",
    )
    .unwrap();
    let read = |dir: &str, workers: usize| {
        let out = tmp.path().join(dir);
        run(&cfg, &RunOptions { workers: Some(workers), output: Some(out.clone()), ..Default::default() }).unwrap();
        fs::read(out.join("ledger.jsonl")).unwrap()
    };
    let a = read("a", 1);
    assert_eq!(a, read("b", 1));
    assert_eq!(a, read("c", 3));
}
