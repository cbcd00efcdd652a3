//! Acceptance suite. Runs every criterion in sequence (the timing checks
//! must not share the machine with other work), prints one PASS/FAIL line
//! per criterion and exits non-zero if any criterion failed.
//!
//! Tolerances are fixed here and never adjusted to fit a result:
//! "approximately equal" means mean final accuracies within 2 percentage
//! points, "strictly lower/higher" means a gap of at least 1 point, and a
//! non-increasing series may rise by at most 0.5 points between neighbours.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbar_cli::config::{BackendKind, EngineConfig};
use xbar_cli::oracle::{oracle_check, OracleCheckOptions};
use xbar_cli::run::{load_data, run_experiment, sweep_outcomes, SweepPoint, SweepSpec};
use xbar_cli::ExperimentConfig;
use xbar_core::circuit::{aam_convert, fcm_convert, AamPaths, ConductanceTile, CrossbarConfig, FcmOptions};
use xbar_core::mapping::{map_weights, MappingSpec};
use xbar_core::nn::{Backend, Dense, DigitalSettings, Layer, Model, Precision};
use xbar_core::update::{apply_update, nonlinear_update, write_noise, UpdateKey, UpdateSpec};

const SAME_PP: f64 = 2.0;
const GAP_PP: f64 = 1.0;
const MONOTONE_SLACK_PP: f64 = 0.5;
const SWEEP_SEEDS: usize = 5;
const INTERP_SEEDS: usize = 3;

fn toy() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_mlp.toml");
    ExperimentConfig::load(&path).expect("toy config")
}

fn random_tile(cfg: CrossbarConfig, n: usize, rng: &mut ChaCha8Rng) -> ConductanceTile {
    let g = Array2::from_shape_fn((n, n), |_| rng.random_range(cfg.g_min..=cfg.g_max));
    ConductanceTile::new(CrossbarConfig { rows: n, cols: n, ..cfg }, g).unwrap()
}

fn full_drive(t: &ConductanceTile) -> Array1<f64> {
    Array1::from_elem(t.rows(), t.config().v_fs)
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c1_oracle_equivalence() -> Result<String> {
    let start = Instant::now();
    let opts = OracleCheckOptions {
        trials: 100,
        sizes: vec![8, 16, 64],
        tol: 1e-3,
        fcm: FcmOptions::default(),
        aam: AamPaths::default(),
        seed: 11,
    };
    let report = oracle_check(&CrossbarConfig::default(), &opts)?;
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("FCM max rel error {:.2e} over {} tiles in {secs:.1} s", report.fcm_max(), report.trials.len());
    ensure!(report.passed(), "{msg} (limit 1e-3)");
    ensure!(secs < 60.0, "{msg} (limit 60 s)");
    Ok(msg)
}

fn c2_zero_parasitic_identity() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = CrossbarConfig::default().without_parasitics();
    for k in 0..20 {
        let n = [1, 2, 5, 8, 16, 64][k % 6];
        let tile = random_tile(cfg, n, &mut rng);
        let f = fcm_convert(&tile, full_drive(&tile).view(), FcmOptions::default())?;
        ensure!(f.g() == tile.g(), "FCM changed tile {k} ({n}x{n})");
        ensure!(aam_convert(&tile).g() == tile.g(), "AAM changed tile {k} ({n}x{n})");
    }
    Ok("20 tiles returned unchanged by FCM and AAM".into())
}

fn aam_max_error(cfg: CrossbarConfig, tiles: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..tiles {
        let tile = random_tile(cfg, 64, &mut rng);
        let f = fcm_convert(&tile, full_drive(&tile).view(), FcmOptions::default())?;
        let a = aam_convert(&tile);
        for (x, y) in a.g().iter().zip(f.g()) {
            worst = worst.max((x - y).abs() / y);
        }
    }
    Ok(worst)
}

fn c3_aam_regime() -> Result<String> {
    let nominal = CrossbarConfig::default();
    let low = CrossbarConfig { g_min: nominal.g_min * 100.0, g_max: nominal.g_max * 100.0, ..nominal };
    let e_nominal = aam_max_error(nominal, 5, 13)?;
    let e_low = aam_max_error(low, 5, 13)?;
    let msg = format!("max error {:.3}% at 100k-1M, {:.1}% at 1k-10k", pct(e_nominal), pct(e_low));
    ensure!(e_nominal <= 0.02, "{msg} (limit 2%)");
    ensure!(e_low > 0.10, "{msg} (need > 10%)");
    Ok(msg)
}

fn c4_update_properties() -> Result<String> {
    let cfg = CrossbarConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let g = rng.random_range(cfg.g_min..=cfg.g_max);
        let dg = rng.random_range(-cfg.g_range()..cfg.g_range());
        worst = worst.max((nonlinear_update(g, dg, 0.0, &cfg)? - dg).abs());
    }
    ensure!(worst <= 1e-12, "v=0 deviates from identity by {worst:e}");

    let (gamma, dg) = (5.0, 3e-7);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| write_noise(dg, gamma, &cfg, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sigma = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let want = gamma * (cfg.g_range() * dg).sqrt();
    let rel = (sigma / want - 1.0).abs();
    ensure!(rel <= 0.02, "noise sigma off by {:.2}%", pct(rel));

    let spec = MappingSpec { tile_rows: 8, tile_cols: 8, ..MappingSpec::default() };
    let w = Array2::from_shape_fn((12, 10), |_| rng.random_range(-1.0..1.0));
    let mut t = map_weights(w.view(), &spec, &cfg)?;
    let update = UpdateSpec { v: 2.0, gamma: 3.0, lr: 0.5, seed: 1, layer_scale: None };
    for it in 0..10_000u64 {
        let dw = Array2::from_shape_fn((12, 10), |_| rng.random_range(-2.0..2.0));
        apply_update(&mut t, dw.view(), &update, UpdateKey { iteration: it, layer: 0 })?;
    }
    let (gp, gn) = t.g_ideal_master();
    let on_rails = |g: &f64| *g >= cfg.g_min && *g <= cfg.g_max;
    ensure!(gp.iter().chain(gn.iter()).all(on_rails), "master conductance left [g_min, g_max]");
    ensure!(t.tiles().iter().all(|tile| tile.is_ideal()), "tile conductance left [g_min, g_max]");
    Ok(format!("identity error {worst:.1e}, noise sigma within {:.2}%, rails held over 10^4 updates", pct(rel)))
}

fn c5_degenerate_equivalence() -> Result<String> {
    let mut cfg = toy();
    cfg.epochs = 5;
    cfg.crossbar = cfg.crossbar.without_parasitics();
    cfg.adc = None;
    cfg.engine = EngineConfig::Ideal;
    cfg.update.v = 0.0;
    cfg.update.gamma = 0.0;
    cfg.mapping.variation_sigma = 0.0;
    cfg.validate()?;
    let data = load_data(&cfg.dataset)?;
    let crossbar = run_experiment(&cfg, &data, |_| {})?;
    let digital = run_experiment(&ExperimentConfig { backend: BackendKind::Digital, ..cfg }, &data, |_| {})?;
    let bits = |o: &xbar_cli::run::RunOutcome| o.epochs.iter().map(|m| m.train_loss.to_bits()).collect::<Vec<_>>();
    ensure!(bits(&crossbar) == bits(&digital), "loss sequences differ");
    let accs = |o: &xbar_cli::run::RunOutcome| o.epochs.iter().map(|m| m.test_accuracy).collect::<Vec<_>>();
    ensure!(accs(&crossbar) == accs(&digital), "accuracy sequences differ");
    Ok(format!("5 epoch losses bit-identical (final {:.6})", crossbar.final_loss))
}

fn c6_gradient_check() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let backend = Backend::Digital(DigitalSettings {
        weight_bits: 48,
        precision: Precision::default(),
        lr: 0.1,
        wmax: None,
        grad_scale: None,
    });
    let (inputs, outputs, batch) = (6, 4, 5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let w = Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((batch, inputs), |_| rng.random_range(-1.0..1.0)).into_dyn();
        let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..outputs)).collect();
        let model = |w: &Array2<f64>| -> Result<Model> {
            Ok(Model::from_layers(vec![Layer::Dense(Dense::new(w.view(), None, &backend)?)], &[inputs]))
        };
        let (_, grads) = model(&w)?.loss_and_grads(x.clone(), &y)?;
        let dw = &grads[0].as_ref().expect("dense gradient").dw;
        let h = 1e-5;
        let mut fd = Array2::zeros((inputs, outputs));
        for ((i, j), f) in fd.indexed_iter_mut() {
            let mut wp = w.clone();
            wp[[i, j]] += h;
            let mut wm = w.clone();
            wm[[i, j]] -= h;
            let lp = model(&wp)?.loss_and_grads(x.clone(), &y)?.0;
            let lm = model(&wm)?.loss_and_grads(x.clone(), &y)?.0;
            *f = (lp - lm) / (2.0 * h);
        }
        let diff = (dw - &fd).mapv(|d| d * d).sum().sqrt();
        let norm = fd.mapv(|d| d * d).sum().sqrt();
        worst = worst.max(diff / norm);
    }
    ensure!(worst <= 1e-3, "relative error {worst:.2e} (limit 1e-3)");
    Ok(format!("worst relative error {worst:.2e} over 20 layers"))
}

fn sweep(cfg: &ExperimentConfig, paths: &[&str], values: &[&str]) -> Result<Vec<SweepPoint>> {
    let spec = SweepSpec {
        paths: paths.iter().map(|p| p.to_string()).collect(),
        values: values.iter().map(|v| v.to_string()).collect(),
        seeds: SWEEP_SEEDS,
    };
    sweep_outcomes(cfg, &spec)
}

fn accs(points: &[SweepPoint]) -> Vec<f64> {
    points.iter().map(|p| pct(p.mean_accuracy())).collect()
}

fn fmt(values: &[&str], accs: &[f64]) -> String {
    values.iter().zip(accs).map(|(v, a)| format!("{v}:{a:.2}")).collect::<Vec<_>>().join(" ")
}

fn c7_sensitivity() -> Result<String> {
    let cfg = toy();
    let mut notes = Vec::new();
    let mut failures = Vec::new();

    let vs = ["0.01", "0.1", "0.5", "1"];
    let p = sweep(&cfg, &["update.v"], &vs)?;
    let a = accs(&p);
    let v1_flagged = p[3].runs.iter().all(|r| !r.converged);
    notes.push(format!("v {} (v=1 non-converged in {}/{} seeds)", fmt(&vs, &a), p[3].runs.iter().filter(|r| !r.converged).count(), SWEEP_SEEDS));
    if (a[0] - a[1]).abs() > SAME_PP {
        failures.push("acc(v=0.01) !~ acc(v=0.1)");
    }
    if a[1] - a[2] < GAP_PP || a[0] - a[2] < GAP_PP {
        failures.push("acc(v=0.5) not strictly lower");
    }
    if !v1_flagged {
        failures.push("v=1 not flagged non-converged");
    }

    let gs = ["1", "5", "10"];
    let a = accs(&sweep(&cfg, &["update.gamma"], &gs)?);
    notes.push(format!("gamma {}", fmt(&gs, &a)));
    if (a[0] - a[1]).abs() > SAME_PP {
        failures.push("acc(gamma=1) !~ acc(gamma=5)");
    }
    if a[1] - a[2] < GAP_PP || a[0] - a[2] < GAP_PP {
        failures.push("acc(gamma=10) not strictly lower");
    }

    let ds = ["16", "32", "64"];
    let dims = ["crossbar.rows", "crossbar.cols", "mapping.tile_rows", "mapping.tile_cols"];
    let a = accs(&sweep(&cfg, &dims, &ds)?);
    notes.push(format!("dims {}", fmt(&ds, &a)));
    if a.windows(2).any(|w| w[1] > w[0] + MONOTONE_SLACK_PP) {
        failures.push("accuracy increases with crossbar size");
    }

    // g_min stays at 1 uS; the ratio is g_max / g_min
    let gmax = ["0.03", "0.01", "3e-5", "1.6e-6"];
    let a = accs(&sweep(&cfg, &["crossbar.g_max"], &gmax)?);
    notes.push(format!("g_max {}", fmt(&gmax, &a)));
    let ends = a[0].max(a[a.len() - 1]);
    let inner = a[1..a.len() - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if inner - ends < GAP_PP {
        failures.push("no interior on-off maximum");
    }

    let msg = notes.join("; ");
    ensure!(failures.is_empty(), "{}: {msg}", failures.join(", "));
    Ok(msg)
}

fn interp_runs(interval: usize) -> Result<(f64, Duration)> {
    let mut accuracy = 0.0;
    let mut regen = Duration::ZERO;
    for k in 0..INTERP_SEEDS as u64 {
        let mut cfg = toy();
        cfg.engine = EngineConfig::InterpFcm { interval, tol: 1e-6, max_iter: 1000 };
        cfg.seed += k;
        cfg.update.seed += k;
        let data = load_data(&cfg.dataset)?;
        let o = run_experiment(&cfg, &data, |_| {})?;
        accuracy += o.final_accuracy / INTERP_SEEDS as f64;
        regen += o.epochs.iter().map(|m| Duration::from_secs_f64(m.regen_time)).sum::<Duration>();
    }
    Ok((pct(accuracy), regen))
}

fn c8_interpolated_fcm() -> Result<String> {
    let (acc1, t1) = interp_runs(1)?;
    let (acc10, t10) = interp_runs(10)?;
    let speedup = t1.as_secs_f64() / t10.as_secs_f64();
    let msg = format!(
        "acc L=1 {acc1:.2}% L=10 {acc10:.2}%, regeneration {:.2} s vs {:.2} s ({speedup:.1}x)",
        t1.as_secs_f64(),
        t10.as_secs_f64()
    );
    ensure!((acc1 - acc10).abs() <= 1.0, "{msg} (accuracy gap limit 1 pp)");
    ensure!(speedup >= 5.0, "{msg} (speedup limit 5x)");
    Ok(msg)
}

fn epoch_median(cfg: &ExperimentConfig) -> Result<f64> {
    let data = load_data(&cfg.dataset)?;
    let o = run_experiment(cfg, &data, |_| {})?;
    // the first epoch also holds the initial ADC calibration
    Ok(median(o.epochs[1..].iter().map(|m| m.wall_time).collect()))
}

fn c9_performance() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (mut t_fcm, mut t_aam) = (Vec::new(), Vec::new());
    for _ in 0..15 {
        let tile = random_tile(CrossbarConfig::default(), 64, &mut rng);
        let v = full_drive(&tile);
        let t = Instant::now();
        fcm_convert(&tile, v.view(), FcmOptions::default())?;
        t_fcm.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        aam_convert(&tile);
        t_aam.push(t.elapsed().as_secs_f64());
    }
    let tile_ratio = median(t_fcm) / median(t_aam);

    let mut cfg = toy();
    cfg.epochs = 7;
    let crossbar = epoch_median(&cfg)?;
    let digital = epoch_median(&ExperimentConfig { backend: BackendKind::Digital, ..cfg })?;
    let epoch_ratio = crossbar / digital;
    let msg = format!(
        "AAM {tile_ratio:.0}x faster than FCM per 64x64 tile; epoch {:.1} ms vs digital {:.1} ms ({epoch_ratio:.1}x)",
        crossbar * 1e3,
        digital * 1e3
    );
    ensure!(tile_ratio >= 10.0, "{msg} (need >= 10x)");
    ensure!(epoch_ratio <= 20.0, "{msg} (limit 20x)");
    Ok(msg)
}

fn main() {
    let criteria: [(&str, fn() -> Result<String>); 9] = [
        ("oracle equivalence", c1_oracle_equivalence),
        ("zero-parasitic identity", c2_zero_parasitic_identity),
        ("AAM regime fidelity", c3_aam_regime),
        ("update-model properties", c4_update_properties),
        ("degenerate training equivalence", c5_degenerate_equivalence),
        ("gradient check", c6_gradient_check),
        ("sensitivity orderings", c7_sensitivity),
        ("interpolated FCM fidelity", c8_interpolated_fcm),
        ("performance sanity", c9_performance),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (tag, detail) = match check() {
            Ok(msg) => ("PASS", msg),
            Err(e) => {
                failed += 1;
                ("FAIL", format!("{e:#}"))
            }
        };
        println!("{tag} {} {name}: {detail} [{:.1} s]", i + 1, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed in {:.0} s", criteria.len() - failed, criteria.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
