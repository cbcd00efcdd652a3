use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbar_core::circuit::CrossbarConfig;
use xbar_core::mapping::{map_weights, MappingSpec};
use xbar_core::update::{apply_update, nonlinear_update, write_noise, UpdateKey, UpdateSpec};

fn cfg() -> CrossbarConfig {
    CrossbarConfig::default()
}

proptest! {
    #[test]
    fn linear_device_writes_the_ideal_change(x in 0.0f64..=1.0, frac in -1.0f64..1.0) {
        let c = cfg();
        let g = c.g_min + x * c.g_range();
        let dg = frac * c.g_range();
        prop_assert!((nonlinear_update(g, dg, 0.0, &c).unwrap() - dg).abs() <= 1e-12);
    }

    #[test]
    fn nonlinearity_only_attenuates(x in 0.0f64..=1.0, frac in -1.0f64..1.0, v in 0.0f64..8.0) {
        let c = cfg();
        let g = c.g_min + x * c.g_range();
        let dg = frac * c.g_range();
        let w = nonlinear_update(g, dg, v, &c).unwrap();
        prop_assert!(w.abs() <= dg.abs());
        prop_assert!(w * dg >= 0.0);
    }

    #[test]
    fn updates_keep_devices_on_rails(seed in 0u64..500, v in 0.0f64..3.0, gamma in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg();
        let spec = MappingSpec { tile_rows: 4, tile_cols: 4, ..MappingSpec::default() };
        let w = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let mut t = map_weights(w.view(), &spec, &c).unwrap();
        let update = UpdateSpec { v, gamma, lr: 1.0, seed, layer_scale: None };
        for it in 0..50 {
            let dw = Array2::from_shape_fn((5, 3), |_| rng.random_range(-3.0..3.0));
            apply_update(&mut t, dw.view(), &update, UpdateKey { iteration: it, layer: 0 }).unwrap();
        }
        let (p, n) = t.master_states();
        prop_assert!(p.iter().chain(n.iter()).all(|s| (0.0..=1.0).contains(s)));
        prop_assert!(t.tiles().iter().all(|tile| tile.is_ideal()));
    }
}

#[test]
fn noise_scales_with_square_root_of_change() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let sigma = |dg: f64, rng: &mut ChaCha8Rng| {
        let n = 40_000;
        (0..n).map(|_| write_noise(dg, 2.0, &c, rng).powi(2)).sum::<f64>().sqrt() / (n as f64).sqrt()
    };
    let ratio = sigma(4e-8, &mut rng) / sigma(1e-8, &mut rng);
    assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    assert_eq!(write_noise(1e-6, 0.0, &c, &mut rng), 0.0);
    assert_eq!(write_noise(0.0, 3.0, &c, &mut rng), 0.0);
}

#[test]
fn same_key_same_noise() {
    let c = cfg();
    let spec = MappingSpec { tile_rows: 4, tile_cols: 4, ..MappingSpec::default() };
    let w = Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 - j as f64) / 4.0);
    let dw = Array2::from_elem((4, 4), 0.01);
    let update = UpdateSpec { v: 1.0, gamma: 5.0, lr: 1.0, seed: 9, layer_scale: None };
    let run = |key: UpdateKey| {
        let mut t = map_weights(w.view(), &spec, &c).unwrap();
        apply_update(&mut t, dw.view(), &update, key).unwrap();
        t.master_weights()
    };
    let k = UpdateKey { iteration: 3, layer: 1 };
    assert_eq!(run(k), run(k));
    assert_ne!(run(k), run(UpdateKey { iteration: 4, layer: 1 }));
}
