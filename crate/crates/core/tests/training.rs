use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbar_core::circuit::{CrossbarConfig, FcmOptions};
use xbar_core::converters::{AdcSpec, DacSpec};
use xbar_core::mapping::MappingSpec;
use xbar_core::nn::*;
use xbar_core::update::UpdateSpec;

fn data() -> (Dataset, Dataset) {
    let spec = BlobSpec { classes: 3, dim: 6, separation: 1.0, spread: 0.4, seed: 5 };
    (blobs(&spec, 30, 0).unwrap(), blobs(&spec, 30, 1).unwrap())
}

fn settings(engine: Engine) -> CrossbarSettings {
    CrossbarSettings {
        crossbar: CrossbarConfig { rows: 8, cols: 8, ..Default::default() },
        mapping: MappingSpec { tile_rows: 8, tile_cols: 8, wmax: Some(2.0), ..MappingSpec::default() },
        dac: DacSpec::linear(2, 1.0),
        adc: Some(AdcSpec::linear(6, 1e-4)),
        precision: Precision { input_bits: 8, error_bits: 8 },
        engine,
        update: UpdateSpec { v: 0.5, gamma: 1.0, lr: 0.02, seed: 4, layer_scale: Some(0.05) },
    }
}

fn ideal(mut s: CrossbarSettings) -> CrossbarSettings {
    s.crossbar = s.crossbar.without_parasitics();
    s.engine = Engine::Ideal;
    s.adc = None;
    s.update.v = 0.0;
    s.update.gamma = 0.0;
    s
}

fn train(backend: &Backend, epochs: usize) -> Vec<EpochMetrics> {
    let (tr, te) = data();
    let layers = [LayerSpec::Dense { outputs: 10, bias: true }, LayerSpec::Relu, LayerSpec::Dense { outputs: 3, bias: true }];
    let model = Model::build(&layers, &[6], backend, 7).unwrap();
    let mut state = TrainState::new(model, 8, 3).unwrap();
    (0..epochs).map(|_| train_epoch(&mut state, &tr, &te).unwrap()).collect()
}

fn losses(m: &[EpochMetrics]) -> Vec<u64> {
    m.iter().map(|e| e.train_loss.to_bits()).collect()
}

#[test]
fn ideal_crossbar_training_equals_digital_reference() {
    let s = ideal(settings(Engine::Ideal));
    let digital = train(&Backend::Digital(s.digital_reference()), 5);
    let crossbar = train(&Backend::Crossbar(Box::new(s)), 5);
    assert_eq!(losses(&crossbar), losses(&digital));
    assert!(digital.last().unwrap().train_loss < digital[0].train_loss);
}

#[test]
fn interp_with_unit_interval_equals_fcm() {
    let fcm = FcmOptions::default();
    let a = train(&Backend::Crossbar(Box::new(settings(Engine::Fcm(fcm)))), 2);
    let b = train(&Backend::Crossbar(Box::new(settings(Engine::InterpFcm { interval: 1, fcm }))), 2);
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.iter().map(|m| m.test_accuracy).collect::<Vec<_>>(), b.iter().map(|m| m.test_accuracy).collect::<Vec<_>>());
}

#[test]
fn training_is_deterministic() {
    let backend = Backend::Crossbar(Box::new(settings(Engine::Aam(Default::default()))));
    let a = train(&backend, 2);
    let b = train(&backend, 2);
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn untrained_model_is_near_chance() {
    let spec = BlobSpec { classes: 2, dim: 4, separation: 1.0, spread: 0.5, seed: 1 };
    let test = blobs(&spec, 500, 1).unwrap();
    let backend = Backend::Digital(ideal(settings(Engine::Ideal)).digital_reference());
    let mut accs = Vec::new();
    for seed in 0..20 {
        let model = Model::build(&[LayerSpec::Dense { outputs: 2, bias: true }], &[4], &backend, seed).unwrap();
        accs.push(evaluate(&model, &test).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() < 0.15, "{mean}");
}

#[test]
fn digital_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let backend = Backend::Digital(DigitalSettings {
        weight_bits: 48,
        precision: Precision::default(),
        lr: 0.1,
        wmax: None,
        grad_scale: None,
    });
    for _ in 0..5 {
        let w = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0)).into_dyn();
        let y = [0, 3, 1];
        let loss = |w: &Array2<f64>| {
            let m = Model::from_layers(vec![Layer::Dense(Dense::new(w.view(), None, &backend).unwrap())], &[6]);
            m.loss_and_grads(x.clone(), &y).unwrap()
        };
        let (_, grads) = loss(&w);
        let dw = grads[0].as_ref().unwrap().dw.clone();
        let h = 1e-5;
        for ((i, j), g) in dw.indexed_iter() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[[i, j]] += h;
            wm[[i, j]] -= h;
            let fd = (loss(&wp).0 - loss(&wm).0) / (2.0 * h);
            assert!((g - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "{g} vs {fd}");
        }
    }
}
