use deepssm_nn::checkpoint::{decode, encode, store_entries, Manifest};
use deepssm_nn::optim::adam_update;
use deepssm_nn::{AdamConfig, Graph, LayerSpec, Mode, ParamStore, Schedule, Sequential, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn cosine_schedule_never_increases(total in 1u64..500, lr in 1e-6f64..1.0) {
        let s = Schedule::CosineAnnealing { total_steps: total };
        let mut prev = s.rate(lr, 0);
        prop_assert_eq!(prev, lr);
        for step in 1..=total + 3 {
            let r = s.rate(lr, step);
            prop_assert!(r <= prev && r >= 0.0);
            if step < total {
                prop_assert!(r > 0.0);
            }
            prev = r;
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_the_gradient(g in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let g: Vec<f64> = g.into_iter().map(|v| if v.abs() < 1e-3 { 1.0 } else { v }).collect();
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut p = vec![0.0; g.len()];
        let (mut m, mut v) = (vec![0.0; g.len()], vec![0.0; g.len()]);
        adam_update(&mut p, &g, &mut m, &mut v, &cfg, 0.1, 1);
        for (pi, gi) in p.iter().zip(&g) {
            // bias-corrected m/sqrt(v) is g/|g| after one step
            let expected = -0.1 * gi / (gi.abs() + cfg.eps);
            prop_assert!((pi - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let mut store = ParamStore::new();
        store.add_weight("w", Tensor::from_vec(values.clone()), true);
        let manifest = Manifest {
            seed: 1,
            step: 2,
            stacks: vec![],
            tensors: store_entries(&store),
            metadata: serde_json::Value::Null,
        };
        let (_, back) = decode(&encode(&manifest, &[store.value(deepssm_nn::ParamId(0))]).unwrap()).unwrap();
        let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back[0].data()), bits(&values));
    }
}

#[test]
fn xavier_variance_matches_fan_formula() {
    let t = deepssm_nn::init::xavier_init(&[1000, 1000], 3);
    let n = t.len() as f64;
    let m = t.sum() / n;
    let var = t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let target = 2.0 / 2000.0;
    assert!(var > 0.8 * target && var < 1.2 * target, "variance {var}");
    assert_eq!(t.checksum(), deepssm_nn::init::xavier_init(&[1000, 1000], 3).checksum());
}

#[test]
fn forward_eval_matches_eval_mode_forward() {
    let specs = vec![
        LayerSpec::Conv3d { in_channels: 1, out_channels: 2, kernel: 3 },
        LayerSpec::BatchNorm { channels: 2 },
        LayerSpec::Prelu { channels: 2 },
        LayerSpec::MaxPool3d { factor: 2 },
        LayerSpec::Flatten,
        LayerSpec::FullyConnected { in_features: 16, out_features: 3 },
        LayerSpec::LeakyRelu { slope: 0.01 },
    ];
    let mut store = ParamStore::new();
    let net = Sequential::build("n", specs, &mut store, 5).unwrap();
    let x = deepssm_nn::init::xavier_init(&[3, 1, 4, 4, 4], 9);
    // one training pass moves the running statistics away from their initial values
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    net.forward(&mut g, xv, &mut store, Mode::Train).unwrap();

    let mut g1 = Graph::new();
    let a = g1.constant(x.clone()).unwrap();
    let a = net.forward(&mut g1, a, &mut store, Mode::Eval).unwrap();
    let mut g2 = Graph::new();
    let b = g2.constant(x).unwrap();
    let b = net.forward_eval(&mut g2, b, &store).unwrap();
    assert_eq!(g1.value(a).checksum(), g2.value(b).checksum());
    assert_eq!(g1.value(a).shape(), &[3, 3]);
}
