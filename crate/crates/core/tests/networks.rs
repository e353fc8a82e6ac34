use deepssm_core::evaluate::rmse;
use deepssm_core::networks::checkpoint;
use deepssm_core::networks::loss::{
    focal_a_default, focal_c_heuristic, focal_value, loss_corr, loss_focal_particles, loss_focal_vectors, loss_pca,
    percentile, FocalContext, FocalParams,
};
use deepssm_core::networks::train::{loss_tl, train_val_split, TlLoss};
use deepssm_core::networks::{
    Architecture, BaseDeepSsm, DeepSsm, PairLoss, Progress, TlDeepSsm, TrainConfig, Trainer, TrainingSet, Variant,
};
use deepssm_core::synthbench::{FamilyKind, SyntheticFamily};
use deepssm_core::{CorrespondenceSet, Grid, ShapeModel, Volume};
use deepssm_nn::{Graph, Mode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_arch() -> Architecture {
    Architecture { conv_channels: vec![2, 4], pool_after: vec![1, 2], fc_features: vec![8], kernel: 3 }
}

fn tiny_family(kind: FamilyKind) -> SyntheticFamily {
    SyntheticFamily { kind, num_particles: 16, grid: Grid::centered(16, 4.0).unwrap(), ..Default::default() }
}

fn dataset(n: usize, kind: FamilyKind) -> (TrainingSet, Vec<Volume>, Vec<CorrespondenceSet>) {
    let samples = tiny_family(kind).generate(n).unwrap();
    let vols: Vec<Volume> = samples.iter().map(|s| s.volume.clone()).collect();
    let shapes: Vec<CorrespondenceSet> = samples.iter().map(|s| s.correspondences.clone()).collect();
    (TrainingSet::new(&vols, &shapes).unwrap(), vols, shapes)
}

fn base_config(epochs: usize) -> TrainConfig {
    TrainConfig { architecture: tiny_arch(), epochs, batch_size: 4, num_modes: Some(4), ..Default::default() }
}

fn tl_config(ae: usize, tf: usize, joint: usize) -> TrainConfig {
    TrainConfig {
        variant: Variant::Tl,
        architecture: tiny_arch(),
        ae_epochs: ae,
        tflank_epochs: tf,
        joint_epochs: joint,
        latent_dim: 6,
        ae_hidden: 16,
        batch_size: 4,
        ..Default::default()
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn scalar(f: impl Fn(&mut Graph, deepssm_nn::Var, deepssm_nn::Var) -> deepssm_nn::Var, a: &Tensor, b: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let l = f(&mut g, x, y);
    g.value(l).item()
}

#[test]
fn corr_loss_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (p, t) = (random(&[3, 12], &mut rng, 5.0), random(&[3, 12], &mut rng, 5.0));
    let mut acc = 0.0;
    for b in 0..3 {
        for k in 0..12 {
            acc += (p.data()[b * 12 + k] - t.data()[b * 12 + k]).powi(2);
        }
    }
    let got = scalar(|g, x, y| loss_corr(g, x, y).unwrap(), &p, &t);
    assert!((got - acc / 3.0).abs() <= 1e-12 * acc);
    let one = Tensor::new(vec![1, 3], vec![1.0, 2.0, 2.0]).unwrap();
    assert_eq!(scalar(|g, x, y| loss_corr(g, x, y).unwrap(), &one, &Tensor::zeros(&[1, 3])), 9.0);
    assert_eq!(scalar(|g, x, y| loss_corr(g, x, y).unwrap(), &p, &p), 0.0);
}

#[test]
fn pca_loss_hand_cases() {
    let z = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
    assert_eq!(scalar(|g, x, y| loss_pca(g, x, y).unwrap(), &z, &Tensor::zeros(&[1, 2])), 25.0);
    let two = Tensor::new(vec![2, 2], vec![3.0, 4.0, 1.0, 0.0]).unwrap();
    assert_eq!(scalar(|g, x, y| loss_pca(g, x, y).unwrap(), &two, &Tensor::zeros(&[2, 2])), 13.0);
    let mut g = Graph::new();
    let (a, b) = (g.constant(z.clone()).unwrap(), g.constant(Tensor::zeros(&[1, 3])).unwrap());
    assert!(loss_pca(&mut g, a, b).is_err());
}

#[test]
fn focal_defaults_and_heuristic() {
    assert_eq!(focal_a_default("particle".parse::<FocalContext>().unwrap()), 10.0);
    assert_eq!(focal_a_default("latent".parse::<FocalContext>().unwrap()), 1.0);
    assert!("pixel".parse::<FocalContext>().is_err());
    let p = FocalParams::new(10.0, 1.0).unwrap();
    assert!((focal_value(2.0, p) - 3.99982).abs() < 1e-5);
    assert_eq!(focal_value(1.0, p), 0.5);
    let same = vec![vec![1.0, 2.0, 3.0]; 4];
    assert!(focal_c_heuristic(&same, &[1.0, 2.0, 3.0]).is_err());
    assert!(focal_c_heuristic(&[], &[]).is_err());
}

#[test]
fn focal_losses_reduce_to_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (p, t) = (random(&[2, 9], &mut rng, 2.0), random(&[2, 9], &mut rng, 2.0));
    let fp = FocalParams::new(10.0, 1.5).unwrap();
    let mut per_particle = 0.0;
    for r in 0..6 {
        let e = (0..3).map(|k| (p.data()[3 * r + k] - t.data()[3 * r + k]).powi(2)).sum::<f64>().sqrt();
        per_particle += focal_value(e, fp) / 6.0;
    }
    let got = scalar(|g, x, y| loss_focal_particles(g, x, y, fp).unwrap(), &p, &t);
    assert!((got - per_particle).abs() < 1e-12);
    let mut per_vector = 0.0;
    for b in 0..2 {
        let e = (0..9).map(|k| (p.data()[9 * b + k] - t.data()[9 * b + k]).powi(2)).sum::<f64>().sqrt();
        per_vector += focal_value(e, fp) / 2.0;
    }
    let got = scalar(|g, x, y| loss_focal_vectors(g, x, y, fp).unwrap(), &p, &t);
    assert!((got - per_vector).abs() < 1e-12);
}

/// Central differences of a scalar graph function with respect to every input element.
fn fd_check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[deepssm_nn::Var]) -> deepssm_nn::Var) -> f64 {
    let h = 1e-5;
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<_> = ts.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
    let l = f(&mut g, &vars);
    g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap();
        let mut num = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            num.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        let diff = analytic.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / scale.max(1e-10));
    }
    worst
}

#[test]
fn loss_gradients_pass_finite_differences() {
    let losses: Vec<(&str, PairLoss)> = vec![
        ("corr", PairLoss::SquaredL2),
        ("focal particle", PairLoss::FocalParticle(FocalParams::new(10.0, 0.8).unwrap())),
        ("focal vector", PairLoss::FocalVector(FocalParams::new(1.0, 1.5).unwrap())),
    ];
    for (name, loss) in losses {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&[3, 6], &mut rng, 1.0), random(&[3, 6], &mut rng, 1.0)];
            let err = fd_check(&inputs, &|g, v| loss.apply(g, v[0], v[1]).unwrap());
            assert!(err <= 1e-4, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn tl_loss_gradients_and_composition() {
    let grid = Grid::centered(4, 1.0).unwrap();
    let arch = Architecture { conv_channels: vec![2], pool_after: vec![1], fc_features: vec![4], kernel: 3 };
    for seed in 0..20 {
        let mut model = TlDeepSsm::build(arch.clone(), grid, 4, 3, 5, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let c = random(&[2, 12], &mut rng, 2.0);
        let x = random(&[2, 1, 4, 4, 4], &mut rng, 1.0);
        let focal = FocalParams::new(1.0, 0.5).unwrap();
        let loss = TlLoss { lambda_auto: 1.0, lambda_tf: 1.0, auto: PairLoss::FocalParticle(focal), latent: PairLoss::SquaredL2 };
        let err = fd_check(&[c.clone(), x.clone()], &|g, v| loss_tl(g, &mut model.clone(), v[0], v[1], loss, Mode::Eval).unwrap());
        assert!(err <= 1e-4, "seed {seed}: {err:e}");

        // the joint loss is the sum of the two single-term losses
        let mut part = |la: f64, lt: f64| {
            let mut g = Graph::new();
            let (cv, xv) = (g.constant(c.clone()).unwrap(), g.constant(x.clone()).unwrap());
            let l = loss_tl(&mut g, &mut model, cv, xv, TlLoss { lambda_auto: la, lambda_tf: lt, ..loss }, Mode::Eval).unwrap();
            g.value(l).item()
        };
        let (a, t, both) = (part(1.0, 0.0), part(0.0, 1.0), part(1.0, 1.0));
        assert!((both - a - t).abs() <= 1e-12 * both.abs().max(1.0));
        let mut g = Graph::new();
        let (cv, xv) = (g.constant(c.clone()).unwrap(), g.constant(x.clone()).unwrap());
        let auto_only = {
            let s = model.encode(&mut g, cv).unwrap();
            let r = model.decode(&mut g, s).unwrap();
            let l = loss.auto.apply(&mut g, r, cv).unwrap();
            g.value(l).item()
        };
        assert_eq!(a, auto_only);
        assert!(loss_tl(&mut g, &mut model, cv, xv, TlLoss { lambda_auto: 0.0, lambda_tf: 0.0, ..loss }, Mode::Eval).is_err());
    }
}

#[test]
fn corr_and_score_losses_agree_through_the_fixed_layer() {
    let (_, _, shapes) = dataset(8, FamilyKind::EllipsoidLinear);
    let sm = ShapeModel::fit(&shapes, 5).unwrap();
    let model = BaseDeepSsm::new(tiny_arch(), Grid::centered(16, 4.0).unwrap(), &sm, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (z1, z2) = (random(&[3, 5], &mut rng, 4.0), random(&[3, 5], &mut rng, 4.0));
        let mut g = Graph::new();
        let (a, b) = (g.constant(z1.clone()).unwrap(), g.constant(z2.clone()).unwrap());
        let (ra, rb) = (model.reconstruct(&mut g, a).unwrap(), model.reconstruct(&mut g, b).unwrap());
        let lc = loss_corr(&mut g, ra, rb).unwrap();
        let lp = loss_pca(&mut g, a, b).unwrap();
        let (lc, lp) = (g.value(lc).item(), g.value(lp).item());
        assert!((lc - lp).abs() <= 1e-9 * lp);
    }
}

#[test]
fn fixed_layer_is_reconstruction_and_never_trains() {
    let (data, vols, shapes) = dataset(12, FamilyKind::EllipsoidLinear);
    let mut trainer = Trainer::new(base_config(2), &data).unwrap();
    let DeepSsm::Base(before) = trainer.model.clone() else { panic!("base") };
    let ids = before.fixed_ids();
    let sum0 = before.store.checksum(&ids);
    let sm = before.shape_model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10 {
        let z: Vec<f64> = (0..sm.num_modes()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(vec![1, z.len()], z.clone()).unwrap()).unwrap();
        let r = before.reconstruct(&mut g, zv).unwrap();
        let oracle = sm.reconstruct_flat(&z).unwrap();
        assert!(g.value(r).data().iter().zip(&oracle).all(|(a, b)| (a - b).abs() <= 1e-10));
    }
    assert_eq!(trainer.run(&data).unwrap(), Progress::Finished);
    let DeepSsm::Base(after) = &trainer.model else { panic!("base") };
    assert_eq!(after.store.checksum(&ids), sum0);
    assert_ne!(after.store.checksum(&after.encoder.all_ids()), before.store.checksum(&before.encoder.all_ids()));

    let inf = trainer.model.infer(&vols[0], "q").unwrap();
    let rec = sm.reconstruct_flat(&inf.descriptor).unwrap();
    assert!(inf.correspondences.flatten().iter().zip(&rec).all(|(a, b)| (a - b).abs() <= 1e-10));
    assert_eq!(trainer.model.infer(&vols[0], "q").unwrap(), inf);
    assert_eq!(inf.correspondences.len(), shapes[0].len());
    let wrong = Volume::filled(Grid::centered(8, 4.0).unwrap(), 0.0).unwrap();
    assert!(trainer.model.infer(&wrong, "w").is_err());
}

#[test]
fn tl_autoencoder_is_frozen_during_the_flank_phase() {
    let (data, vols, _) = dataset(12, FamilyKind::EllipsoidLinear);
    let mut cfg = tl_config(2, 2, 1);
    cfg.stop_after_epoch = Some(2);
    let mut t = Trainer::new(cfg.clone(), &data).unwrap();
    assert_eq!(t.run(&data).unwrap(), Progress::Paused);
    let DeepSsm::Tl(m) = &t.model else { panic!("tl") };
    let ae = m.autoencoder_ids();
    let after_phase1 = m.store.checksum(&ae);
    let flank1 = m.store.checksum(&m.t_flank_ids());

    t.config.stop_after_epoch = Some(4);
    assert_eq!(t.run(&data).unwrap(), Progress::Paused);
    let DeepSsm::Tl(m) = &t.model else { panic!("tl") };
    assert_eq!(m.store.checksum(&ae), after_phase1);
    assert_ne!(m.store.checksum(&m.t_flank_ids()), flank1);

    t.config.stop_after_epoch = None;
    assert_eq!(t.run(&data).unwrap(), Progress::Finished);
    let DeepSsm::Tl(m) = &t.model else { panic!("tl") };
    assert_ne!(m.store.checksum(&ae), after_phase1);
    let inf = t.model.infer(&vols[1], "x").unwrap();
    assert_eq!(inf.correspondences.len(), 16);
    assert_eq!(inf.descriptor.len(), 6);
    assert!(inf.correspondences.flatten().iter().all(|v| v.is_finite()));
    let phases: Vec<_> = t.state.history.iter().map(|r| r.phase).collect();
    assert_eq!(phases.len(), 5);
}

#[test]
fn same_seed_gives_identical_training() {
    let (data, _, _) = dataset(10, FamilyKind::EllipsoidLinear);
    let run = || {
        let mut t = Trainer::new(base_config(3), &data).unwrap();
        t.run(&data).unwrap();
        (t.state.history.clone(), t.model.store().checksum(&t.model.store().iter().map(|(id, _)| id).collect::<Vec<_>>()))
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(c1, c2);
    assert_eq!(h1.len(), 3);
    for (a, b) in h1.iter().zip(&h2) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (data, _, _) = dataset(10, FamilyKind::EllipsoidLinear);
    for cfg in [base_config(4), TrainConfig { variant: Variant::TlFocal, ..tl_config(2, 2, 2) }] {
        let all_ids = |m: &DeepSsm| m.store().iter().map(|(id, _)| id).collect::<Vec<_>>();
        let mut full = Trainer::new(cfg.clone(), &data).unwrap();
        full.run(&data).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut first = Trainer::new(TrainConfig { stop_after_epoch: Some(3), ..cfg.clone() }, &data).unwrap();
        assert_eq!(first.run(&data).unwrap(), Progress::Paused);
        checkpoint::save(&path, &first.model, Some((&first.config, &first.state))).unwrap();
        drop(first);

        let loaded = checkpoint::load(&path).unwrap();
        let (mut config, state) = loaded.training.unwrap();
        config.stop_after_epoch = None;
        let mut second = Trainer::resume(config, loaded.model, state, &data).unwrap();
        assert_eq!(second.run(&data).unwrap(), Progress::Finished);
        assert_eq!(second.state.history, full.state.history);
        assert_eq!(second.model.store().checksum(&all_ids(&second.model)), full.model.store().checksum(&all_ids(&full.model)));
    }
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let (data, vols, _) = dataset(10, FamilyKind::EllipsoidLinear);
    let mut t = Trainer::new(base_config(1), &data).unwrap();
    t.run(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &t.model, None).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert!(loaded.training.is_none());
    assert_eq!(loaded.model.infer(&vols[2], "a").unwrap(), t.model.infer(&vols[2], "a").unwrap());
    std::fs::write(&path, b"garbage").unwrap();
    assert!(checkpoint::load(&path).is_err());
}

#[test]
fn training_loss_halves_within_thirty_epochs() {
    let (data, _, _) = dataset(20, FamilyKind::EllipsoidLinear);
    let mut t = Trainer::new(TrainConfig { patience: 30, ..base_config(30) }, &data).unwrap();
    t.run(&data).unwrap();
    let h = &t.state.history;
    let best = h.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
    assert!(best <= 0.5 * h[0].train_loss, "first {} best {best}", h[0].train_loss);
}

#[test]
fn constant_targets_train_towards_the_mean() {
    let (_, vols, shapes) = dataset(10, FamilyKind::EllipsoidLinear);
    let mean = ShapeModel::fit(&shapes, 1).unwrap().mean_shape();
    let same: Vec<CorrespondenceSet> = (0..10).map(|_| mean.clone()).collect();
    let data = TrainingSet::new(&vols, &same).unwrap();
    let mut t = Trainer::new(TrainConfig { num_modes: Some(1), ..base_config(3) }, &data).unwrap();
    t.run(&data).unwrap();
    let h = &t.state.history;
    assert!(h.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min) <= h[0].val_loss);
    let pred = t.model.infer(&vols[0], "m").unwrap();
    assert!(rmse(&pred.correspondences, &mean).unwrap() < 1e-9);
}

#[test]
fn autoencoder_phase_reconstructs_linear_family() {
    let (data, _, shapes) = dataset(20, FamilyKind::EllipsoidLinear);
    let mut cfg = tl_config(1000, 1, 1);
    cfg.ae_hidden = 64;
    cfg.latent_dim = 16;
    cfg.ae_learning_rate = 3e-3;
    cfg.patience = 1000;
    cfg.stop_after_epoch = Some(1000);
    let mut t = Trainer::new(cfg, &data).unwrap();
    assert_eq!(t.run(&data).unwrap(), Progress::Paused);
    let DeepSsm::Tl(m) = &t.model else { panic!("tl") };
    let flat: Vec<f64> = shapes.iter().flat_map(|s| s.flatten()).collect();
    let mut g = Graph::new();
    let c = g.constant(Tensor::new(vec![20, 48], flat.clone()).unwrap()).unwrap();
    let s = m.encode(&mut g, c).unwrap();
    let r = m.decode(&mut g, s).unwrap();
    let rec = g.value(r).data();
    let err = (rec.iter().zip(&flat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / flat.len() as f64).sqrt();
    let mean: Vec<f64> = (0..48).map(|k| (0..20).map(|i| flat[i * 48 + k]).sum::<f64>() / 20.0).collect();
    let std = ((0..flat.len()).map(|i| (flat[i] - mean[i % 48]).powi(2)).sum::<f64>() / flat.len() as f64).sqrt();
    assert!(err < 0.1 * std, "rmse {err} vs std {std}");
}

#[test]
fn invalid_configs_and_non_finite_data_are_rejected() {
    let (data, vols, shapes) = dataset(6, FamilyKind::EllipsoidLinear);
    assert!(Trainer::new(TrainConfig { batch_size: 1, ..base_config(1) }, &data).is_err());
    assert!(Trainer::new(base_config(0), &data).is_err());
    assert!(Trainer::new(tl_config(1, 0, 1), &data).is_err());
    assert!("deep".parse::<Variant>().is_err());
    let mut bad = vols.clone();
    bad[0].data[5] = f64::NAN;
    let data = TrainingSet::new(&bad, &shapes).unwrap();
    let err = Trainer::new(base_config(1), &data).unwrap().run(&data).unwrap_err().to_string();
    assert!(err.contains("epoch 1"), "{err}");
}

#[test]
fn split_is_ninety_ten() {
    let (train, val) = train_val_split(500, 0.1, 0).unwrap();
    assert_eq!((train.len(), val.len()), (450, 50));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn focal_loss_properties(a in 0.1f64..20.0, c in 0.01f64..5.0, e1 in 0.0f64..10.0, e2 in 0.0f64..10.0) {
        let p = FocalParams::new(a, c).unwrap();
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert_eq!(focal_value(0.0, p), 0.0);
        prop_assert!(focal_value(lo, p) <= focal_value(hi, p));
        prop_assert!(focal_value(hi, p) <= hi * hi);
        let far = c + 20.0 / a;
        prop_assert!(focal_value(far, p) / (far * far) >= 0.999);
    }

    #[test]
    fn c_heuristic_matches_sorted_percentile(values in prop::collection::vec(0.0f64..10.0, 4..40), s in 0.5f64..4.0) {
        // particles offset along x by each value from a zero mean
        let shapes: Vec<Vec<f64>> = values.chunks(2).map(|ch| ch.iter().flat_map(|&v| [v, 0.0, 0.0]).collect()).filter(|r: &Vec<f64>| r.len() == 6).collect();
        let mean = vec![0.0; 6];
        let mut sorted: Vec<f64> = shapes.iter().flat_map(|r| [r[0], r[3]]).collect();
        prop_assume!(sorted.iter().any(|&v| v > 0.0));
        sorted.sort_by(f64::total_cmp);
        let h = (sorted.len() - 1) as f64 * 0.9;
        let lo = h.floor() as usize;
        let oracle = sorted[lo] + (h - lo as f64) * (sorted[(lo + 1).min(sorted.len() - 1)] - sorted[lo]);
        let c = focal_c_heuristic(&shapes, &mean).unwrap();
        prop_assert!((c - oracle).abs() <= 1e-12);
        prop_assert!((percentile(&sorted, 90.0).unwrap() - oracle).abs() <= 1e-12);
        let scaled: Vec<Vec<f64>> = shapes.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        prop_assert!((focal_c_heuristic(&scaled, &mean).unwrap() - s * c).abs() <= 1e-9 * s * c);
    }
}
