use super::*;
use crate::data::synthetic_dataset;
use crate::network::DenseLayer;
use crate::sensing::make_sampler;

fn desk() -> (DenseNet, SamplingMatrix, LatentSet, DenseMatrix) {
    let (data, z) = synthetic_dataset(3, 12, 40, 5).unwrap();
    let g = DenseNet::seeded(&[3, 8, 12], &[Activation::Tanh, Activation::Sigmoid], 11).unwrap();
    let phi = make_sampler(12, 0.5, 5).unwrap();
    let y = data.sensed(&phi).unwrap();
    (g, phi, z, y)
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        monitor_samples: 40,
        learning_rate: 0.05,
        ..TrainConfig::default()
    }
}

#[test]
fn identity_autoencoder_starts_at_zero() {
    let id = || {
        DenseNet::new(vec![DenseLayer::new(DenseMatrix::identity(4), vec![0.0; 4], Activation::Identity).unwrap()])
            .unwrap()
    };
    let x = DenseMatrix::from_fn(10, 4, |i, j| ((i * 7 + j * 3) % 10) as f64 / 10.0);
    let data = Dataset::new("id", x, None).unwrap();
    let cfg = AeConfig {
        epochs: 2,
        ..AeConfig::default()
    };
    let ae = train_autoencoder_from(id(), id(), &data, None, &cfg).unwrap();
    assert_eq!(ae.history.train, vec![0.0; 3]);
}

#[test]
fn autoencoder_loss_decreases() {
    let (data, _) = synthetic_dataset(3, 16, 64, 1).unwrap();
    let cfg = AeConfig {
        hidden: 10,
        latent: 3,
        epochs: 20,
        batch_size: 8,
        learning_rate: 0.1,
        ..AeConfig::default()
    };
    let ae = train_autoencoder(&data, Some(&data), &cfg).unwrap();
    let h = &ae.history.train;
    assert!(h.last().unwrap() < &h[0]);
    assert_eq!(ae.history.test.len(), h.len());
    let csv = String::from_utf8(ae.history.to_csv().unwrap()).unwrap();
    assert!(csv.starts_with("epoch,train_loss,test_loss\n0,"));
    assert_eq!(ae.encode(&data).unwrap().dim(), 3);
}

#[test]
fn zero_epochs_returns_warm_start() {
    let (g, phi, z, y) = desk();
    let split = SensedSplit::new(&z, &y).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        eps: Some(0.3),
        ..quick_cfg()
    };
    let (net, h) = finetune_dcsat(&g, &phi, split, None, &cfg, Exec::Sequential).unwrap();
    assert_eq!(net, g);
    assert_eq!(h.completed_epochs(), 0);
    let direct = monitor(&g, &phi, split, 0.3, 40, Exec::Sequential).unwrap();
    assert_eq!(h.train[0], direct);
}

#[test]
fn finetune_is_deterministic_and_exec_independent() {
    let (g, phi, z, y) = desk();
    let split = SensedSplit::new(&z, &y).unwrap();
    let cfg = quick_cfg();
    let (a, ha) = finetune_dcsat(&g, &phi, split, Some(split), &cfg, Exec::Sequential).unwrap();
    let (b, hb) = finetune_dcsat(&g, &phi, split, Some(split), &cfg, Exec::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha.to_csv().unwrap(), hb.to_csv().unwrap());
    assert_eq!(ha.completed_epochs(), 3);
    let csv = String::from_utf8(ha.to_csv().unwrap()).unwrap();
    assert!(csv.starts_with(
        "epoch,split,fitting,adversarial,lipschitz_penalty,nullspace_penalty,total\n0,train,"
    ));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}

#[test]
fn baseline_ignores_penalty_weights() {
    let (g, phi, z, y) = desk();
    let split = SensedSplit::new(&z, &y).unwrap();
    let mut cfg = quick_cfg();
    cfg.eps = Some(0.2);
    let (a, _) = train_dcs_baseline(&g, &phi, split, None, &cfg, Exec::Sequential).unwrap();
    cfg.lipschitz_weight = Some(10.0);
    cfg.nullspace_weight = Some(10.0);
    cfg.lambda = 3.0;
    let (b, _) = train_dcs_baseline(&g, &phi, split, None, &cfg, Exec::Sequential).unwrap();
    assert_eq!(a, b);
}

#[test]
fn divergence_is_reported() {
    let (g, phi, z, y) = desk();
    let split = SensedSplit::new(&z, &y).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e6,
        optimizer: Optimizer::Sgd,
        lambda: 0.0,
        lipschitz_weight: Some(1e3),
        eps: Some(0.3),
        ..quick_cfg()
    };
    let err = finetune_dcsat(&g, &phi, split, None, &cfg, Exec::Sequential).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn calibration_hits_the_ratio() {
    let (g, phi, z, y) = desk();
    let split = SensedSplit::new(&z, &y).unwrap();
    let eps = calibrate_eps(&g, &phi, split, 1.3, 40, Exec::Sequential).unwrap();
    let m = monitor(&g, &phi, split, eps, 40, Exec::Sequential).unwrap();
    assert!((m.adversarial / m.fitting - 1.3).abs() < 1e-9);
    assert!(calibrate_eps(&g, &phi, split, 1.0, 40, Exec::Sequential).is_err());
}

#[test]
fn penalty_only_steps_shrink_the_spectrum() {
    let (g, phi, z, y) = desk();
    let split = SensedSplit::new(&z, &y).unwrap();
    let cfg = TrainConfig {
        lambda: 1.0,
        lipschitz_weight: Some(0.0),
        nullspace_weight: Some(1.0),
        learning_rate: 0.05,
        optimizer: Optimizer::Sgd,
        ..TrainConfig::default()
    };
    let (_, r) = surrogate_tightness_check(&g, &phi, split, 0.5, 50, &cfg, true, Exec::Sequential).unwrap();
    assert!(r.after.top_sigma < r.before.top_sigma);
}

#[test]
fn ablation_rows_share_mask_and_radius() {
    let (train, tz) = synthetic_dataset(3, 12, 24, 2).unwrap();
    let (test, sz) = synthetic_dataset(3, 12, 8, 3).unwrap();
    let g = DenseNet::seeded(&[3, 6, 12], &[Activation::Tanh, Activation::Sigmoid], 4).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        n_queries: 16,
        monitor_samples: 24,
        ..quick_cfg()
    };
    let inputs = AblationInputs {
        generator: &g,
        train: &train,
        train_latents: &tz,
        test: &test,
        test_latents: &sz,
    };
    let rows = ablation_sweep(&[1.0, 100.0], &[0.5, 0.8], &cfg, &inputs, Exec::Sequential).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].sr, 0.8);
    assert_eq!(rows[0].method, Method::Dcs);
    assert_eq!(rows[1].lambda, Some(100.0));
    assert!(rows[..3].iter().all(|r| r.eps == rows[0].eps && r.seed == rows[0].seed));
    assert_ne!(rows[0].seed, rows[3].seed);
    let csv = String::from_utf8(records_csv(&rows).unwrap()).unwrap();
    assert!(csv.starts_with("method,lambda,sr,adv_risk,fit_loss,total,seed,eps,linearized_adv_risk\nDCS,,0.8,"));
}
