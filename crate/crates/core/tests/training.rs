use std::path::PathBuf;

use dcsat::data::{load_mnist_idx, SyntheticTeacher};
use dcsat::exec::Exec;
use dcsat::training::{
    ablation_sweep, finetune_dcsat, surrogate_tightness_check, train_autoencoder, train_autoencoder_from,
    AblationInputs, AeConfig, Method, Optimizer, SensedSplit, TrainConfig,
};
use dcsat::{make_sampler, Activation, DenseNet, Error};

fn mnist(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist").join(name)
}

#[test]
fn matched_autoencoder_recovers_teacher_data() {
    let teacher = SyntheticTeacher::new(3, 20, 5).unwrap();
    let (data, _) = teacher.sample(256, 0).unwrap();
    let encoder = DenseNet::seeded(&[20, 6, 3], &[Activation::Tanh, Activation::Identity], 1).unwrap();
    let decoder = DenseNet::seeded(&[3, 6, 20], &[Activation::Tanh, Activation::Sigmoid], 2).unwrap();
    let cfg = AeConfig {
        epochs: 200,
        batch_size: 16,
        learning_rate: 0.1,
        ..AeConfig::default()
    };
    let ae = train_autoencoder_from(encoder, decoder, &data, None, &cfg).unwrap();
    let last = *ae.history.train.last().unwrap();
    assert!(last <= 1e-2, "reconstruction {last}");
}

#[test]
fn plain_sgd_autoencoder_loss_never_rises_on_mnist() {
    let data = load_mnist_idx(&mnist("train-images-idx3-ubyte"), None, Some(2000)).unwrap();
    let cfg = AeConfig {
        epochs: 8,
        optimizer: Optimizer::Sgd,
        learning_rate: 0.01,
        ..AeConfig::default()
    };
    let ae = train_autoencoder(&data, None, &cfg).unwrap();
    for w in ae.history.train.windows(2) {
        assert!(w[1] <= w[0], "{:?}", ae.history.train);
    }
}

fn small_problem() -> (dcsat::data::Dataset, dcsat::data::LatentSet, DenseNet) {
    let teacher = SyntheticTeacher::new(3, 12, 8).unwrap();
    let (data, z) = teacher.sample(32, 0).unwrap();
    // Not the teacher itself: at the teacher the fit is zero and the
    // calibrated radius collapses.
    let g = DenseNet::seeded(&[3, 6, 12], &[Activation::Tanh, Activation::Sigmoid], 9).unwrap();
    (data, z, g)
}

#[test]
fn single_cell_sweep_has_one_row_per_method() {
    let (data, z, g) = small_problem();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        monitor_samples: 32,
        n_queries: 8,
        ..TrainConfig::default()
    };
    let inputs = AblationInputs {
        generator: &g,
        train: &data,
        train_latents: &z,
        test: &data,
        test_latents: &z,
    };
    let rows = ablation_sweep(&[2e4], &[0.6], &cfg, &inputs, Exec::Sequential).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].method, rows[1].method), (Method::Dcs, Method::Dcsat));
}

#[test]
fn zero_steps_report_no_reduction() {
    let (data, z, g) = small_problem();
    let phi = make_sampler(12, 0.5, 3).unwrap();
    let y = data.sensed(&phi).unwrap();
    let split = SensedSplit::new(&z, &y).unwrap();
    let (net, r) =
        surrogate_tightness_check(&g, &phi, split, 0.5, 0, &TrainConfig::default(), false, Exec::Sequential)
            .unwrap();
    assert_eq!(net, g);
    assert_eq!(r.relative_reduction, 0.0);
}

#[test]
fn sensing_matrix_is_untouched_and_eps_must_be_positive() {
    let (data, z, g) = small_problem();
    let phi = make_sampler(12, 0.5, 3).unwrap();
    let before = phi.clone();
    let y = data.sensed(&phi).unwrap();
    let split = SensedSplit::new(&z, &y).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        monitor_samples: 32,
        ..TrainConfig::default()
    };
    finetune_dcsat(&g, &phi, split, None, &cfg, Exec::Sequential).unwrap();
    assert_eq!(phi, before);

    let bad = TrainConfig {
        eps: Some(0.0),
        ..cfg
    };
    let err = finetune_dcsat(&g, &phi, split, None, &bad, Exec::Sequential).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument { .. }), "{err}");
}
