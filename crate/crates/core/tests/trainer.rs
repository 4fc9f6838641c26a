//! Training pipeline contracts on tiny synthetic data.

mod common;

use std::collections::BTreeMap;

use common::{random_image, sample, tiny_config};
use misleading_core::data::{Label, Sample, Split};
use misleading_core::layers::Parameterized;
use misleading_core::synth::{generate_samples, SynthConfig};
use misleading_core::trainer::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_data(n: usize) -> Vec<Sample> {
    let cfg = SynthConfig {
        image_size: 16,
        n_per_split: BTreeMap::from([(Split::Train, n)]),
        fake_fraction: 0.5,
        seed: 5,
        ..SynthConfig::default()
    };
    generate_samples(&cfg, Split::Train).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs_pretrain: 1,
        epochs_misleading: 2,
        batch_size: 6,
        srm_clamp: misleading_core::srm::DEFAULT_CLAMP,
        ..tiny_config()
    }
}

#[test]
fn zero_pretrain_epochs_leave_the_initialisation() {
    let mut c = cfg();
    c.epochs_pretrain = 0;
    let init = Checkpoint::init(&c).unwrap();
    let mut log = TrainLog::default();
    let ck = pretrain_dsub(&c, &tiny_data(12), &mut log).unwrap();
    assert_eq!(ck.model.param_digest(), init.model.param_digest());
    assert!(log.rows.is_empty());
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(18);
    let run = || {
        let mut log = TrainLog::default();
        let ck = train_full(&cfg(), &data, &mut log).unwrap();
        (ck.model.param_digest(), ck.model.bank.kernels.clone(), log.to_csv_string())
    };
    assert_eq!(run(), run());
}

#[test]
fn log_rows_match_steps_and_totals_are_exact() {
    let data = tiny_data(18);
    let c = cfg();
    let mut log = TrainLog::default();
    let ck = train_full(&c, &data, &mut log).unwrap();
    let steps_per_epoch = data.len().div_ceil(c.batch_size) as u64;
    assert_eq!(ck.step, steps_per_epoch * 3);
    assert_eq!(log.rows.len() as u64, ck.step);
    for r in &log.rows {
        assert_eq!(r.total, r.l_cls + c.weights.alpha * r.l_con + c.weights.beta * r.l_final);
    }
    let epochs: Vec<usize> = log.rows.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs.first(), Some(&1));
    assert_eq!(epochs.last(), Some(&3));
    assert!(log.rows[3..].iter().any(|r| r.l_con > 0.0));
}

#[test]
fn partners_never_share_the_query_subgroup() {
    let data = tiny_data(24);
    let mut log = TrainLog::default();
    train_full(&cfg(), &data, &mut log).unwrap();
    let fakes = data.iter().filter(|s| s.label.is_fake()).count() as u64;
    assert_eq!(log.pairs, fakes * 2);
    assert_eq!(log.same_subgroup_pairs, 0);
}

#[test]
fn frozen_extractor_and_misleading_updates() {
    let data = tiny_data(18);
    let mut log = TrainLog::default();
    let pre = pretrain_dsub(&cfg(), &data, &mut log).unwrap();
    let ered = pre.model.e_red.param_digest();
    let kernels = pre.model.bank.kernels.clone();
    let full = misleading_train(pre.clone(), &data, &mut log).unwrap();
    assert_eq!(full.model.e_red.param_digest(), ered);
    assert_eq!(full.ered_digest, ered);
    // pretraining leaves the bank alone; misleading training moves it
    assert_eq!(pre.model.bank.init_snapshot(), &kernels[..]);
    assert_ne!(full.model.bank.kernels, kernels);
    assert_ne!(full.model.d_aux.param_digest(), pre.model.d_aux.param_digest());
}

#[test]
fn contrastive_ablation_logs_zero() {
    let mut c = cfg();
    c.ablation.use_contrastive = false;
    let mut log = TrainLog::default();
    train_full(&c, &tiny_data(12), &mut log).unwrap();
    assert!(log.rows.iter().all(|r| r.l_con == 0.0));
}

#[test]
fn plain_fusion_ablation_trains() {
    let mut c = cfg();
    c.ablation.use_scam = false;
    let mut log = TrainLog::default();
    let ck = train_full(&c, &tiny_data(12), &mut log).unwrap();
    let mut names = Vec::new();
    ck.model.visit_params(&mut |p| names.push(p.name.clone()));
    assert!(names.iter().any(|n| n.starts_with("plain_fusion")));
    assert!(!names.iter().any(|n| n.starts_with("scam")));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let data = tiny_data(18);
    let mut log = TrainLog::default();
    let ck = train_full(&cfg(), &data, &mut log).unwrap();
    let before = run_inference(&ck, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.mlck");
    save_checkpoint(&ck, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    // gradients are scratch space and are not stored
    let mut expected = ck.clone();
    expected.model.zero_grad();
    assert_eq!(loaded, expected);
    let after = run_inference(&loaded, &data).unwrap();
    let bits = |r: &[misleading_core::data::PredictionRecord]| r.iter().map(|x| x.score.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));
    assert_eq!(before.len(), data.len());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let data = tiny_data(12);
    let ck = pretrain_dsub(&cfg(), &data, &mut TrainLog::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.mlck");
    save_checkpoint(&ck, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(TrainError::Checkpoint(_))));
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(TrainError::Checkpoint(_))));
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let data = tiny_data(18);
    let c = cfg();
    let full = train_full(&c, &data, &mut TrainLog::default()).unwrap();

    let pre = pretrain_dsub(&c, &data, &mut TrainLog::default()).unwrap();
    let one = misleading_continue(pre, &data, 1, &mut TrainLog::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.mlck");
    save_checkpoint(&one, &path).unwrap();
    let resumed = misleading_train(load_checkpoint(&path).unwrap(), &data, &mut TrainLog::default()).unwrap();
    assert_eq!(resumed.model.param_digest(), full.model.param_digest());
    assert_eq!(resumed.model.bank.kernels, full.model.bank.kernels);
    assert_eq!(resumed.step, full.step);
}

#[test]
fn inference_is_repeatable() {
    let data = tiny_data(12);
    let ck = train_full(&cfg(), &data, &mut TrainLog::default()).unwrap();
    assert_eq!(run_inference(&ck, &data).unwrap(), run_inference(&ck, &data).unwrap());
}

#[test]
fn split_errors() {
    let c = cfg();
    assert!(matches!(pretrain_dsub(&c, &[], &mut TrainLog::default()), Err(TrainError::EmptySplit)));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reals: Vec<Sample> = (0..4)
        .map(|i| sample(&format!("r{i}"), random_image(16, &mut rng), Label::Real, "M-W"))
        .collect();
    assert!(matches!(
        pretrain_dsub(&c, &reals, &mut TrainLog::default()),
        Err(TrainError::SingleClassSplit(Label::Real))
    ));
}

#[test]
fn single_subgroup_library_has_no_partner() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<Sample> = (0..6)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Fake } else { Label::Real };
            sample(&format!("s{i}"), random_image(16, &mut rng), label, "M-W")
        })
        .collect();
    let pre = pretrain_dsub(&c, &data, &mut TrainLog::default()).unwrap();
    assert!(matches!(
        misleading_train(pre, &data, &mut TrainLog::default()),
        Err(TrainError::NoEligibleSubgroup(_))
    ));
}

#[test]
fn wrong_input_size_is_rejected() {
    let data = tiny_data(12);
    let ck = pretrain_dsub(&cfg(), &data, &mut TrainLog::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let big = vec![sample("x", random_image(32, &mut rng), Label::Real, "M-W")];
    assert!(matches!(run_inference(&ck, &big), Err(TrainError::Data(_))));
}

#[test]
fn config_validation() {
    let mut c = cfg();
    c.batch_size = 1;
    assert!(matches!(c.validate(), Err(TrainError::BadConfig(_))));
    let mut c = cfg();
    c.scam_stages = vec![4];
    assert!(c.validate().is_err());
    let mut c = cfg();
    c.srm_channels = 4;
    assert!(c.validate().is_err());
}

#[test]
fn config_rejects_unknown_keys() {
    let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.1}"#);
    assert!(err.is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"lr": 0.01, "ablation": {"use_scam": false}}"#).unwrap();
    assert_eq!(c.lr, 0.01);
    assert!(!c.ablation.use_scam && c.ablation.use_bias_sampling);
}
