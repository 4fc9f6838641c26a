//! Finite-difference checks of the misleading-stage loss gradient against
//! every trainable parameter group.

mod common;

use common::{tiny_config, two_sample_batch};
use misleading_core::detector::{Detector, MisleadingOptions, StepItem};
use misleading_core::layers::Parameterized;
use misleading_core::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn opts(cfg: &TrainConfig) -> MisleadingOptions {
    MisleadingOptions {
        weights: cfg.weights,
        use_contrastive: cfg.ablation.use_contrastive,
        final_on_injected: cfg.final_on_injected,
    }
}

fn loss(model: &mut Detector, items: &[StepItem], o: &MisleadingOptions) -> f64 {
    model.misleading_batch(items, o, false).unwrap().0.total
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Checks up to `per_param` random entries of every parameter whose name
/// starts with one of `prefixes`.
fn check_params(cfg: &TrainConfig, prefixes: &[&str], per_param: usize) {
    let mut model = Detector::new(cfg.detector_spec()).unwrap();
    let items = two_sample_batch(&model, cfg.input_size, 3);
    let o = opts(cfg);
    model.zero_grad();
    model.misleading_batch(&items, &o, true).unwrap();
    let mut targets = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    model.visit_params(&mut |p| {
        if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            for _ in 0..per_param {
                let k = rng.random_range(0..p.len());
                targets.push((p.name.clone(), k, p.grad[k]));
            }
        }
    });
    assert!(!targets.is_empty());
    let mut worst = 0.0f64;
    for (name, k, g) in targets {
        let shift = |model: &mut Detector, d: f64| {
            model.visit_params_mut(&mut |p| {
                if p.name == name {
                    p.value[k] += d;
                }
            })
        };
        shift(&mut model, H);
        let up = loss(&mut model, &items, &o);
        shift(&mut model, -2.0 * H);
        let down = loss(&mut model, &items, &o);
        shift(&mut model, H);
        let fd = (up - down) / (2.0 * H);
        let e = rel_err(g, fd);
        assert!(e < 1e-4, "{name}[{k}]: analytic {g} vs numeric {fd} (rel {e})");
        worst = worst.max(e);
    }
    assert!(worst < 1e-4);
}

#[test]
fn discriminator_gradient_matches_finite_differences() {
    check_params(&tiny_config(), &["d_sub."], 3);
}

#[test]
fn auxiliary_and_head_gradients_match_finite_differences() {
    check_params(&tiny_config(), &["d_aux.", "head_sub.", "head_fused."], 3);
}

#[test]
fn attention_fusion_gradients_match_finite_differences() {
    check_params(&tiny_config(), &["scam"], 3);
}

#[test]
fn plain_fusion_gradients_match_finite_differences() {
    let mut cfg = tiny_config();
    cfg.ablation.use_scam = false;
    check_params(&cfg, &["plain_fusion", "d_sub.stage3"], 4);
}

#[test]
fn kernel_bank_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let mut model = Detector::new(cfg.detector_spec()).unwrap();
    let items = two_sample_batch(&model, cfg.input_size, 5);
    let o = opts(&cfg);
    model.zero_grad();
    let (_, grad) = model.misleading_batch(&items, &o, true).unwrap();
    assert_eq!(grad.len(), model.bank.kernels.len());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let k = rng.random_range(0..grad.len());
        model.bank.kernels[k] += H;
        let up = loss(&mut model, &items, &o);
        model.bank.kernels[k] -= 2.0 * H;
        let down = loss(&mut model, &items, &o);
        model.bank.kernels[k] += H;
        let fd = (up - down) / (2.0 * H);
        let e = rel_err(grad[k], fd);
        assert!(e < 1e-4, "kernel[{k}]: analytic {} vs numeric {fd} (rel {e})", grad[k]);
    }
}

#[test]
fn disabling_the_contrastive_term_zeroes_it() {
    let mut cfg = tiny_config();
    cfg.ablation.use_contrastive = false;
    let mut model = Detector::new(cfg.detector_spec()).unwrap();
    let items = two_sample_batch(&model, cfg.input_size, 9);
    let (parts, _) = model.misleading_batch(&items, &opts(&cfg), false).unwrap();
    assert_eq!(parts.l_con, 0.0);
    assert_eq!(parts.total, parts.l_cls + parts.l_final * cfg.weights.beta);
    check_params(&cfg, &["d_sub.stage1", "head_sub."], 3);
}

#[test]
fn injected_final_stream_gradients_match_finite_differences() {
    let mut cfg = tiny_config();
    cfg.final_on_injected = true;
    check_params(&cfg, &["d_sub.stage2", "scam3", "head_fused."], 3);
}
