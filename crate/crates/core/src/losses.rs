//! Classification, misleading and contrastive loss terms.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::tensor::{l2_norm, sigmoid};

pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("misleading classification loss called on a real sample")]
    CalledOnRealSample,
    #[error("vector lengths differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("non-finite loss component {name} = {value}")]
    NonFiniteComponent { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    /// L2-normalise features before the contrastive term.
    pub normalize_features: bool,
    /// Target for the misleading classification term is `1 - smoothing`.
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 1.0,
            margin: 1.0,
            normalize_features: true,
            label_smoothing: 0.0,
        }
    }
}

/// Binary cross-entropy with the score clamped to `[1e-7, 1 - 1e-7]`.
pub fn binary_cls_loss(score: f64, label: f64) -> f64 {
    let s = score.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    -(label * s.ln() + (1.0 - label) * (1.0 - s).ln())
}

pub fn batch_cls_loss(scores: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    scores
        .iter()
        .zip(labels)
        .map(|(s, y)| binary_cls_loss(*s, *y))
        .sum::<f64>()
        / scores.len() as f64
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// BCE on `sigmoid(logit)` and its derivative w.r.t. the logit. Inside the
/// clamp range the loss is evaluated in the cancellation-free form
/// `softplus(z) - y z`; outside it the clamped value is returned with zero
/// derivative.
pub fn bce_from_logit(logit: f64, label: f64) -> (f64, f64) {
    let s = sigmoid(logit);
    if (SCORE_EPS..=1.0 - SCORE_EPS).contains(&s) {
        (softplus(logit) - label * logit, s - label)
    } else {
        (binary_cls_loss(s, label), 0.0)
    }
}

/// BCE against the fixed "fake" target; rejects real samples.
pub fn misleading_cls_loss(score_from_injected_final: f64, label: Label) -> Result<f64, LossError> {
    if label != Label::Fake {
        return Err(LossError::CalledOnRealSample);
    }
    Ok(binary_cls_loss(score_from_injected_final, 1.0))
}

/// `max(m + |a - p| - |a - n|, 0)`.
pub fn triplet_con_loss(anchor: &[f64], positive: &[f64], negative: &[f64], m: f64) -> Result<f64, LossError> {
    if anchor.len() != positive.len() {
        return Err(LossError::DimMismatch(anchor.len(), positive.len()));
    }
    if anchor.len() != negative.len() {
        return Err(LossError::DimMismatch(anchor.len(), negative.len()));
    }
    let dist = |b: &[f64]| anchor.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok((m + dist(positive) - dist(negative)).max(0.0))
}

fn normalized(v: &[f64]) -> (Vec<f64>, f64) {
    let n = l2_norm(v);
    if n == 0.0 {
        return (v.to_vec(), 0.0);
    }
    (v.iter().map(|x| x / n).collect(), n)
}

/// Contrastive term with anchor = positive = `v_sub` and negative = `v_red`,
/// i.e. `max(m - |v_sub - v_red|, 0)`, optionally on L2-normalised vectors.
/// Returns the loss and its gradient w.r.t. `v_sub` (`v_red` is constant).
pub fn self_anchor_contrast(v_sub: &[f64], v_red: &[f64], w: &LossWeights) -> Result<(f64, Vec<f64>), LossError> {
    if v_sub.len() != v_red.len() {
        return Err(LossError::DimMismatch(v_sub.len(), v_red.len()));
    }
    let (a, a_norm, n) = if w.normalize_features {
        let (a, an) = normalized(v_sub);
        (a, an, normalized(v_red).0)
    } else {
        (v_sub.to_vec(), 1.0, v_red.to_vec())
    };
    let loss = triplet_con_loss(&a, &a, &n, w.margin)?;
    let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
    let dist = l2_norm(&diff);
    if loss == 0.0 || dist == 0.0 || a_norm == 0.0 {
        return Ok((loss, vec![0.0; v_sub.len()]));
    }
    let da: Vec<f64> = diff.iter().map(|d| -d / dist).collect();
    if !w.normalize_features {
        return Ok((loss, da));
    }
    let proj: f64 = a.iter().zip(&da).map(|(x, g)| x * g).sum();
    let grad = da.iter().zip(&a).map(|(g, x)| (g - x * proj) / a_norm).collect();
    Ok((loss, grad))
}

/// `l_cls + alpha * l_con + beta * l_final`.
pub fn total_misleading_loss(l_cls: f64, l_con: f64, l_final: f64, w: &LossWeights) -> Result<f64, LossError> {
    for (name, value) in [("l_cls", l_cls), ("l_con", l_con), ("l_final", l_final)] {
        if !value.is_finite() {
            return Err(LossError::NonFiniteComponent { name, value });
        }
    }
    Ok(l_cls + w.alpha * l_con + w.beta * l_final)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bce_reference_values() {
        assert!((binary_cls_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((binary_cls_loss(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(binary_cls_loss(1.0, 1.0) < 1e-6);
        assert!(binary_cls_loss(0.0, 0.0) < 1e-6);
        assert!(binary_cls_loss(0.0, 1.0).is_finite());
        let s = [0.1, 0.7, 0.3, 0.95, 0.5];
        let y = [0.0, 1.0, 1.0, 0.0, 1.0];
        let hand = (-(0.9f64.ln()) - 0.7f64.ln() - 0.3f64.ln() - 0.05f64.ln() - 0.5f64.ln()) / 5.0;
        assert!((batch_cls_loss(&s, &y) - hand).abs() < 1e-12);
    }

    #[test]
    fn misleading_loss_contract() {
        assert!((misleading_cls_loss(0.99, Label::Fake).unwrap() - 0.010050335853501).abs() < 1e-12);
        assert_eq!(misleading_cls_loss(0.5, Label::Real), Err(LossError::CalledOnRealSample));
    }

    #[test]
    fn triplet_examples() {
        let a = [0.0, 0.0];
        assert_eq!(triplet_con_loss(&a, &a, &[0.5, 0.0], 0.2).unwrap(), 0.0);
        let v = triplet_con_loss(&a, &[0.3, 0.4], &[0.0, 0.1], 0.2).unwrap();
        assert!((v - 0.6).abs() < 1e-15);
        assert_eq!(triplet_con_loss(&a, &[1.0], &a, 0.2), Err(LossError::DimMismatch(2, 1)));
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_misleading_loss(1.0, 2.0, 3.0, &w).unwrap(), 4.1);
        assert_eq!(total_misleading_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let z = LossWeights { alpha: 0.0, beta: 0.0, ..w };
        assert_eq!(total_misleading_loss(0.7, 5.0, 9.0, &z).unwrap(), 0.7);
        assert!(total_misleading_loss(f64::NAN, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn contrast_gradient_matches_finite_differences() {
        let v_red = [0.3, -0.2, 0.5, 0.1];
        for normalize_features in [true, false] {
            let w = LossWeights { normalize_features, margin: 3.0, ..Default::default() };
            let v = [0.1, 0.4, -0.3, 0.2];
            let (l, g) = self_anchor_contrast(&v, &v_red, &w).unwrap();
            assert!(l > 0.0);
            for i in 0..4 {
                let h = 1e-6;
                let mut p = v;
                p[i] += h;
                let mut m = v;
                m[i] -= h;
                let fd = (self_anchor_contrast(&p, &v_red, &w).unwrap().0
                    - self_anchor_contrast(&m, &v_red, &w).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn bce_logit_gradient(z in -10.0f64..10.0, y in prop_oneof![Just(0.0), Just(1.0)]) {
            let (_, g) = bce_from_logit(z, y);
            let h = 1e-6;
            let fd = (bce_from_logit(z + h, y).0 - bce_from_logit(z - h, y).0) / (2.0 * h);
            prop_assert!((fd - g).abs() < 1e-6);
        }

        #[test]
        fn losses_are_non_negative(s in 0.0f64..=1.0, y in prop_oneof![Just(0.0), Just(1.0)],
                                   a in proptest::collection::vec(-1.0f64..1.0, 4),
                                   p in proptest::collection::vec(-1.0f64..1.0, 4),
                                   n in proptest::collection::vec(-1.0f64..1.0, 4),
                                   m in 0.0f64..2.0) {
            prop_assert!(binary_cls_loss(s, y) >= 0.0);
            prop_assert!(triplet_con_loss(&a, &p, &n, m).unwrap() >= 0.0);
        }
    }
}
