#![allow(dead_code)]

use std::sync::Arc;

use misleading_core::data::{DemographicKey, Image, Label, Method, Sample, Split};
use misleading_core::detector::{Detector, StepItem};
use misleading_core::tensor::Tensor3;
use misleading_core::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small network so that finite differences stay cheap.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        input_size: 16,
        dsub_widths: vec![4, 6, 8],
        daux_widths: vec![3, 4],
        feature_dim: 6,
        srm_channels: 6,
        srm_clamp: 0.0,
        scam_stages: vec![2, 3],
        batch_size: 2,
        ..TrainConfig::default()
    }
}

pub fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
    Tensor3::from_vec(3, size, size, data)
}

pub fn key(s: &str) -> DemographicKey {
    s.parse().unwrap()
}

pub fn sample(id: &str, image: Image, label: Label, subgroup: &str) -> Sample {
    Sample {
        id: id.into(),
        image: Arc::new(image),
        label,
        subgroup: key(subgroup),
        method: if label.is_fake() { Some(Method::SYNTH) } else { None },
        split: Split::Train,
    }
}

/// A fake with an injected partner plus a real without one.
pub fn two_sample_batch(model: &Detector, size: usize, seed: u64) -> Vec<StepItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partner = Arc::new(model.red_features(&random_image(size, &mut rng)).unwrap());
    vec![
        StepItem {
            image: random_image(size, &mut rng),
            label: Label::Fake,
            partner: Some(partner),
        },
        StepItem {
            image: random_image(size, &mut rng),
            label: Label::Real,
            partner: None,
        },
    ]
}
