//! Fair deepfake detection by misleading learning: redundant-sample
//! selection, adaptive residual filtering, channel-attention feature
//! injection, composite losses, and fairness/robustness evaluation.

pub mod data;
pub mod dct;
pub mod imageops;
pub mod layers;
pub mod rng;
pub mod srm;
pub mod tensor;
pub mod library;
pub mod losses;
pub mod nets;
pub mod scam;
pub mod metrics;
pub mod perturb;
pub mod synth;
pub mod augment;
pub mod optim;
pub mod detector;
pub mod trainer;
