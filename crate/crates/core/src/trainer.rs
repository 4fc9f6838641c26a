//! Training pipeline: discriminator pretraining, misleading training with
//! redundant-feature injection, deterministic inference, checkpoints and the
//! training log.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment, AugmentConfig};
use crate::data::{DataError, DatasetManifest, DemographicKey, Label, PredictionRecord, Sample, Split};
use crate::detector::{Detector, DetectorSpec, InferenceHead, LossParts, MisleadingOptions, ModelError, RedFeatures, StepItem};
use crate::layers::Parameterized;
use crate::library::{LibraryError, LibraryIndex, RedundantLibrary, SamplingMode};
use crate::losses::LossWeights;
use crate::optim::{Adam, AdamState};
use crate::perturb::{apply_disturbance, Disturbance, PerturbError};
use crate::rng::{derive_rng, purpose, splitmix64};
use crate::srm::{KernelBank, Preprocess};

const MAGIC: &[u8; 8] = b"MLCKPT01";
const STAGE_PRETRAIN: u64 = 1;
const STAGE_MISLEADING: u64 = 2;

pub const LOG_COLUMNS: [&str; 6] = ["step", "epoch", "l_cls", "l_con", "l_final", "total"];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptySplit,
    #[error("training split contains only {0:?} samples")]
    SingleClassSplit(Label),
    #[error("no eligible redundant subgroup for {0}")]
    NoEligibleSubgroup(DemographicKey),
    #[error("non-finite loss at step {step}: l_cls={} l_con={} l_final={} total={}", .parts.l_cls, .parts.l_con, .parts.l_final, .parts.total)]
    NonFiniteLoss { step: u64, parts: LossParts },
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(u64),
    #[error("frozen extractor changed during training")]
    FrozenViolation,
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Library(LibraryError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
}

impl From<LibraryError> for TrainError {
    fn from(e: LibraryError) -> Self {
        match e {
            LibraryError::NoEligibleSubgroup(k) => TrainError::NoEligibleSubgroup(k),
            LibraryError::Data(d) => TrainError::Data(d),
            other => TrainError::Library(other),
        }
    }
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_bias_sampling: bool,
    pub use_contrastive: bool,
    pub use_scam: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_bias_sampling: true,
            use_contrastive: true,
            use_scam: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_misleading: usize,
    pub input_size: usize,
    pub weights: LossWeights,
    /// Step size of the kernel-bank update.
    pub lambda_srm: f64,
    /// Kernel-bank output channels (multiple of 3).
    pub srm_channels: usize,
    /// Residual truncation threshold; `<= 0` disables truncation.
    pub srm_clamp: f64,
    /// 1-based discriminator stages that receive attention fusion.
    pub scam_stages: Vec<usize>,
    pub ablation: Ablation,
    pub preprocess: Preprocess,
    /// Also inject partners into real samples.
    pub paired_reals: bool,
    /// Feed injected samples' injected features (not their clean ones) to
    /// the fused head.
    pub final_on_injected: bool,
    pub dsub_widths: Vec<usize>,
    pub daux_widths: Vec<usize>,
    pub feature_dim: usize,
    /// Seed of the frozen redundant extractor, independent of `seed`.
    pub ered_seed: u64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs_pretrain: 5,
            epochs_misleading: 15,
            input_size: 64,
            weights: LossWeights::default(),
            lambda_srm: 1e-4,
            srm_channels: 30,
            srm_clamp: crate::srm::DEFAULT_CLAMP,
            scam_stages: vec![2, 3],
            ablation: Ablation::default(),
            preprocess: Preprocess::AstraySrm,
            paired_reals: false,
            final_on_injected: false,
            dsub_widths: vec![16, 32, 64, 128],
            daux_widths: vec![8, 16],
            feature_dim: 64,
            ered_seed: 7,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda_srm >= 0.0 && self.lambda_srm.is_finite()) {
            return bad(format!("lambda_srm must be >= 0, got {}", self.lambda_srm));
        }
        if self.srm_channels == 0 || self.srm_channels % 3 != 0 {
            return bad(format!("srm_channels must be a positive multiple of 3, got {}", self.srm_channels));
        }
        if self.input_size < (1 << self.dsub_widths.len().max(self.daux_widths.len())) {
            return bad(format!("input_size {} too small for the backbone depth", self.input_size));
        }
        if let Some(s) = self.scam_stages.iter().find(|&&s| s == 0 || s > self.dsub_widths.len()) {
            return bad(format!("scam stage {s} outside 1..={}", self.dsub_widths.len()));
        }
        if self.weights.alpha < 0.0 || self.weights.beta < 0.0 || self.weights.margin < 0.0 {
            return bad("loss weights and margin must be non-negative".into());
        }
        Ok(())
    }

    pub fn detector_spec(&self) -> DetectorSpec {
        DetectorSpec {
            preprocess: self.preprocess,
            srm_channels: self.srm_channels,
            srm_clamp: (self.srm_clamp > 0.0).then_some(self.srm_clamp),
            lambda_srm: self.lambda_srm,
            dsub_widths: self.dsub_widths.clone(),
            daux_widths: self.daux_widths.clone(),
            feature_dim: self.feature_dim,
            scam_stages: self.scam_stages.clone(),
            use_scam: self.ablation.use_scam,
            seed: self.seed,
            ered_seed: self.ered_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Init,
    Pretrain,
    Misleading,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stage: TrainStage,
    /// Completed epochs within `stage`.
    pub stage_epoch: usize,
    /// Completed epochs over the whole run.
    pub epoch: usize,
    pub step: u64,
    pub model: Detector,
    pub optimizer: Adam,
    pub ered_digest: String,
}

impl Checkpoint {
    /// Freshly initialised model and optimizer.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Detector::new(config.detector_spec())?;
        let ered_digest = model.e_red.param_digest();
        Ok(Self {
            config: config.clone(),
            stage: TrainStage::Init,
            stage_epoch: 0,
            epoch: 0,
            step: 0,
            model,
            optimizer: Adam::new(config.lr),
            ered_digest,
        })
    }

    pub fn inference_head(&self) -> InferenceHead {
        match self.stage {
            TrainStage::Misleading => InferenceHead::Fused,
            _ => InferenceHead::Sub,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub l_cls: f64,
    pub l_con: f64,
    pub l_final: f64,
    pub total: f64,
}

/// Loss curve plus pairing statistics collected during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub pairs: u64,
    pub same_subgroup_pairs: u64,
    pub partner_counts: BTreeMap<DemographicKey, u64>,
}

impl TrainLog {
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(LOG_COLUMNS).expect("in-memory write");
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("ascii csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(io_err(path))
    }
}

/// Reads a training log written by [`TrainLog::write_csv`].
pub fn read_train_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .collect::<std::result::Result<Vec<LogRow>, _>>()
        .map_err(|e| TrainError::Data(DataError::Csv(e)))
}

fn check_split(samples: &[Sample]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(TrainError::EmptySplit);
    };
    if samples.iter().all(|s| s.label == first.label) {
        return Err(TrainError::SingleClassSplit(first.label));
    }
    Ok(())
}

fn check_inputs(cfg: &TrainConfig, samples: &[Sample]) -> Result<()> {
    for s in samples {
        s.validate(cfg.input_size)?;
    }
    Ok(())
}

fn epoch_order(seed: u64, stage: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, &[purpose::SHUFFLE, stage, epoch as u64]));
    order
}

fn augmented(cfg: &TrainConfig, stage: u64, epoch: usize, pos: usize, s: &Sample) -> crate::data::Image {
    let mut rng = derive_rng(cfg.seed, &[purpose::AUGMENT, stage, epoch as u64, pos as u64]);
    augment(&s.image, &cfg.augment, &mut rng)
}

/// Runs `epochs` further epochs of discriminator pretraining on `start`.
pub fn pretrain_continue(start: Checkpoint, train: &[Sample], epochs: usize, log: &mut TrainLog) -> Result<Checkpoint> {
    check_split(train)?;
    check_inputs(&start.config, train)?;
    let mut ck = start;
    if ck.stage == TrainStage::Misleading {
        return Err(TrainError::Checkpoint("cannot pretrain from a misleading-stage checkpoint".into()));
    }
    if ck.stage == TrainStage::Init {
        ck.stage = TrainStage::Pretrain;
        ck.stage_epoch = 0;
    }
    let cfg = ck.config.clone();
    for _ in 0..epochs {
        let e = ck.stage_epoch;
        let order = epoch_order(cfg.seed, STAGE_PRETRAIN, e, train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<StepItem> = chunk
                .iter()
                .map(|&i| StepItem {
                    image: augmented(&cfg, STAGE_PRETRAIN, e, i, &train[i]),
                    label: train[i].label,
                    partner: None,
                })
                .collect();
            ck.model.zero_grad();
            let l = ck.model.pretrain_batch(&items, true)?;
            ck.step += 1;
            let parts = LossParts {
                l_cls: l,
                l_con: 0.0,
                l_final: 0.0,
                total: crate::losses::total_misleading_loss(l, 0.0, 0.0, &cfg.weights)
                    .map_err(ModelError::from)?,
            };
            if !l.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: ck.step, parts });
            }
            if !(ck.model.d_sub.grads_finite() && ck.model.head_sub.grads_finite()) {
                return Err(TrainError::NonFiniteGradient(ck.step));
            }
            ck.optimizer.begin_step();
            ck.optimizer.update(&mut ck.model.d_sub);
            ck.optimizer.update(&mut ck.model.head_sub);
            log.rows.push(row(&ck, parts));
        }
        ck.stage_epoch += 1;
        ck.epoch += 1;
    }
    Ok(ck)
}

fn row(ck: &Checkpoint, p: LossParts) -> LogRow {
    LogRow {
        step: ck.step,
        epoch: ck.epoch + 1,
        l_cls: p.l_cls,
        l_con: p.l_con,
        l_final: p.l_final,
        total: p.total,
    }
}

/// Discriminator pretraining from a fresh initialisation.
pub fn pretrain_dsub(cfg: &TrainConfig, train: &[Sample], log: &mut TrainLog) -> Result<Checkpoint> {
    check_split(train)?;
    let init = Checkpoint::init(cfg)?;
    pretrain_continue(init, train, cfg.epochs_pretrain, log)
}

/// Same as [`pretrain_dsub`], loading the train split from a manifest.
pub fn pretrain_dsub_manifest(cfg: &TrainConfig, manifest: &DatasetManifest, log: &mut TrainLog) -> Result<Checkpoint> {
    let train = manifest.load_split(Split::Train, cfg.input_size)?;
    pretrain_dsub(cfg, &train, log)
}

/// Lazily computed redundant-extractor features of library images.
struct RedCache {
    map: BTreeMap<LibraryIndex, Arc<RedFeatures>>,
}

impl RedCache {
    fn get(&mut self, model: &Detector, lib: &RedundantLibrary, idx: LibraryIndex) -> Result<Arc<RedFeatures>> {
        if let Some(f) = self.map.get(&idx) {
            return Ok(f.clone());
        }
        let f = Arc::new(model.red_features(&lib.get(idx).image)?);
        self.map.insert(idx, f.clone());
        Ok(f)
    }
}

/// Runs `cfg.epochs_misleading` epochs of misleading training; `start` is a
/// pretraining checkpoint or a misleading checkpoint to resume.
pub fn misleading_train(start: Checkpoint, train: &[Sample], log: &mut TrainLog) -> Result<Checkpoint> {
    let epochs = start.config.epochs_misleading;
    let done = if start.stage == TrainStage::Misleading { start.stage_epoch } else { 0 };
    misleading_continue(start, train, epochs.saturating_sub(done), log)
}

/// Runs `epochs` further misleading-training epochs.
pub fn misleading_continue(start: Checkpoint, train: &[Sample], epochs: usize, log: &mut TrainLog) -> Result<Checkpoint> {
    check_split(train)?;
    check_inputs(&start.config, train)?;
    let mut ck = start;
    let cfg = ck.config.clone();
    if ck.stage != TrainStage::Misleading {
        ck.stage = TrainStage::Misleading;
        ck.stage_epoch = 0;
        ck.optimizer = Adam::new(cfg.lr);
    }
    let lib = RedundantLibrary::build(train).map_err(|e| match e {
        LibraryError::InsufficientSubgroups(_) => {
            let query = train.iter().find(|s| s.label.is_fake()).unwrap_or(&train[0]);
            TrainError::NoEligibleSubgroup(query.subgroup)
        }
        other => other.into(),
    })?;
    let mode = if cfg.ablation.use_bias_sampling {
        SamplingMode::Biased
    } else {
        SamplingMode::Uniform
    };
    let opts = MisleadingOptions {
        weights: cfg.weights,
        use_contrastive: cfg.ablation.use_contrastive,
        final_on_injected: cfg.final_on_injected,
    };
    let mut cache = RedCache { map: BTreeMap::new() };
    for _ in 0..epochs {
        let e = ck.stage_epoch;
        let order = epoch_order(cfg.seed, STAGE_MISLEADING, e, train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                let partner = if s.label.is_fake() || cfg.paired_reals {
                    let mut rng = derive_rng(cfg.seed, &[purpose::PAIRING, e as u64, i as u64]);
                    let idx = lib.select_index(s.subgroup, mode, &mut rng)?;
                    log.pairs += 1;
                    if idx.subgroup == s.subgroup {
                        log.same_subgroup_pairs += 1;
                    }
                    *log.partner_counts.entry(idx.subgroup).or_default() += 1;
                    Some(cache.get(&ck.model, &lib, idx)?)
                } else {
                    None
                };
                items.push(StepItem {
                    image: augmented(&cfg, STAGE_MISLEADING, e, i, s),
                    label: s.label,
                    partner,
                });
            }
            ck.model.zero_grad();
            let (parts, kgrad) = ck.model.misleading_batch(&items, &opts, true)?;
            ck.step += 1;
            if ![parts.l_cls, parts.l_con, parts.l_final, parts.total].iter().all(|v| v.is_finite()) {
                return Err(TrainError::NonFiniteLoss { step: ck.step, parts });
            }
            if !ck.model.grads_finite() || !kgrad.iter().all(|g| g.is_finite()) {
                return Err(TrainError::NonFiniteGradient(ck.step));
            }
            ck.optimizer.begin_step();
            for g in ck.model.misleading_groups() {
                ck.optimizer.update(g);
            }
            if !kgrad.is_empty() {
                let lambda = ck.model.bank.lambda;
                ck.model
                    .bank
                    .update_kernels(&kgrad, lambda)
                    .map_err(ModelError::from)?;
            }
            log.rows.push(row(&ck, parts));
        }
        ck.stage_epoch += 1;
        ck.epoch += 1;
    }
    if ck.model.e_red.param_digest() != ck.ered_digest {
        return Err(TrainError::FrozenViolation);
    }
    Ok(ck)
}

/// Pretraining followed by misleading training.
pub fn train_full(cfg: &TrainConfig, train: &[Sample], log: &mut TrainLog) -> Result<Checkpoint> {
    let pre = pretrain_dsub(cfg, train, log)?;
    misleading_train(pre, train, log)
}

fn disturbance_seed(seed: u64, sample_id: &str) -> u64 {
    sample_id
        .bytes()
        .fold(splitmix64(seed ^ purpose::DISTURB), |h, b| splitmix64(h ^ b as u64))
}

/// Scores every sample with no redundant injection, optionally after a
/// deterministic per-sample disturbance.
pub fn run_inference_with(
    ck: &Checkpoint,
    samples: &[Sample],
    disturbance: Option<(Disturbance, u64)>,
) -> Result<Vec<PredictionRecord>> {
    check_inputs(&ck.config, samples)?;
    let head = ck.inference_head();
    samples
        .iter()
        .map(|s| {
            let score = match disturbance {
                Some((d, seed)) => {
                    let img = apply_disturbance(&s.image, d, disturbance_seed(seed, &s.id))?;
                    ck.model.predict(&img, head)?
                }
                None => ck.model.predict(&s.image, head)?,
            };
            Ok(PredictionRecord {
                sample_id: s.id.clone(),
                score,
                label: s.label,
                subgroup: s.subgroup,
                method: s.method,
            })
        })
        .collect()
}

pub fn run_inference(ck: &Checkpoint, samples: &[Sample]) -> Result<Vec<PredictionRecord>> {
    run_inference_with(ck, samples, None)
}

pub fn run_inference_manifest(ck: &Checkpoint, manifest: &DatasetManifest, split: Split) -> Result<Vec<PredictionRecord>> {
    let samples = manifest.load_split(split, ck.config.input_size)?;
    run_inference(ck, &samples)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_stage_epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: u32,
    config: TrainConfig,
    stage: TrainStage,
    stage_epoch: usize,
    epoch: usize,
    step: u64,
    rng: RngState,
    adam_t: u64,
    adam_lr: f64,
    bank_lambda: f64,
    bank_clamp: Option<f64>,
    ered_digest: String,
    param_digest: String,
    /// SHA-256 of the raw tensor bytes.
    data_digest: String,
    tensors: Vec<TensorEntry>,
}

fn tensor_list(ck: &Checkpoint) -> (Vec<TensorEntry>, Vec<f64>) {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    ck.model.visit_params(&mut |p| {
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
        });
        data.extend_from_slice(&p.value);
    });
    let bank: &KernelBank = &ck.model.bank;
    for (name, v) in [("bank.kernels", &bank.kernels[..]), ("bank.init_snapshot", bank.init_snapshot())] {
        entries.push(TensorEntry {
            name: name.into(),
            shape: bank.shape().to_vec(),
        });
        data.extend_from_slice(v);
    }
    for (name, st) in &ck.optimizer.state {
        for (kind, v) in [("m", &st.m), ("v", &st.v)] {
            entries.push(TensorEntry {
                name: format!("adam.{kind}.{name}"),
                shape: vec![v.len()],
            });
            data.extend_from_slice(v);
        }
    }
    (entries, data)
}

/// Writes `MLCKPT01`, the header length (u64 LE), the JSON header and the
/// raw little-endian f64 tensors in header order.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let (tensors, data) = tensor_list(ck);
    let raw: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = Header {
        format: 1,
        config: ck.config.clone(),
        stage: ck.stage,
        stage_epoch: ck.stage_epoch,
        epoch: ck.epoch,
        step: ck.step,
        rng: RngState {
            seed: ck.config.seed,
            next_stage_epoch: ck.stage_epoch,
        },
        adam_t: ck.optimizer.t,
        adam_lr: ck.optimizer.lr,
        bank_lambda: ck.model.bank.lambda,
        bank_clamp: ck.model.bank.clamp,
        ered_digest: ck.ered_digest.clone(),
        param_digest: ck.model.param_digest(),
        data_digest: hex::encode(Sha256::digest(&raw)),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + raw.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&raw);
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    let bad = |m: &str| TrainError::Checkpoint(format!("{}: {m}", path.display()));
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let body = buf.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let raw = &buf[16 + hlen..];
    if hex::encode(Sha256::digest(raw)) != header.data_digest {
        return Err(bad("tensor data digest mismatch"));
    }
    if raw.len() % 8 != 0 {
        return Err(bad("tensor data is not a whole number of f64 values"));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let mut off = 0;
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let v = values.get(off..off + n).ok_or_else(|| bad("truncated tensor data"))?;
        off += n;
        tensors.insert(t.name, (t.shape, v.to_vec()));
    }
    if off != values.len() {
        return Err(bad("trailing tensor data"));
    }

    let mut model = Detector::new(header.config.detector_spec())?;
    let mut missing = None;
    model.visit_params_mut(&mut |p| match tensors.remove(&p.name) {
        Some((shape, v)) if shape == p.shape => p.value = v,
        _ => missing = Some(p.name.clone()),
    });
    if let Some(name) = missing {
        return Err(bad(&format!("missing or misshapen tensor {name}")));
    }
    fn take(t: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>, name: &str) -> Option<Vec<f64>> {
        t.remove(name).map(|(_, v)| v)
    }
    let missing = |name: &str| bad(&format!("missing {name}"));
    let kernels = take(&mut tensors, "bank.kernels").ok_or_else(|| missing("bank.kernels"))?;
    let snapshot = take(&mut tensors, "bank.init_snapshot").ok_or_else(|| missing("bank.init_snapshot"))?;
    model.bank =
        KernelBank::from_parts(kernels, snapshot, header.bank_lambda, header.bank_clamp).map_err(ModelError::from)?;
    let mut optimizer = Adam::new(header.adam_lr);
    optimizer.t = header.adam_t;
    let names: Vec<String> = tensors.keys().filter_map(|k| k.strip_prefix("adam.m.").map(String::from)).collect();
    for name in names {
        let m = take(&mut tensors, &format!("adam.m.{name}")).ok_or_else(|| missing(&name))?;
        let v = take(&mut tensors, &format!("adam.v.{name}")).ok_or_else(|| missing(&name))?;
        optimizer.state.insert(name, AdamState { m, v });
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(&format!("unexpected tensor {extra}")));
    }
    if model.param_digest() != header.param_digest {
        return Err(bad("parameter digest mismatch"));
    }
    if model.e_red.param_digest() != header.ered_digest {
        return Err(bad("frozen extractor digest mismatch"));
    }
    Ok(Checkpoint {
        config: header.config,
        stage: header.stage,
        stage_epoch: header.stage_epoch,
        epoch: header.epoch,
        step: header.step,
        model,
        optimizer,
        ered_digest: header.ered_digest,
    })
}
