//! The assembled detector: preprocessing, forgery discriminator with optional
//! redundant-feature injection, auxiliary discriminator and both heads, with
//! the batch loss/gradient computations used by training.

use std::sync::Arc;

use crate::data::{Image, Label};
use crate::layers::{Param, Parameterized};
use crate::losses::{bce_from_logit, self_anchor_contrast, total_misleading_loss, LossError, LossWeights};
use crate::nets::{Backbone, BackboneConfig, FeatureStack, Head, NetError, StageCache};
use crate::rng::{derive_rng, purpose};
use crate::scam::{PlainFusion, ScamCache, ScamStage};
use crate::srm::{apply_dct_preprocess, init_kernel_bank, KernelBank, Preprocess, ResidualCache, SrmError};
use crate::tensor::{sigmoid, Tensor3};
use crate::layers::ConvCache;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Srm(#[from] SrmError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("bad model config: {0}")]
    BadConfig(String),
}

/// Architecture choices that fix every parameter shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSpec {
    pub preprocess: Preprocess,
    pub srm_channels: usize,
    pub srm_clamp: Option<f64>,
    pub lambda_srm: f64,
    pub dsub_widths: Vec<usize>,
    pub daux_widths: Vec<usize>,
    pub feature_dim: usize,
    /// 1-based D_sub stages followed by attention fusion; empty or
    /// `use_scam == false` selects plain fusion after the last stage.
    pub scam_stages: Vec<usize>,
    pub use_scam: bool,
    pub seed: u64,
    pub ered_seed: u64,
}

/// Which head produces the inference score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceHead {
    /// `head_sub` on the discriminator feature alone.
    Sub,
    /// `head_fused` on the discriminator and auxiliary features.
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    Attention(Vec<(usize, ScamStage)>),
    Plain(usize, PlainFusion),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub spec: DetectorSpec,
    pub bank: KernelBank,
    pub d_sub: Backbone,
    pub head_sub: Head,
    pub d_aux: Backbone,
    pub head_fused: Head,
    pub e_red: Backbone,
    pub fusion: Fusion,
}

/// Redundant-extractor output kept for injection: the maps at the fusion
/// stages and the final vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RedFeatures {
    pub maps: Vec<Option<Tensor3>>,
    pub final_features: Vec<f64>,
}

enum FusionCache {
    Attention(ScamCache),
    Plain(ConvCache),
}

pub struct DsubTrace {
    stages: Vec<StageCache>,
    fusions: Vec<Option<(usize, FusionCache)>>,
    pooled: Vec<f64>,
    last_shape: (usize, usize, usize),
    pub final_features: Vec<f64>,
}

pub struct AuxTrace {
    stages: Vec<StageCache>,
    pooled: Vec<f64>,
    last_shape: (usize, usize, usize),
    pub final_features: Vec<f64>,
}

/// One training example as seen by a batch computation.
#[derive(Debug, Clone)]
pub struct StepItem {
    pub image: Image,
    pub label: Label,
    /// Redundant partner features; present for injected samples.
    pub partner: Option<Arc<RedFeatures>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_con: f64,
    pub l_final: f64,
    pub total: f64,
}

/// Options for the misleading-stage batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisleadingOptions {
    pub weights: LossWeights,
    pub use_contrastive: bool,
    pub final_on_injected: bool,
}

impl Detector {
    pub fn new(spec: DetectorSpec) -> Result<Self, ModelError> {
        let mut bank = init_kernel_bank(spec.srm_channels)?;
        bank.clamp = spec.srm_clamp;
        bank.lambda = spec.lambda_srm;
        let n = spec.dsub_widths.len();
        let sub_cfg = BackboneConfig {
            stages: n,
            widths: spec.dsub_widths.clone(),
            input_channels: spec.preprocess.output_channels(spec.srm_channels),
            feature_dim: spec.feature_dim,
            seed: spec.seed,
        };
        let d_sub = Backbone::new("d_sub", sub_cfg, purpose::INIT_DSUB)?;
        let aux_cfg = BackboneConfig {
            stages: spec.daux_widths.len(),
            widths: spec.daux_widths.clone(),
            input_channels: 3,
            feature_dim: spec.feature_dim,
            seed: spec.seed,
        };
        let d_aux = Backbone::new("d_aux", aux_cfg, purpose::INIT_DAUX)?;
        let red_cfg = BackboneConfig {
            stages: n,
            widths: spec.dsub_widths.clone(),
            input_channels: 3,
            feature_dim: spec.feature_dim,
            seed: spec.ered_seed,
        };
        let mut e_red = Backbone::new("e_red", red_cfg, purpose::INIT_ERED)?;
        e_red.frozen = true;
        let mut rng = derive_rng(spec.seed, &[purpose::INIT_HEADS]);
        let head_sub = Head::new("head_sub", spec.feature_dim, &mut rng);
        let head_fused = Head::new("head_fused", 2 * spec.feature_dim, &mut rng);
        let mut rng = derive_rng(spec.seed, &[purpose::INIT_SCAM]);
        let mut stages = spec.scam_stages.clone();
        stages.sort_unstable();
        stages.dedup();
        if let Some(&s) = stages.iter().find(|&&s| s == 0 || s > n) {
            return Err(NetError::StageIndexOutOfRange(s).into());
        }
        let fusion = if spec.use_scam && !stages.is_empty() {
            Fusion::Attention(
                stages
                    .iter()
                    .map(|&s| (s, ScamStage::new(&format!("scam{s}"), spec.dsub_widths[s - 1], &mut rng)))
                    .collect(),
            )
        } else {
            Fusion::Plain(n, PlainFusion::new("plain_fusion", spec.dsub_widths[n - 1], &mut rng))
        };
        Ok(Self {
            spec,
            bank,
            d_sub,
            head_sub,
            d_aux,
            head_fused,
            e_red,
            fusion,
        })
    }

    /// 1-based stages whose redundant maps are needed for injection.
    pub fn fusion_stages(&self) -> Vec<usize> {
        match &self.fusion {
            Fusion::Attention(v) => v.iter().map(|(s, _)| *s).collect(),
            Fusion::Plain(s, _) => vec![*s],
        }
    }

    pub fn red_features(&self, image: &Image) -> Result<RedFeatures, ModelError> {
        let FeatureStack {
            mut stage_maps,
            final_features,
        } = crate::nets::extract_red_features(&self.e_red, image)?;
        let keep = self.fusion_stages();
        let maps = stage_maps
            .iter_mut()
            .enumerate()
            .map(|(i, m)| keep.contains(&(i + 1)).then(|| std::mem::replace(m, Tensor3::zeros(0, 0, 0))))
            .collect();
        Ok(RedFeatures { maps, final_features })
    }

    pub fn preprocess(&self, image: &Image) -> Result<(Tensor3, Option<ResidualCache>), ModelError> {
        Ok(match self.spec.preprocess {
            Preprocess::AstraySrm | Preprocess::SrmFixed => {
                let (r, c) = self.bank.forward(image)?;
                (r, Some(c))
            }
            Preprocess::Dct => (apply_dct_preprocess(image)?, None),
            Preprocess::None => (image.clone(), None),
        })
    }

    /// D_sub forward; with `red`, the fusion modules replace the maps at
    /// their stages.
    pub fn dsub_forward(&self, input: &Tensor3, red: Option<&RedFeatures>) -> Result<DsubTrace, ModelError> {
        self.d_sub.check_input(input)?;
        let n = self.d_sub.num_stages();
        let mut stages = Vec::with_capacity(n);
        let mut fusions = Vec::with_capacity(n);
        let mut cur = input.clone();
        for i in 0..n {
            let (y, cache) = self.d_sub.stage_forward(i, &cur);
            stages.push(cache);
            cur = y;
            let mut fused = None;
            if let Some(red) = red {
                let s = i + 1;
                let vred = red.maps.get(i).and_then(|m| m.as_ref());
                match (&self.fusion, vred) {
                    (Fusion::Attention(list), Some(vred)) => {
                        if let Some((_, st)) = list.iter().find(|(k, _)| *k == s) {
                            let (out, c) = st
                                .forward_cached(vred, &cur)
                                .map_err(|e| ModelError::BadConfig(e.to_string()))?;
                            cur = out;
                            fused = Some((s, FusionCache::Attention(c)));
                        }
                    }
                    (Fusion::Plain(ps, pf), Some(vred)) if *ps == s => {
                        let (out, c) = pf
                            .forward_cached(vred, &cur)
                            .map_err(|e| ModelError::BadConfig(e.to_string()))?;
                        cur = out;
                        fused = Some((s, FusionCache::Plain(c)));
                    }
                    _ => {}
                }
            }
            fusions.push(fused);
        }
        let (final_features, pooled) = self.d_sub.project(&cur);
        Ok(DsubTrace {
            stages,
            fusions,
            pooled,
            last_shape: cur.shape(),
            final_features,
        })
    }

    /// Accumulates gradients of D_sub and the fusion modules; returns the
    /// input gradient when `need_dx`.
    pub fn dsub_backward(&mut self, trace: &DsubTrace, dfinal: &[f64], need_dx: bool) -> Option<Tensor3> {
        let mut d = self.d_sub.project_backward(&trace.pooled, trace.last_shape, dfinal);
        for i in (0..trace.stages.len()).rev() {
            if let Some((s, fc)) = &trace.fusions[i] {
                d = match (fc, &mut self.fusion) {
                    (FusionCache::Attention(c), Fusion::Attention(list)) => {
                        let st = &mut list.iter_mut().find(|(k, _)| k == s).expect("stage present").1;
                        st.backward(c, &d)
                    }
                    (FusionCache::Plain(c), Fusion::Plain(_, pf)) => pf.backward(c, &d),
                    _ => unreachable!("trace built by this model"),
                };
            }
            let want = i > 0 || need_dx;
            match self.d_sub.stage_backward(i, &trace.stages[i], &d, want) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }

    pub fn aux_forward(&self, image: &Image) -> Result<AuxTrace, ModelError> {
        self.d_aux.check_input(image)?;
        let mut stages = Vec::new();
        let mut cur = image.clone();
        for i in 0..self.d_aux.num_stages() {
            let (y, c) = self.d_aux.stage_forward(i, &cur);
            stages.push(c);
            cur = y;
        }
        let (final_features, pooled) = self.d_aux.project(&cur);
        Ok(AuxTrace {
            stages,
            pooled,
            last_shape: cur.shape(),
            final_features,
        })
    }

    pub fn aux_backward(&mut self, trace: &AuxTrace, dfinal: &[f64]) {
        let mut d = self.d_aux.project_backward(&trace.pooled, trace.last_shape, dfinal);
        for i in (0..trace.stages.len()).rev() {
            match self.d_aux.stage_backward(i, &trace.stages[i], &d, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Inference score with no redundant injection.
    pub fn predict(&self, image: &Image, head: InferenceHead) -> Result<f64, ModelError> {
        let (x, _) = self.preprocess(image)?;
        let sub = self.dsub_forward(&x, None)?.final_features;
        let logit = match head {
            InferenceHead::Sub => self.head_sub.logit(&sub)?,
            InferenceHead::Fused => {
                let aux = self.aux_forward(image)?.final_features;
                self.head_fused.logit(&[sub, aux].concat())?
            }
        };
        Ok(sigmoid(logit))
    }

    fn bank_trainable(&self) -> bool {
        self.spec.preprocess == Preprocess::AstraySrm
    }

    /// Mean BCE of `head_sub` over the batch (discriminator pretraining).
    /// With `grads`, accumulates D_sub/head_sub gradients.
    pub fn pretrain_batch(&mut self, items: &[StepItem], grads: bool) -> Result<f64, ModelError> {
        let n = items.len() as f64;
        let mut total = 0.0;
        for it in items {
            let (x, _) = self.preprocess(&it.image)?;
            let trace = self.dsub_forward(&x, None)?;
            let logit = self.head_sub.logit(&trace.final_features)?;
            let (l, dl) = bce_from_logit(logit, it.label.as_f64());
            total += l;
            if grads {
                let dfin = self.head_sub.backward(&trace.final_features, dl / n);
                self.dsub_backward(&trace, &dfin, false);
            }
        }
        Ok(total / n)
    }

    /// Misleading-stage batch loss. Injected items (those with a partner)
    /// contribute the injected-stream classification and contrastive terms;
    /// every item contributes the fused final classification, on the clean
    /// stream unless `final_on_injected` routes injected items through their
    /// injected stream. With `grads`, accumulates all parameter gradients and returns
    /// the kernel-bank gradient.
    pub fn misleading_batch(
        &mut self,
        items: &[StepItem],
        opts: &MisleadingOptions,
        grads: bool,
    ) -> Result<(LossParts, Vec<f64>), ModelError> {
        let w = opts.weights;
        let n = items.len() as f64;
        let n_inj = items.iter().filter(|i| i.partner.is_some()).count() as f64;
        let mut parts = LossParts::default();
        let want_kgrad = grads && self.bank_trainable();
        let mut kgrad = vec![0.0; if want_kgrad { self.bank.kernels.len() } else { 0 }];
        for it in items {
            let (x, rcache) = self.preprocess(&it.image)?;
            let mut dx: Option<Tensor3> = None;
            let mut add_dx = |d: Option<Tensor3>| {
                if let Some(d) = d {
                    match dx.as_mut() {
                        Some(acc) => acc.add_assign(&d),
                        None => dx = Some(d),
                    }
                }
            };

            let inj = match &it.partner {
                Some(red) => Some(self.dsub_forward(&x, Some(red))?),
                None => None,
            };
            let clean = match (&inj, opts.final_on_injected) {
                (Some(_), true) => None,
                _ => Some(self.dsub_forward(&x, None)?),
            };
            let mut dfin_inj = inj.as_ref().map(|t| vec![0.0; t.final_features.len()]);

            // fused final classification
            let aux = self.aux_forward(&it.image)?;
            let sub = clean.as_ref().or(inj.as_ref()).expect("one stream");
            let fused_feat = [sub.final_features.clone(), aux.final_features.clone()].concat();
            let (lf, dlf) = bce_from_logit(self.head_fused.logit(&fused_feat)?, it.label.as_f64());
            parts.l_final += lf / n;
            if grads {
                let dfused = self.head_fused.backward(&fused_feat, w.beta * dlf / n);
                let (dsub, daux) = dfused.split_at(self.spec.feature_dim);
                match (&clean, dfin_inj.as_mut()) {
                    (Some(c), _) => add_dx(self.dsub_backward(c, dsub, want_kgrad)),
                    (None, Some(d)) => d.iter_mut().zip(dsub).for_each(|(a, b)| *a += b),
                    (None, None) => unreachable!("final stream exists"),
                }
                self.aux_backward(&aux, daux);
            }

            // injected stream
            if let (Some(red), Some(inj), Some(mut dfin)) = (&it.partner, &inj, dfin_inj) {
                let target = match it.label {
                    Label::Fake => 1.0 - w.label_smoothing,
                    Label::Real => 0.0,
                };
                let (lc, dlc) = bce_from_logit(self.head_sub.logit(&inj.final_features)?, target);
                parts.l_cls += lc / n_inj;
                if opts.use_contrastive {
                    let (lcon, dcon) = self_anchor_contrast(&inj.final_features, &red.final_features, &w)?;
                    parts.l_con += lcon / n_inj;
                    dfin.iter_mut().zip(&dcon).for_each(|(d, g)| *d += w.alpha * g / n_inj);
                }
                if grads {
                    let dh = self.head_sub.backward(&inj.final_features, dlc / n_inj);
                    dfin.iter_mut().zip(&dh).for_each(|(d, g)| *d += g);
                    add_dx(self.dsub_backward(inj, &dfin, want_kgrad));
                }
            }

            if let (true, Some(cache), Some(dx)) = (want_kgrad, rcache.as_ref(), dx.as_ref()) {
                let g = self.bank.kernel_grad(cache, dx);
                kgrad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        parts.total = total_misleading_loss(parts.l_cls, parts.l_con, parts.l_final, &w)?;
        Ok((parts, kgrad))
    }

    /// Groups updated by the optimizer in the misleading stage, in a fixed order.
    pub fn misleading_groups(&mut self) -> Vec<&mut dyn Parameterized> {
        let mut v: Vec<&mut dyn Parameterized> = vec![&mut self.d_sub, &mut self.head_sub, &mut self.d_aux, &mut self.head_fused];
        match &mut self.fusion {
            Fusion::Attention(list) => v.extend(list.iter_mut().map(|(_, s)| s as &mut dyn Parameterized)),
            Fusion::Plain(_, p) => v.push(p),
        }
        v
    }
}

impl Parameterized for Fusion {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Fusion::Attention(list) => list.iter().for_each(|(_, s)| s.visit_params(f)),
            Fusion::Plain(_, p) => p.visit_params(f),
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Fusion::Attention(list) => list.iter_mut().for_each(|(_, s)| s.visit_params_mut(f)),
            Fusion::Plain(_, p) => p.visit_params_mut(f),
        }
    }
}

/// Every network parameter except the kernel bank (which is not a [`Param`]).
impl Parameterized for Detector {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.d_sub.visit_params(f);
        self.head_sub.visit_params(f);
        self.d_aux.visit_params(f);
        self.head_fused.visit_params(f);
        self.fusion.visit_params(f);
        self.e_red.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.d_sub.visit_params_mut(f);
        self.head_sub.visit_params_mut(f);
        self.d_aux.visit_params_mut(f);
        self.head_fused.visit_params_mut(f);
        self.fusion.visit_params_mut(f);
        self.e_red.visit_params_mut(f);
    }
}
