//! Decoder-only multimodal model: frozen vision encoder, perceiver,
//! input projectors, causal decoder and the two output heads.

mod decode;
mod forward;
mod vision;

pub use decode::{decode_greedy, DecodeOutput, DecodeStop};
pub use forward::{ForwardOutput, QueryRef};
pub use vision::{encode_image, FeatureStore, RawImage, VisionFeatures};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sequence::{ImageId, QueryPosition, SequenceError};
use crate::tensor::{ParamId, ParamStore, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("packed length {len} exceeds max_seq {max}")]
    Overlength { len: usize, max: usize },
    #[error("image {0} has no features in the store")]
    UnknownImage(ImageId),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Perceiver latents per image (N).
    pub n_latents: usize,
    pub d_img: usize,
    /// Width of the shared retrieval space.
    pub d_retrieval: usize,
    pub max_seq: usize,
    pub temperature_init: f64,
    pub temperature_min: f64,
    pub temperature_max: f64,
    pub query_at: QueryPosition,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize, d_img: usize) -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            vocab_size,
            n_latents: 8,
            d_img,
            d_retrieval: 256,
            max_seq: 256,
            temperature_init: 0.07,
            temperature_min: 1e-3,
            temperature_max: 10.0,
            query_at: QueryPosition::Img,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.d_img == 0 || self.d_retrieval == 0 {
            return bad("layer count and widths must be positive");
        }
        if self.n_latents == 0 {
            return bad("n_latents must be at least 1");
        }
        if self.max_seq < self.n_latents + 4 {
            return bad("max_seq must hold one image span plus a token");
        }
        if !(self.temperature_min > 0.0
            && self.temperature_min <= self.temperature_init
            && self.temperature_init <= self.temperature_max)
        {
            return bad("temperature must satisfy 0 < min <= init <= max");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub region_mix: ParamId,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub latents: ParamId,
    pub region_proj: Linear,
    pub region_ln: Norm,
    pub lat_ln: Norm,
    pub xq: Linear,
    pub xkv: Linear,
    pub xo: Linear,
    pub pmlp_ln: Norm,
    pub pfc1: Linear,
    pub pfc2: Linear,
    pub p_cls: Linear,
    pub p_q: Linear,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub m_t: ParamId,
    pub m_v: ParamId,
    pub m_q: ParamId,
    pub log_tau: ParamId,
}

const VISION_SEED: u64 = 0x5EED_F00D;

/// Parameters that make up the decoder (frozen in the frozen-backbone
/// ablation); everything else is a head, a projector or the perceiver.
const BACKBONE_PREFIXES: &[&str] = &["tok_emb", "pos_emb", "dec."];

#[derive(Debug, Clone)]
pub struct Model<R: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
    pub(crate) layout: Layout,
}

struct Init<'a, R: Real> {
    store: &'a mut ParamStore<R>,
    rng: ChaCha8Rng,
}

impl<R: Real> Init<'_, R> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64, trainable: bool) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std");
        let t = Tensor::from_fn(shape, |_| R::from_f64_lossy(dist.sample(&mut self.rng)));
        self.store.add(name, t, trainable)
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, R::from_f64_lossy(v)), true)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64, bias: bool) -> Linear {
        let w = self.normal(&format!("{name}.w"), &[fan_in, fan_out], std, true);
        let b = bias.then(|| self.constant(&format!("{name}.b"), &[fan_out], 0.0));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            g: self.constant(&format!("{name}.g"), &[width], 1.0),
            b: self.constant(&format!("{name}.b"), &[width], 0.0),
        }
    }
}

impl<R: Real> Model<R> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let d = config.d_model;
        let di = config.d_img;
        let std = 0.02;
        let resid_std = 0.02 / ((2 * config.n_layers) as f64).sqrt();
        // The encoder is shared by every model, so its weights come from a
        // fixed stream rather than the model seed.
        let region_mix = {
            let mut vrng = ChaCha8Rng::seed_from_u64(VISION_SEED);
            let dist = Normal::new(0.0, 1.0 / (di as f64).sqrt()).expect("std");
            let t = Tensor::from_fn(&[di, di], |_| R::from_f64_lossy(dist.sample(&mut vrng)));
            init.store.add("vision.region_mix", t, false)
        };
        let tok_emb = init.normal("tok_emb", &[config.vocab_size, d], std, true);
        let pos_emb = init.normal("pos_emb", &[config.max_seq, d], std, true);
        let latents = init.normal("perceiver.latents", &[config.n_latents, d], 1.0, true);
        let region_proj = init.linear("perceiver.region_proj", di, d, 1.0 / (di as f64).sqrt(), true);
        let region_ln = init.norm("perceiver.region_ln", d);
        let lat_ln = init.norm("perceiver.lat_ln", d);
        let xq = init.linear("perceiver.xq", d, d, std, false);
        let xkv = init.linear("perceiver.xkv", d, 2 * d, std, false);
        let xo = init.linear("perceiver.xo", d, d, std, true);
        let pmlp_ln = init.norm("perceiver.mlp_ln", d);
        let pfc1 = init.linear("perceiver.fc1", d, 2 * d, std, true);
        let pfc2 = init.linear("perceiver.fc2", 2 * d, d, std, true);
        let p_cls = init.linear("p_cls", di, d, std, true);
        let p_q = init.linear("p_q", d, d, std, true);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("dec.{l}.{s}");
            blocks.push(Block {
                ln1: init.norm(&n("ln1"), d),
                qkv: init.linear(&n("qkv"), d, 3 * d, std, true),
                proj: init.linear(&n("proj"), d, d, resid_std, true),
                ln2: init.norm(&n("ln2"), d),
                fc1: init.linear(&n("fc1"), d, 4 * d, std, true),
                fc2: init.linear(&n("fc2"), 4 * d, d, resid_std, true),
            });
        }
        let ln_f = init.norm("ln_f", d);
        let m_t = init.normal("m_t", &[d, config.vocab_size], std, true);
        let dr = config.d_retrieval;
        let m_v = init.normal("m_v", &[d, dr], 1.0 / (d as f64).sqrt(), true);
        let m_q = init.normal("m_q", &[di, dr], 1.0 / (di as f64).sqrt(), true);
        let log_tau = init.constant("log_tau", &[1], config.temperature_init.ln());
        let layout = Layout {
            region_mix,
            tok_emb,
            pos_emb,
            latents,
            region_proj,
            region_ln,
            lat_ln,
            xq,
            xkv,
            xo,
            pmlp_ln,
            pfc1,
            pfc2,
            p_cls,
            p_q,
            blocks,
            ln_f,
            m_t,
            m_v,
            m_q,
            log_tau,
        };
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    /// Current temperature τ.
    pub fn temperature(&self) -> f64 {
        self.params.value(self.layout.log_tau).item().as_f64().exp()
    }

    /// Clamps τ into its configured range.
    pub fn clamp_temperature(&mut self) {
        let lo = self.config.temperature_min.ln();
        let hi = self.config.temperature_max.ln();
        let p = self.params.get_mut(self.layout.log_tau);
        let v = p.value.data()[0].as_f64().clamp(lo, hi);
        p.value.data_mut()[0] = R::from_f64_lossy(v);
    }

    /// Freezes (or unfreezes) the decoder: token and position embeddings
    /// and all transformer blocks. Heads, projectors and the perceiver stay
    /// trainable.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        let ids: Vec<ParamId> = self
            .params
            .iter()
            .filter(|(_, p)| BACKBONE_PREFIXES.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.params.set_trainable(id, trainable);
        }
    }

    /// Runs the frozen encoder with this model's fixed region mixing.
    pub fn encode_image(&self, raw: &RawImage) -> Result<VisionFeatures, ModelError> {
        let mix: Vec<f32> = self
            .params
            .value(self.layout.region_mix)
            .data()
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        encode_image(raw, self.config.d_img, &mix)
    }

    /// `normalize(h · M_v)` for one decoder state.
    pub fn project_query(&self, h: &[f32]) -> Vec<f32> {
        normalized(project(h, self.params.value(self.layout.m_v)))
    }

    /// `normalize(f_cls · M_Q)` for one image.
    pub fn project_key(&self, f_cls: &[f32]) -> Vec<f32> {
        normalized(project(f_cls, self.params.value(self.layout.m_q)))
    }

    /// Copies every parameter into a model of another precision.
    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }
}

fn project<R: Real>(x: &[f32], m: &Tensor<R>) -> Vec<f64> {
    let cols = m.cols();
    let mut out = vec![0.0f64; cols];
    for (i, &xi) in x.iter().enumerate() {
        let row = m.row(i);
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xi as f64 * w.as_f64();
        }
    }
    out
}

/// Zero vectors stay zero; callers treat their similarities as 0.
fn normalized(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| (x / n) as f32).collect()
    } else {
        vec![0.0; v.len()]
    }
}
