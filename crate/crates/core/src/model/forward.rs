use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FeatureStore, Linear, Model, ModelError, Norm};
use crate::sequence::{ImageId, PackedSequence, Slot};
use crate::tensor::{AttnSegment, Graph, NodeId, Real, Tensor};

/// One retrieval query located in a forward batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryRef {
    pub seq: usize,
    /// Image occurrence index within the sequence.
    pub image: usize,
    /// Row in the batch hidden-state matrix.
    pub row: usize,
    pub id: ImageId,
    pub in_loss: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final-norm decoder states, sequences stacked row-wise.
    pub hidden: NodeId,
    /// First hidden row of each sequence.
    pub offsets: Vec<usize>,
    /// One entry per image span, in batch then span order.
    pub queries: Vec<QueryRef>,
}

impl ForwardOutput {
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        self.offsets[seq] + pos
    }
}

enum Src {
    Tok(usize),
    Cls(usize),
    Lat(usize),
}

impl<R: Real> Model<R> {
    fn linear(&self, g: &mut Graph<'_, R>, x: NodeId, l: Linear) -> Result<NodeId, ModelError> {
        let w = g.param(l.w);
        let y = g.matmul(x, w)?;
        Ok(match l.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)?
            }
            None => y,
        })
    }

    fn norm(&self, g: &mut Graph<'_, R>, x: NodeId, n: Norm) -> Result<NodeId, ModelError> {
        let (gm, bt) = (g.param(n.g), g.param(n.b));
        Ok(g.layer_norm(x, gm, bt)?)
    }

    fn mlp(
        &self,
        g: &mut Graph<'_, R>,
        x: NodeId,
        fc1: Linear,
        fc2: Linear,
    ) -> Result<NodeId, ModelError> {
        let h = self.linear(g, x, fc1)?;
        let h = g.gelu(h);
        self.linear(g, h, fc2)
    }

    /// Compresses each image's region vectors into `n_latents` rows
    /// (images stacked in order) by cross-attention from learned queries.
    pub(crate) fn perceive(
        &self,
        g: &mut Graph<'_, R>,
        images: &[&[Vec<f32>]],
    ) -> Result<NodeId, ModelError> {
        let lay = &self.layout;
        let (d, n) = (self.config.d_model, self.config.n_latents);
        let mut data = Vec::new();
        let mut segments = Vec::with_capacity(images.len());
        let mut k_start = 0;
        for (i, regions) in images.iter().enumerate() {
            for r in regions.iter() {
                data.extend(r.iter().map(|&v| R::from_f64_lossy(v as f64)));
            }
            segments.push(AttnSegment {
                q_start: i * n,
                q_len: n,
                k_start,
                k_len: regions.len(),
            });
            k_start += regions.len();
        }
        let regions = g.constant(Tensor::new(vec![k_start, self.config.d_img], data)?);
        let r = self.linear(g, regions, lay.region_proj)?;
        let r = self.norm(g, r, lay.region_ln)?;
        let kv = self.linear(g, r, lay.xkv)?;
        let lat = g.param(lay.latents);
        let lat = g.gather_rows((0..images.len() * n).map(|i| (lat, i % n)).collect())?;
        let lq = self.norm(g, lat, lay.lat_ln)?;
        let q = self.linear(g, lq, lay.xq)?;
        let a = g.attention((q, 0), (kv, 0), (kv, d), d, self.config.n_heads, segments, false)?;
        let a = self.linear(g, a, lay.xo)?;
        let lat = g.add(lat, a)?;
        let m = self.norm(g, lat, lay.pmlp_ln)?;
        let m = self.mlp(g, m, lay.pfc1, lay.pfc2)?;
        Ok(g.add(lat, m)?)
    }

    /// Runs the decoder over a batch of packed sequences. Each sequence
    /// attends causally to itself only.
    pub fn forward(
        &self,
        g: &mut Graph<'_, R>,
        batch: &[&PackedSequence],
        store: &FeatureStore,
    ) -> Result<ForwardOutput, ModelError> {
        self.forward_train(g, batch, store, None)
    }

    /// [`Model::forward`] with optional inverted dropout `(rate, seed)` on
    /// every residual branch of the decoder.
    pub fn forward_train(
        &self,
        g: &mut Graph<'_, R>,
        batch: &[&PackedSequence],
        store: &FeatureStore,
        dropout: Option<(f64, u64)>,
    ) -> Result<ForwardOutput, ModelError> {
        let mut drop_rng = dropout.map(|(p, seed)| (p, ChaCha8Rng::seed_from_u64(seed)));
        let cfg = &self.config;
        let lay = &self.layout;
        let mut offsets = Vec::with_capacity(batch.len());
        let mut total = 0;
        for s in batch {
            if s.is_empty() {
                return Err(ModelError::Config("empty packed sequence".into()));
            }
            if s.len() > cfg.max_seq {
                return Err(ModelError::Overlength {
                    len: s.len(),
                    max: cfg.max_seq,
                });
            }
            offsets.push(total);
            total += s.len();
        }
        let mut tok_ids = Vec::new();
        let mut cls_data: Vec<R> = Vec::new();
        let mut n_cls = 0;
        let mut occ: HashMap<(usize, usize), usize> = HashMap::new();
        let mut occ_regions: Vec<&[Vec<f32>]> = Vec::new();
        let mut srcs = Vec::with_capacity(total);
        let mut positions = Vec::with_capacity(total);
        for (si, s) in batch.iter().enumerate() {
            for (t, slot) in s.slots.iter().enumerate() {
                positions.push(t);
                match *slot {
                    Slot::Token(tok) => {
                        if tok as usize >= cfg.vocab_size {
                            return Err(ModelError::Config(format!(
                                "token id {tok} outside vocabulary of {}",
                                cfg.vocab_size
                            )));
                        }
                        srcs.push(Src::Tok(tok_ids.len()));
                        tok_ids.push(tok as usize);
                    }
                    Slot::Cls { image, blank } => {
                        if blank {
                            cls_data.extend(std::iter::repeat_n(R::zero(), cfg.d_img));
                        } else {
                            let f = &store.get(s.images[image])?.f_cls;
                            if f.len() != cfg.d_img {
                                return Err(ModelError::Config("f_cls width mismatch".into()));
                            }
                            cls_data.extend(f.iter().map(|&v| R::from_f64_lossy(v as f64)));
                        }
                        srcs.push(Src::Cls(n_cls));
                        n_cls += 1;
                    }
                    Slot::Latent { image, index } => {
                        let o = match occ.get(&(si, image)) {
                            Some(&o) => o,
                            None => {
                                let o = occ_regions.len();
                                occ_regions.push(&store.get(s.images[image])?.f);
                                occ.insert((si, image), o);
                                o
                            }
                        };
                        srcs.push(Src::Lat(o * cfg.n_latents + index));
                    }
                }
            }
        }
        let tok_node = if tok_ids.is_empty() {
            None
        } else {
            let e = g.param(lay.tok_emb);
            Some(g.select_rows(e, &tok_ids)?)
        };
        let cls_node = if n_cls == 0 {
            None
        } else {
            let c = g.constant(Tensor::new(vec![n_cls, cfg.d_img], cls_data)?);
            Some(self.linear(g, c, lay.p_cls)?)
        };
        let lat_node = if occ_regions.is_empty() {
            None
        } else {
            let p = self.perceive(g, &occ_regions)?;
            Some(self.linear(g, p, lay.p_q)?)
        };
        let sources = srcs
            .iter()
            .map(|s| match *s {
                Src::Tok(r) => (tok_node.expect("token rows"), r),
                Src::Cls(r) => (cls_node.expect("cls rows"), r),
                Src::Lat(r) => (lat_node.expect("latent rows"), r),
            })
            .collect();
        let x = g.gather_rows(sources)?;
        let pe = g.param(lay.pos_emb);
        let pos = g.select_rows(pe, &positions)?;
        let mut x = g.add(x, pos)?;

        let segments: Vec<AttnSegment> = batch
            .iter()
            .zip(&offsets)
            .map(|(s, &o)| AttnSegment {
                q_start: o,
                q_len: s.len(),
                k_start: o,
                k_len: s.len(),
            })
            .collect();
        let d = cfg.d_model;
        for b in &lay.blocks {
            let h = self.norm(g, x, b.ln1)?;
            let qkv = self.linear(g, h, b.qkv)?;
            let a = g.attention(
                (qkv, 0),
                (qkv, d),
                (qkv, 2 * d),
                d,
                cfg.n_heads,
                segments.clone(),
                true,
            )?;
            let a = self.linear(g, a, b.proj)?;
            let a = apply_dropout(g, a, drop_rng.as_mut())?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, b.ln2)?;
            let m = self.mlp(g, h, b.fc1, b.fc2)?;
            let m = apply_dropout(g, m, drop_rng.as_mut())?;
            x = g.add(x, m)?;
        }
        let hidden = self.norm(g, x, lay.ln_f)?;

        let mut queries = Vec::new();
        for (si, s) in batch.iter().enumerate() {
            for (k, p) in s.image_positions.iter().enumerate() {
                queries.push(QueryRef {
                    seq: si,
                    image: k,
                    row: offsets[si] + p.query_index,
                    id: p.image,
                    in_loss: p.in_loss,
                });
            }
        }
        Ok(ForwardOutput {
            hidden,
            offsets,
            queries,
        })
    }

    /// Text-head logits `[rows × vocab]` for the given hidden rows.
    pub fn text_logits(
        &self,
        g: &mut Graph<'_, R>,
        hidden: NodeId,
        rows: &[usize],
    ) -> Result<NodeId, ModelError> {
        let h = g.select_rows(hidden, rows)?;
        let m = g.param(self.layout.m_t);
        Ok(g.matmul(h, m)?)
    }

    /// Unit-norm retrieval queries `normalize(h · M_v)` for hidden rows.
    pub fn query_embed(
        &self,
        g: &mut Graph<'_, R>,
        hidden: NodeId,
        rows: &[usize],
    ) -> Result<NodeId, ModelError> {
        let h = g.select_rows(hidden, rows)?;
        let m = g.param(self.layout.m_v);
        let p = g.matmul(h, m)?;
        Ok(g.normalize_rows(p))
    }

    /// Unit-norm keys `normalize(f_cls · M_Q)` for a `[n × d_img]` block of
    /// frozen features. The features enter as constants, so no gradient
    /// reaches them.
    pub fn key_embed(&self, g: &mut Graph<'_, R>, f_cls: Tensor<R>) -> Result<NodeId, ModelError> {
        let f = g.constant(f_cls);
        let m = g.param(self.layout.m_q);
        let p = g.matmul(f, m)?;
        Ok(g.normalize_rows(p))
    }

    /// `1/τ` as a one-element node.
    pub fn inv_temperature(&self, g: &mut Graph<'_, R>) -> NodeId {
        let lt = g.param(self.layout.log_tau);
        let neg = g.scale(lt, -R::one());
        g.exp(neg)
    }
}

fn apply_dropout<R: Real>(
    g: &mut Graph<'_, R>,
    x: NodeId,
    drop: Option<&mut (f64, ChaCha8Rng)>,
) -> Result<NodeId, ModelError> {
    let Some((p, rng)) = drop else { return Ok(x) };
    let keep = R::from_f64_lossy(1.0 / (1.0 - *p));
    let shape = g.value(x).shape().to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < *p { R::zero() } else { keep });
    let m = g.constant(mask);
    Ok(g.mul(x, m)?)
}
