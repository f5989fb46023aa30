#![allow(dead_code)]

use imgchat_core::model::{FeatureStore, Model, ModelConfig};
use imgchat_core::objective::{unified_loss, FeatureQueue, LossWeights, QueueEntry};
use imgchat_core::sequence::{pack_document, PackOptions, PackedSequence, Stage};
use imgchat_core::synthworld::{emit_benchmark, make_stage1_corpus, Benchmark, BenchmarkConfig, Stage1CorpusConfig, World, WorldSpec};
use imgchat_core::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use imgchat_core::tensor::{AttnSegment, Gradients, Graph, NodeId, ParamStore, Real, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn world() -> World {
    World::new(WorldSpec::default()).expect("default world")
}

/// Same architecture as the toy model, shrunk so finite differences over
/// every parameter tensor stay cheap.
pub fn tiny_config(world: &World) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        n_latents: 2,
        d_retrieval: 12,
        max_seq: 64,
        ..ModelConfig::toy(world.vocab().len(), world.d_img())
    }
}

pub fn small_bench(world: &World, seed: u64) -> Benchmark {
    emit_benchmark(
        world,
        &BenchmarkConfig {
            test_pool: 60,
            per_family: 3,
            tchat: 12,
            ichat: 12,
            mchat: 12,
            seed,
        },
    )
    .expect("small benchmark")
}

pub fn pack_opts(cfg: &ModelConfig) -> PackOptions {
    PackOptions {
        n_latents: cfg.n_latents,
        max_len: cfg.max_seq,
        query_at: cfg.query_at,
    }
}

/// A few short alignment sequences over `pool`.
pub fn alignment_batch(world: &World, cfg: &ModelConfig, pool: &[imgchat_core::sequence::ImageId], n: usize, seed: u64) -> Vec<PackedSequence> {
    let docs = make_stage1_corpus(
        world,
        pool,
        &Stage1CorpusConfig {
            docs: n,
            interleaved_frac: 0.5,
            max_pairs_per_doc: 2,
            seed,
        },
    )
    .expect("corpus");
    docs.iter()
        .map(|d| pack_document(d, Stage::Alignment, &pack_opts(cfg)).expect("pack"))
        .collect()
}

pub fn random_tensor<R: Real>(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor<R> {
    Tensor::from_fn(shape, |_| R::from_f64_lossy(rng.random_range(lo..hi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    MatMulBT,
    Add,
    Mul,
    AddRow,
    Scale,
    MulScalar,
    Exp,
    Gelu,
    LayerNorm,
    Softmax,
    AttentionCausal,
    AttentionCross,
    GatherRows,
    SelectRows,
    ConcatCols,
    NormalizeRows,
    RowDot,
    CrossEntropy,
    Sum,
    SumSquares,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::MatMulBT,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::MulScalar,
        OpKind::Exp,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::AttentionCausal,
        OpKind::AttentionCross,
        OpKind::GatherRows,
        OpKind::SelectRows,
        OpKind::ConcatCols,
        OpKind::NormalizeRows,
        OpKind::RowDot,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::SumSquares,
    ];

    fn inputs(self) -> Vec<Vec<usize>> {
        use OpKind::*;
        match self {
            MatMul => vec![vec![3, 4], vec![4, 5]],
            MatMulBT => vec![vec![3, 4], vec![5, 4]],
            Add | Mul => vec![vec![3, 4], vec![3, 4]],
            AddRow => vec![vec![3, 4], vec![4]],
            Scale | Exp | Gelu | Softmax | NormalizeRows | Sum | SumSquares => vec![vec![3, 5]],
            MulScalar => vec![vec![3, 4], vec![1]],
            LayerNorm => vec![vec![3, 6], vec![6], vec![6]],
            AttentionCausal => vec![vec![7, 12]],
            AttentionCross => vec![vec![5, 4], vec![6, 8]],
            GatherRows => vec![vec![3, 4], vec![2, 4]],
            SelectRows => vec![vec![4, 3]],
            ConcatCols => vec![vec![3, 2], vec![3, 4]],
            RowDot => vec![vec![4, 3], vec![4, 3]],
            CrossEntropy => vec![vec![4, 6]],
        }
    }

    pub fn build<R: Real>(self, g: &mut Graph<'_, R>, x: &[NodeId]) -> Result<NodeId, TensorError> {
        use OpKind::*;
        Ok(match self {
            MatMul => g.matmul(x[0], x[1])?,
            MatMulBT => g.matmul_bt(x[0], x[1])?,
            Add => g.add(x[0], x[1])?,
            Mul => g.mul(x[0], x[1])?,
            AddRow => g.add_row(x[0], x[1])?,
            Scale => g.scale(x[0], R::from_f64_lossy(-1.7)),
            MulScalar => g.mul_scalar(x[0], x[1])?,
            Exp => g.exp(x[0]),
            Gelu => g.gelu(x[0]),
            LayerNorm => g.layer_norm(x[0], x[1], x[2])?,
            Softmax => g.softmax(x[0]),
            // Two causal segments over a packed [q | k | v] block.
            AttentionCausal => g.attention(
                (x[0], 0),
                (x[0], 4),
                (x[0], 8),
                4,
                2,
                vec![
                    AttnSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 },
                    AttnSegment { q_start: 3, q_len: 4, k_start: 3, k_len: 4 },
                ],
                true,
            )?,
            // Latent-style cross attention: queries from one node, keys and
            // values from two windows of another.
            AttentionCross => g.attention(
                (x[0], 0),
                (x[1], 0),
                (x[1], 4),
                4,
                2,
                vec![
                    AttnSegment { q_start: 0, q_len: 2, k_start: 0, k_len: 3 },
                    AttnSegment { q_start: 2, q_len: 3, k_start: 3, k_len: 3 },
                ],
                false,
            )?,
            GatherRows => g.gather_rows(vec![(x[0], 2), (x[1], 0), (x[0], 2), (x[1], 1), (x[0], 0)])?,
            SelectRows => g.select_rows(x[0], &[3, 0, 3, 1])?,
            ConcatCols => g.concat_cols(x[0], x[1])?,
            NormalizeRows => g.normalize_rows(x[0]),
            RowDot => g.row_dot(x[0], x[1])?,
            CrossEntropy => g.cross_entropy(x[0], &[1, 0, 5, 2], &[true, false, true, true])?,
            Sum => g.sum(x[0]),
            SumSquares => g.sum_squares(x[0]),
        })
    }
}

/// Reduces any op output to a scalar through a fixed random weighting.
fn weighted<R: Real>(g: &mut Graph<'_, R>, out: NodeId, seed: u64) -> Result<NodeId, TensorError> {
    let shape = g.value(out).shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random_tensor(&shape, &mut rng, -1.0, 1.0));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn op_value<R: Real>(kind: OpKind, ps: &ParamStore<R>) -> Result<(Graph<'_, R>, NodeId), TensorError> {
    let mut g = Graph::new(ps);
    let ids: Vec<NodeId> = ps.iter().map(|(id, _)| g.param(id)).collect();
    let out = kind.build(&mut g, &ids)?;
    let loss = weighted(&mut g, out, 99)?;
    Ok((g, loss))
}

pub fn op_params<R: Real>(kind: OpKind, seed: u64) -> ParamStore<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    for (i, s) in kind.inputs().iter().enumerate() {
        ps.add(format!("x{i}"), random_tensor::<R>(s, &mut rng, -1.5, 1.5), true);
    }
    ps
}

pub fn check_op<R: Real>(kind: OpKind, opts: &GradCheckOptions) -> Result<GradCheckReport, TensorError> {
    let ps = op_params::<R>(kind, 7 + kind as u64);
    grad_check(
        &ps,
        |p| {
            let (mut g, loss) = op_value(kind, p)?;
            g.backward(loss)
        },
        |p| {
            let (g, loss) = op_value(kind, p)?;
            Ok(g.value(loss).item())
        },
        opts,
    )
}

/// Inputs for a whole-model check: a batch, its features and a partly
/// filled queue.
pub struct ModelCase {
    pub model: Model<f64>,
    pub batch: Vec<PackedSequence>,
    pub store: FeatureStore,
    pub queue: FeatureQueue,
}

pub fn model_case(world: &World) -> ModelCase {
    let mut cfg = tiny_config(world);
    cfg.seed = 5;
    let model = Model::<f64>::new(cfg.clone()).expect("model");
    let store = world.feature_store(&model).expect("features");
    let pool: Vec<_> = (0..40).map(imgchat_core::sequence::ImageId).collect();
    let batch = alignment_batch(world, &cfg, &pool, 3, 4);
    let mut queue = FeatureQueue::new(8, cfg.d_img);
    let entries: Vec<QueueEntry> = (100..105)
        .map(|i| {
            let id = imgchat_core::sequence::ImageId(i);
            QueueEntry { id, f_cls: store.get(id).expect("feature").f_cls.clone() }
        })
        .collect();
    queue.enqueue_batch(&entries).expect("queue");
    ModelCase { model, batch, store, queue }
}

fn model_loss<'a, R: Real>(m: &'a Model<R>, case: &ModelCase) -> Result<(Graph<'a, R>, NodeId), String> {
    let mut g = Graph::new(&m.params);
    let refs: Vec<&PackedSequence> = case.batch.iter().collect();
    let fwd = m.forward(&mut g, &refs, &case.store).map_err(|e| e.to_string())?;
    let out = unified_loss(m, &mut g, &refs, &fwd, &case.queue, &case.store, LossWeights::default())
        .map_err(|e| e.to_string())?;
    Ok((g, out.total))
}

/// Full forward + unified loss, analytic at precision `R`.
pub fn check_model<R: Real>(case: &ModelCase, opts: &GradCheckOptions) -> Result<GradCheckReport, String> {
    let base: Model<R> = case.model.cast();
    let grads = |p: &ParamStore<R>| -> Result<Gradients<R>, String> {
        let mut m = base.clone();
        m.params = p.clone();
        let (mut g, loss) = model_loss(&m, case)?;
        g.backward(loss).map_err(|e| e.to_string())
    };
    let value = |p: &ParamStore<f64>| -> Result<f64, String> {
        let mut m = case.model.clone();
        m.params = p.clone();
        let (g, loss) = model_loss(&m, case)?;
        Ok(g.value(loss).item())
    };
    grad_check(&base.params, grads, value, opts)
}
