mod common;

use std::collections::HashSet;

use imgchat_core::eval::{
    ablation_sweep, caption_recall, random_baseline, random_ranking, recall_at_k, run_chatsearch_eval,
    subset_recall, AblationAxis, ChatEvalOptions, ContextMode, EvalError, Gallery, SweepSetup,
};
use imgchat_core::model::Model;
use imgchat_core::objective::cosine;
use imgchat_core::sequence::ImageId;
use imgchat_core::synthworld::{emit_benchmark, BenchmarkConfig, Subtask};
use imgchat_core::trainer::{stage1_set, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{small_bench, tiny_config, world};

fn ids(n: u32) -> Vec<ImageId> {
    (0..n).map(ImageId).collect()
}

/// Gallery over the first `n` world images with a tiny untrained model.
fn tiny_gallery(n: usize) -> (Model<f32>, Gallery) {
    let w = world();
    let model = Model::<f32>::new(tiny_config(&w)).unwrap();
    let store = w.feature_store(&model).unwrap();
    let ids: Vec<ImageId> = (0..n as u32).map(ImageId).collect();
    let g = Gallery::build(&model, &store, &ids).unwrap();
    (model, g)
}

#[test]
fn rank_matches_naive_scan() {
    let (model, g) = tiny_gallery(200);
    let w = world();
    let store = w.feature_store(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let q: Vec<f32> = (0..model.config.d_retrieval).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = g.rank_projected(&q, 10).unwrap();
        let mut naive: Vec<(ImageId, f64)> = g
            .ids()
            .iter()
            .map(|&id| (id, cosine(&q, &model.project_key(&store.get(id).unwrap().f_cls))))
            .collect();
        naive.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(got, naive[..10].to_vec());
        for pair in got.windows(2) {
            assert!(pair[0].1 >= pair[1].1);
        }
    }
}

#[test]
fn rank_is_scale_invariant_and_full_k_is_a_permutation() {
    let (model, g) = tiny_gallery(150);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q: Vec<f32> = (0..model.config.d_retrieval).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scaled: Vec<f32> = q.iter().map(|v| v * 7.5).collect();
    let a: Vec<ImageId> = g.rank_projected(&q, 20).unwrap().into_iter().map(|x| x.0).collect();
    let b: Vec<ImageId> = g.rank_projected(&scaled, 20).unwrap().into_iter().map(|x| x.0).collect();
    assert_eq!(a, b);

    let all = g.rank_projected(&q, g.len()).unwrap();
    let set: HashSet<ImageId> = all.iter().map(|x| x.0).collect();
    assert_eq!(set.len(), g.len());
    assert!(g.ids().iter().all(|id| set.contains(id)));
}

#[test]
fn ties_break_by_ascending_id() {
    let (model, g) = tiny_gallery(40);
    let zero = vec![0.0f32; model.config.d_retrieval];
    let r = g.rank_projected(&zero, 40).unwrap();
    let order: Vec<ImageId> = r.iter().map(|x| x.0).collect();
    assert_eq!(order, ids(40));
}

#[test]
fn gallery_errors() {
    let w = world();
    let model = Model::<f32>::new(tiny_config(&w)).unwrap();
    let store = w.feature_store(&model).unwrap();
    assert!(matches!(
        Gallery::build(&model, &store, &[ImageId(1), ImageId(1)]),
        Err(EvalError::DuplicateId(ImageId(1)))
    ));
    let g = Gallery::build(&model, &store, &ids(5)).unwrap();
    let q = vec![1.0f32; model.config.d_retrieval];
    assert!(matches!(g.rank_projected(&q, 6), Err(EvalError::KTooLarge { k: 6, size: 5 })));
    let empty = Gallery::build(&model, &store, &[]).unwrap();
    assert!(matches!(empty.rank_projected(&q, 0), Err(EvalError::EmptyGallery)));
}

#[test]
fn recall_counts_by_hand() {
    let ranked = vec![ids(5), vec![ImageId(4), ImageId(3), ImageId(2)], vec![ImageId(9)]];
    let targets = vec![ImageId(0), ImageId(2), ImageId(7)];
    let (r1, missing) = recall_at_k(&ranked, &targets, 1).unwrap();
    assert!((r1 - 100.0 / 3.0).abs() < 1e-9);
    assert_eq!(missing, vec![2]);
    let (r3, _) = recall_at_k(&ranked, &targets, 3).unwrap();
    assert!((r3 - 200.0 / 3.0).abs() < 1e-9);
    assert!(recall_at_k(&ranked, &targets[..2], 1).is_err());
}

#[test]
fn subset_recall_restricts_ranking() {
    let ranked = vec![ids(10)];
    let sub = vec![vec![ImageId(3), ImageId(5), ImageId(8)]];
    let t = vec![ImageId(5)];
    assert_eq!(subset_recall(&ranked, &t, &sub, 1).unwrap(), 0.0);
    assert_eq!(subset_recall(&ranked, &t, &sub, 2).unwrap(), 100.0);
    let bad = vec![vec![ImageId(3)]];
    assert!(matches!(
        subset_recall(&ranked, &t, &bad, 1),
        Err(EvalError::SubsetMissingTarget { query: 0, .. })
    ));
}

proptest! {
    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), n in 1usize..40, q in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = ids(n as u32);
        let ranked: Vec<Vec<ImageId>> = (0..q).map(|_| random_ranking(&pool, &mut rng)).collect();
        let targets: Vec<ImageId> = (0..q).map(|_| pool[rng.random_range(0..n)]).collect();
        let mut prev = 0.0;
        for k in 1..=n {
            let (r, missing) = recall_at_k(&ranked, &targets, k).unwrap();
            prop_assert!(r >= prev);
            prop_assert!(missing.is_empty());
            prev = r;
        }
        prop_assert!((prev - 100.0).abs() < 1e-9);
    }
}

fn within(observed: f64, (mean, sd): (f64, f64)) -> bool {
    (observed - mean).abs() <= 3.0 * sd.max(1e-12)
}

/// Uniform-random scorer over `gallery` for `n` targets drawn from it.
fn random_recall(gallery: &[ImageId], n: usize, seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = [0usize; 3];
    for _ in 0..n {
        let t = gallery[rng.random_range(0..gallery.len())];
        let r = random_ranking(gallery, &mut rng);
        let p = r.iter().position(|&x| x == t).unwrap();
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            *h += (p < k) as usize;
        }
    }
    hits.map(|h| 100.0 * h as f64 / n as f64)
}

#[test]
fn random_scorer_on_large_gallery() {
    let w = world();
    let (_, gallery) = w.split_pools(5000, 15, 11).unwrap();
    assert_eq!(gallery.len(), 5000);
    let n = 20_000;
    let got = random_recall(&gallery, n, 1);
    for (g, k) in got.into_iter().zip([1, 5, 10]) {
        let b = random_baseline(k, 5000, n);
        assert!(within(g, b), "R@{k}: {g} vs {b:?}");
    }
    assert!((random_baseline(1, 5000, n).0 - 0.02).abs() < 1e-12);
}

#[test]
fn random_scorer_on_benchmark() {
    let w = world();
    let bench = emit_benchmark(&w, &BenchmarkConfig::default()).unwrap();
    assert_eq!(bench.gallery.len(), 500);
    assert!((random_baseline(1, 500, 1).0 - 0.2).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ranked: Vec<Vec<ImageId>> = bench.samples.iter().map(|_| random_ranking(&bench.gallery, &mut rng)).collect();
    let targets: Vec<ImageId> = bench.samples.iter().map(|s| s.target).collect();
    for k in [1, 5, 10] {
        let (r, missing) = recall_at_k(&ranked, &targets, k).unwrap();
        assert!(missing.is_empty());
        assert!(within(r, random_baseline(k, 500, targets.len())), "R@{k} = {r}");
    }

    let ichat: Vec<_> = bench.by_subtask(Subtask::Ichat).collect();
    let subsets: Vec<Vec<ImageId>> = ichat.iter().map(|s| s.subset.clone().unwrap()).collect();
    let targets: Vec<ImageId> = ichat.iter().map(|s| s.target).collect();
    // Reuse each query several times so the tolerance is tight.
    let reps = 10;
    let ranked: Vec<Vec<ImageId>> = (0..reps * ichat.len()).map(|_| random_ranking(&bench.gallery, &mut rng)).collect();
    let targets: Vec<ImageId> = targets.iter().cycle().take(ranked.len()).copied().collect();
    let subsets: Vec<Vec<ImageId>> = subsets.iter().cycle().take(ranked.len()).cloned().collect();
    for (k, expect) in [(1, 16.67), (2, 33.33), (3, 50.0)] {
        let r = subset_recall(&ranked, &targets, &subsets, k).unwrap();
        let b = random_baseline(k, 6, ranked.len());
        assert!((b.0 - expect).abs() < 0.01);
        assert!(within(r, b), "subset R@{k} = {r}");
    }
}

#[test]
fn chatsearch_report_shape() {
    let w = world();
    let bench = small_bench(&w, 3);
    let model = Model::<f32>::new(tiny_config(&w)).unwrap();
    let store = w.feature_store(&model).unwrap();
    let r = run_chatsearch_eval(&model, &w, &bench, &store, &ChatEvalOptions::default()).unwrap();
    assert_eq!(r.cells.len(), 3);
    let mut sum = 0.0;
    for c in &r.cells {
        assert_eq!(c.n, 12);
        assert_eq!(c.missing_targets, 0);
        assert!(c.r1 <= c.r5 && c.r5 <= c.r10 && c.r10 <= 100.0);
        assert_eq!(c.subset.is_some(), c.subtask == Subtask::Ichat);
        sum += c.r1 + c.r5 + c.r10;
    }
    assert!((r.average - sum / 9.0).abs() < 1e-9);
    assert!((0.0..=100.0).contains(&r.emission_rate));
    assert_eq!(r.records().len(), 9);

    // Deterministic given the checkpoint.
    let again = run_chatsearch_eval(&model, &w, &bench, &store, &ChatEvalOptions::default()).unwrap();
    assert_eq!(r, again);

    let last = ChatEvalOptions {
        context: ContextMode::LastTurn,
        ..ChatEvalOptions::default()
    };
    let l = run_chatsearch_eval(&model, &w, &bench, &store, &last).unwrap();
    assert_eq!(l.context, ContextMode::LastTurn);
}

#[test]
fn caption_recall_is_bounded_and_ordered() {
    let w = world();
    let bench = small_bench(&w, 4);
    let model = Model::<f32>::new(tiny_config(&w)).unwrap();
    let store = w.feature_store(&model).unwrap();
    let [r1, r5, r10] = caption_recall(&model, &w, &store, &bench.gallery).unwrap();
    assert!(0.0 <= r1 && r1 <= r5 && r5 <= r10 && r10 <= 100.0);
}

#[test]
fn sweeps_report_one_point_per_value() {
    let w = world();
    let bench = small_bench(&w, 5);
    let cfg = tiny_config(&w);
    let model = Model::<f32>::new(cfg.clone()).unwrap();
    let store = w.feature_store(&model).unwrap();
    let docs = imgchat_core::synthworld::make_stage1_corpus(
        &w,
        &bench.train_pool,
        &imgchat_core::synthworld::Stage1CorpusConfig {
            docs: 40,
            ..Default::default()
        },
    )
    .unwrap();
    let set = stage1_set(&docs, &cfg).unwrap();
    let train = TrainConfig {
        total_steps: 3,
        warmup_steps: 1,
        batch_size: 4,
        ..TrainConfig::stage1()
    };
    let setup = SweepSetup {
        world: &w,
        store: &store,
        model_config: cfg,
        train_config: train,
        train_set: &set,
        gallery: &bench.gallery,
        bench: Some(&bench),
        model: Some(&model),
    };
    let q = ablation_sweep(&AblationAxis::QueueSize(vec![8, 16]), &setup).unwrap();
    assert_eq!(q.points.iter().map(|p| p.value.as_str()).collect::<Vec<_>>(), ["8", "16"]);
    assert_eq!(q.csv().lines().count(), 3);
    let f = ablation_sweep(&AblationAxis::FrozenBackbone, &setup).unwrap();
    assert_eq!(f.points.len(), 2);
    let h = ablation_sweep(&AblationAxis::History, &setup).unwrap();
    assert_eq!(h.points.iter().map(|p| p.value.as_str()).collect::<Vec<_>>(), ["full", "last_turn"]);

    let no_bench = SweepSetup { bench: None, ..setup };
    assert!(ablation_sweep(&AblationAxis::History, &no_bench).is_err());
}
