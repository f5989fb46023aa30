//! One PASS/FAIL line per headline criterion. Pass substrings as
//! arguments to run a subset, e.g.
//! `cargo test --test acceptance -- gradient queue`.

mod common;

use std::cell::Cell;
use std::fmt::Write as _;
use std::time::Instant;

use imgchat_core::eval::{
    ablation_sweep, caption_recall, fingerprint, random_baseline, random_ranking, recall_at_k, run_chatsearch_eval,
    subset_recall, AblationAxis, ChatEvalOptions, ContextMode, SweepSetup,
};
use imgchat_core::model::{FeatureStore, Model, ModelConfig};
use imgchat_core::objective::{image_match_prob, unified_loss, FeatureQueue, LossWeights, QueueEntry};
use imgchat_core::sequence::{ImageId, PackedSequence};
use imgchat_core::service::{replay, Engine, ImageInput, Session, Transcript, UserInput};
use imgchat_core::synthworld::{
    emit_benchmark, make_instruction_pools, make_stage1_corpus, Benchmark, BenchmarkConfig, InstructionPoolSizes,
    Stage1CorpusConfig, Subtask, World,
};
use imgchat_core::tensor::gradcheck::GradCheckOptions;
use imgchat_core::tensor::Graph;
use imgchat_core::trainer::{
    load_checkpoint, run_stage2, save_checkpoint, stage1_set, stage2_set, Checkpoint, InstructionCorpus, StepMetrics,
    TrainConfig, TrainSet, Trainer,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{check_model, check_op, model_case, OpKind};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Default-scale state shared by the training criteria.
struct Toy {
    world: World,
    bench: Benchmark,
    config: ModelConfig,
    store: FeatureStore,
    stage1_set: TrainSet,
    stage1: Option<Checkpoint>,
    stage2: Option<Model<f32>>,
}

impl Toy {
    fn new() -> Self {
        let world = common::world();
        let bench = emit_benchmark(&world, &BenchmarkConfig::default()).expect("benchmark");
        let config = ModelConfig::toy(world.vocab().len(), world.d_img());
        let store = world
            .feature_store(&Model::<f32>::new(config.clone()).expect("model"))
            .expect("features");
        let docs = make_stage1_corpus(&world, &bench.train_pool, &Stage1CorpusConfig::default()).expect("corpus");
        let stage1_set = stage1_set(&docs, &config).expect("stage-1 set");
        Self {
            world,
            bench,
            config,
            store,
            stage1_set,
            stage1: None,
            stage2: None,
        }
    }
}

fn progress(msg: &str) {
    eprintln!("  .. {msg}");
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut worst64 = (0.0f64, String::new());
    let mut worst32 = (0.0f64, String::new());
    let note = |w: &mut (f64, String), e: f64, what: String| {
        if e > w.0 {
            *w = (e, what);
        }
    };
    let o64 = GradCheckOptions { h: 1e-5, ..Default::default() };
    let o32 = GradCheckOptions { h: 1e-4, ..Default::default() };
    for kind in OpKind::ALL {
        let r = check_op::<f64>(kind, &o64).expect("op check");
        note(&mut worst64, r.max_rel_err(), format!("{kind:?}"));
        let r = check_op::<f32>(kind, &o32).expect("op check");
        note(&mut worst32, r.max_rel_err(), format!("{kind:?}"));
    }
    let w = common::world();
    let case = model_case(&w);
    let model = |seed, max_entries| GradCheckOptions { h: 1e-3, five_point: true, floor: 1e-4, max_entries, seed };
    let r = check_model::<f64>(&case, &model(3, 6)).expect("model check");
    note(&mut worst64, r.max_rel_err(), format!("model/{}", r.worst().map_or("", |p| p.name.as_str())));
    let r = check_model::<f32>(&case, &model(4, 4)).expect("model check");
    note(&mut worst32, r.max_rel_err(), format!("model/{}", r.worst().map_or("", |p| p.name.as_str())));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst64.0 < 1e-6 && worst32.0 < 1e-3 && secs < 60.0,
        format!(
            "{} ops + full model; max rel err 64-bit {:.2e} ({}), 32-bit {:.2e} ({}); {secs:.1} s",
            OpKind::ALL.len(),
            worst64.0,
            worst64.1,
            worst32.0,
            worst32.1
        ),
    )
}

fn image_match_probability() -> Verdict {
    let mut runner = TestRunner::new(Config { cases: 2000, failure_persistence: None, ..Config::default() });
    let max_err = Cell::new(0.0f64);
    let max_sum_err = Cell::new(0.0f64);
    let strat = (prop::collection::vec(-1.0f64..1.0, 3..=50), 0.02f64..10.0);
    let r = runner.run(&strat, |(sims, tau)| {
        let (queue, pos) = sims.split_at(sims.len() - 1);
        let p = image_match_prob(queue, Some(pos[0]), tau).expect("prob");
        let e: Vec<f64> = sims.iter().map(|s| (s / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            max_err.set(max_err.get().max((a - b / z).abs()));
        }
        max_sum_err.set(max_sum_err.get().max((p.iter().sum::<f64>() - 1.0).abs()));
        Ok(())
    });
    let (max_err, max_sum_err) = (max_err.get(), max_sum_err.get());
    verdict(
        r.is_ok() && max_err < 1e-9 && max_sum_err < 1e-6,
        format!("2000 cases, 3-50 candidates: max |p - brute force| {max_err:.1e}, max |sum - 1| {max_sum_err:.1e}"),
    )
}

fn queue_semantics() -> Verdict {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let strat = (1usize..32, prop::collection::vec(0usize..32, 0..40));
    let fifo = runner.run(&strat, |(capacity, batches)| {
        let mut q = FeatureQueue::new(capacity, 1);
        let mut naive: Vec<u32> = Vec::new();
        let mut next = 0u32;
        for n in batches {
            let n = n.min(capacity);
            let batch: Vec<QueueEntry> = (next..next + n as u32)
                .map(|i| QueueEntry { id: ImageId(i), f_cls: vec![i as f32] })
                .collect();
            q.enqueue_batch(&batch).expect("enqueue");
            naive.extend(next..next + n as u32);
            next += n as u32;
            let keep = naive.len().saturating_sub(capacity);
            naive.drain(..keep);
            let want: Vec<ImageId> = naive.iter().map(|&i| ImageId(i)).collect();
            prop_assert_eq!(q.ids(), want);
        }
        Ok(())
    });

    let w = common::world();
    let case = model_case(&w);
    let before = case.queue.clone();
    let refs: Vec<&PackedSequence> = case.batch.iter().collect();
    let mut g = Graph::new(&case.model.params);
    let fwd = case.model.forward(&mut g, &refs, &case.store).expect("forward");
    let out = unified_loss(&case.model, &mut g, &refs, &fwd, &case.queue, &case.store, LossWeights::default())
        .expect("loss");
    let grads = g.backward(out.total).expect("backward");
    let only_params = grads.iter().all(|(id, _)| id.0 < case.model.params.len());
    let traced = g.traced_constants();
    verdict(
        fifo.is_ok() && only_params && traced == 0 && case.queue == before,
        format!(
            "FIFO over 1000 randomized enqueue sequences: {}; constant leaves on the backward trace: {traced} of {}",
            if fifo.is_ok() { "holds" } else { "violated" },
            g.constants()
        ),
    )
}

fn within(x: f64, (mean, sd): (f64, f64)) -> bool {
    (x - mean).abs() <= 3.0 * sd
}

fn random_baselines(toy: &Toy) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ok = true;
    let mut s = String::new();

    // A 5000-image gallery.
    let (_, big) = toy.world.split_pools(5000, 15, 11).expect("pools");
    let n = 50_000;
    let mut hits = 0;
    for _ in 0..n {
        let t = big[rng.random_range(0..big.len())];
        hits += (random_ranking(&big, &mut rng)[0] == t) as usize;
    }
    let r1 = 100.0 * hits as f64 / n as f64;
    let b = random_baseline(1, 5000, n);
    ok &= within(r1, b) && (b.0 - 0.02).abs() < 1e-12;
    let _ = write!(s, "gallery 5000 R@1 {r1:.3}% (expect {:.2}% ± {:.3}); ", b.0, 3.0 * b.1);

    // Benchmark gallery of 500 with its own targets.
    let ranked: Vec<Vec<ImageId>> = toy.bench.samples.iter().map(|_| random_ranking(&toy.bench.gallery, &mut rng)).collect();
    let targets: Vec<ImageId> = toy.bench.samples.iter().map(|s| s.target).collect();
    for k in [1, 5, 10] {
        let (r, _) = recall_at_k(&ranked, &targets, k).expect("recall");
        let b = random_baseline(k, 500, targets.len());
        ok &= within(r, b);
        if k == 1 {
            ok &= (b.0 - 0.2).abs() < 1e-12;
        }
        let _ = write!(s, "gallery 500 R@{k} {r:.2}% (expect {:.2}); ", b.0);
    }

    // Subset recall over the six-image subsets, each query drawn 20 times.
    let ichat: Vec<_> = toy.bench.by_subtask(Subtask::Ichat).collect();
    let reps = 20;
    let ranked: Vec<Vec<ImageId>> = (0..reps * ichat.len()).map(|_| random_ranking(&toy.bench.gallery, &mut rng)).collect();
    let targets: Vec<ImageId> = ichat.iter().map(|s| s.target).cycle().take(ranked.len()).collect();
    let subsets: Vec<Vec<ImageId>> = ichat.iter().map(|s| s.subset.clone().expect("subset")).cycle().take(ranked.len()).collect();
    let mut sub = Vec::new();
    for k in 1..=3 {
        let r = subset_recall(&ranked, &targets, &subsets, k).expect("subset recall");
        ok &= within(r, random_baseline(k, 6, ranked.len()));
        sub.push(format!("{r:.2}"));
    }
    let _ = write!(s, "subset R@1/2/3 {} (expect 16.67/33.33/50.00)", sub.join("/"));
    verdict(ok, s)
}

fn stage1_alignment(toy: &mut Toy) -> Verdict {
    let cfg = TrainConfig::stage1();
    let ln = ((cfg.queue_capacity + 1) as f64).ln();
    let model = Model::<f32>::new(toy.config.clone()).expect("model");
    let init = caption_recall(&model, &toy.world, &toy.store, &toy.bench.gallery).expect("recall");
    let start = Instant::now();
    let mut t = Trainer::new(model, cfg.clone()).expect("trainer");
    t.warm_fill(&toy.stage1_set.images, &toy.store).expect("warm fill");
    let mut first = None;
    let mut last_report = Instant::now();
    t.run(&toy.stage1_set, &toy.store, |_, m| {
        if first.is_none() {
            first = m.retrieval_loss;
        }
        if last_report.elapsed().as_secs() >= 60 {
            progress(&format!("stage 1 step {} loss {:.3}", m.step, m.loss));
            last_report = Instant::now();
        }
        Ok(())
    })
    .expect("stage 1");
    let secs = start.elapsed().as_secs_f64();
    let [r1, r5, r10] = caption_recall(&t.model, &toy.world, &toy.store, &toy.bench.gallery).expect("recall");
    let init_loss = first.unwrap_or(f64::NAN);
    let rel = (init_loss - ln).abs() / ln;
    toy.stage1 = Some(Checkpoint::from_trainer(&t));
    verdict(
        secs <= 600.0 && r1 >= 80.0 && rel <= 0.10,
        format!(
            "{} steps in {secs:.0} s on {} thread(s); caption R@1/5/10 {r1:.1}/{r5:.1}/{r10:.1} on {} images (init R@1 {:.1}); init retrieval loss {init_loss:.3} vs ln({}) = {ln:.3} ({:+.1}%)",
            cfg.total_steps,
            std::thread::available_parallelism().map_or(1, |n| n.get()),
            toy.bench.gallery.len(),
            init[0],
            cfg.queue_capacity + 1,
            100.0 * (init_loss - ln) / ln
        ),
    )
}

fn stage2_gains(toy: &mut Toy) -> Verdict {
    let Some(ck) = toy.stage1.as_ref() else {
        return verdict(false, "needs the stage-1 criterion in the same run".into());
    };
    let full = ChatEvalOptions::default();
    let last = ChatEvalOptions { context: ContextMode::LastTurn, ..full };
    let m1 = ck.model().expect("stage-1 model");
    let before = run_chatsearch_eval(&m1, &toy.world, &toy.bench, &toy.store, &full).expect("eval");

    let pools = make_instruction_pools(&toy.world, &toy.bench.train_pool, &InstructionPoolSizes::default()).expect("pools");
    let corpus = InstructionCorpus::from_pools(&pools);
    let cfg = TrainConfig::stage2();
    let set = stage2_set(&toy.world, &corpus, &cfg.mixture, &toy.config).expect("stage-2 set");
    let start = Instant::now();
    let t = run_stage2(ck, &set, &toy.store, cfg.clone(), |_, _| Ok(())).expect("stage 2");
    let secs = start.elapsed().as_secs_f64();
    let after = run_chatsearch_eval(&t.model, &toy.world, &toy.bench, &toy.store, &full).expect("eval");
    let lt = run_chatsearch_eval(&t.model, &toy.world, &toy.bench, &toy.store, &last).expect("eval");
    let avg = |r: &imgchat_core::eval::RecallReport| r.subtask_average(Subtask::Mchat).unwrap_or(0.0);
    let r5 = |r: &imgchat_core::eval::RecallReport| r.cell(Subtask::Mchat).map_or(0.0, |c| c.r5);
    let gain = avg(&after) - avg(&before);
    let hist = r5(&after) - r5(&lt);
    toy.stage2 = Some(t.model);
    verdict(
        gain >= 10.0 && hist >= 5.0 && after.emission_rate >= 90.0,
        format!(
            "mchat average {:.2} vs stage-1-only {:.2} ({gain:+.2}); mchat R@5 full {:.2} vs last turn {:.2} ({hist:+.2}); [IMG] emission {:.1}% on {} prompts; {} steps in {secs:.0} s",
            avg(&after),
            avg(&before),
            r5(&after),
            r5(&lt),
            after.emission_rate,
            toy.bench.samples.len(),
            cfg.total_steps
        ),
    )
}

fn ablation_directions(toy: &Toy) -> Verdict {
    let train = TrainConfig {
        total_steps: 300,
        warmup_steps: 30,
        ..TrainConfig::stage1()
    };
    let setup = SweepSetup {
        world: &toy.world,
        store: &toy.store,
        model_config: toy.config.clone(),
        train_config: train,
        train_set: &toy.stage1_set,
        gallery: &toy.bench.gallery,
        bench: None,
        model: None,
    };
    let q = ablation_sweep(&AblationAxis::QueueSize(vec![32, 128, 512]), &setup).expect("queue sweep");
    let f = ablation_sweep(&AblationAxis::FrozenBackbone, &setup).expect("frozen sweep");
    let qa: Vec<f64> = q.points.iter().map(|p| p.average).collect();
    let monotone = qa.windows(2).all(|w| w[1] >= w[0] - 1.0);
    let (trainable, frozen) = (f.points[0].average, f.points[1].average);
    verdict(
        monotone && frozen <= trainable,
        format!(
            "caption recall average after 300 steps: queue 32/128/512 -> {}; trainable {trainable:.2} vs frozen {frozen:.2}",
            qa.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join("/")
        ),
    )
}

fn loss_bits(ms: &[StepMetrics]) -> Vec<u64> {
    ms.iter().map(|m| m.loss.to_bits()).collect()
}

fn reproducibility(toy: &Toy) -> Verdict {
    let cfg = TrainConfig {
        total_steps: 8,
        warmup_steps: 2,
        batch_size: 8,
        queue_capacity: 64,
        ..TrainConfig::stage1()
    };
    let trace = |stop: u64, resume: Option<&std::path::Path>| -> (Vec<StepMetrics>, String) {
        let mut t = match resume {
            Some(p) => load_checkpoint(p).expect("load").into_trainer().expect("trainer"),
            None => {
                let mut t = Trainer::new(Model::new(toy.config.clone()).expect("model"), cfg.clone()).expect("trainer");
                t.warm_fill(&toy.stage1_set.images, &toy.store).expect("warm fill");
                t
            }
        };
        let mut ms = Vec::new();
        while t.step < stop {
            let b = t.sample_batch(&toy.stage1_set).expect("batch");
            ms.push(t.train_step(&b, &toy.store).expect("step"));
        }
        (ms, fingerprint(&t.model))
    };
    let (a, fa) = trace(8, None);
    let (b, fb) = trace(8, None);
    let same_seed = loss_bits(&a) == loss_bits(&b) && fa == fb;

    let dir = tempfile::tempdir().expect("tempdir");
    let mid = dir.path().join("mid.ckpt");
    let mut t = Trainer::new(Model::new(toy.config.clone()).expect("model"), cfg.clone()).expect("trainer");
    t.warm_fill(&toy.stage1_set.images, &toy.store).expect("warm fill");
    let mut head = Vec::new();
    while t.step < 4 {
        let batch = t.sample_batch(&toy.stage1_set).expect("batch");
        head.push(t.train_step(&batch, &toy.store).expect("step"));
    }
    save_checkpoint(&mut t, &mid).expect("save");
    drop(t);
    let (tail, fc) = trace(8, Some(&mid));
    head.extend(tail);
    let resumed = loss_bits(&head) == loss_bits(&a) && fc == fa;

    let (replayed, turns) = match toy.stage2.as_ref() {
        Some(m) => session_replay(toy, m.clone()),
        None => (false, 0),
    };
    verdict(
        same_seed && resumed && replayed,
        format!(
            "same-seed traces bit-identical: {same_seed}; save/load/continue equals uninterrupted: {resumed}; transcript replay ({turns} turns) identical: {replayed}"
        ),
    )
}

/// A scripted session on the trained model, replayed from its JSON
/// transcript.
fn session_replay(toy: &Toy, model: Model<f32>) -> (bool, usize) {
    let engine = Engine::new(model, toy.world.clone(), toy.store.clone(), &toy.bench.gallery, 10).expect("engine");
    let mut s = Session::new("acceptance");
    let say = |text: &str, images: Vec<ImageInput>| UserInput { text: text.into(), images, force_retrieval: false };
    let pick = |s: &mut Session, input: UserInput, nth: usize| {
        let r = s.post_user_turn(&engine, input).expect("turn");
        match r.candidates.get(nth) {
            Some(c) => s.select(c.image_id).expect("select"),
            None if s.pending.is_some() => s.dismiss().expect("dismiss"),
            None => {}
        }
    };
    let probe = toy.bench.gallery[3];
    pick(&mut s, say("i am looking for a photo of a red dog", vec![]), 0);
    pick(&mut s, say("same but on grass", vec![]), 2);
    pick(&mut s, say("hello", vec![]), 0);
    pick(&mut s, say("same but blue", vec![ImageInput::Id(probe)]), 1);
    pick(&mut s, say("same but small", vec![ImageInput::Upload(toy.world.image(ImageId(7)).raw.clone())]), 0);
    let t = s.transcript(&engine);
    let json = serde_json::to_string(&t).expect("serialize");
    let back: Transcript = serde_json::from_str(&json).expect("parse");
    let rep = replay(&engine, &back).expect("replay");
    (rep.identical() && rep.turns == 5, rep.turns)
}

fn benchmark_integrity(toy: &Toy) -> Verdict {
    let s = &toy.bench.stats;
    let amb = 100.0 * s.merged_ambiguous_last_round as f64 / s.merged.max(1) as f64;
    verdict(
        s.unique == s.samples && s.merged > 0 && amb >= 95.0,
        format!(
            "{}/{} samples uniquely resolvable; {}/{} merged samples ({amb:.1}%) ambiguous from the last round alone",
            s.unique, s.samples, s.merged_ambiguous_last_round, s.merged
        ),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let names = [
        "gradient_correctness",
        "image_match_probability",
        "queue_semantics",
        "random_baselines",
        "stage1_alignment",
        "stage2_conversational_gains",
        "ablation_directions",
        "reproducibility",
        "benchmark_integrity",
    ];
    let needs_toy = names[3..].iter().any(|n| wanted(n));
    let mut toy = needs_toy.then(Toy::new);
    let mut failed = 0;
    let mut ran = 0;
    for name in names {
        if !wanted(name) {
            continue;
        }
        let start = Instant::now();
        let v = match name {
            "gradient_correctness" => gradient_correctness(),
            "image_match_probability" => image_match_probability(),
            "queue_semantics" => queue_semantics(),
            _ => {
                let toy = toy.as_mut().expect("toy setup");
                if name == "stage2_conversational_gains" || name == "reproducibility" {
                    if toy.stage1.is_none() && wanted(name) {
                        progress("training stage 1 first");
                        let _ = stage1_alignment(toy);
                    }
                    if name == "reproducibility" && toy.stage2.is_none() {
                        progress("training stage 2 first");
                        let _ = stage2_gains(toy);
                    }
                }
                match name {
                    "random_baselines" => random_baselines(toy),
                    "stage1_alignment" => stage1_alignment(toy),
                    "stage2_conversational_gains" => stage2_gains(toy),
                    "ablation_directions" => ablation_directions(toy),
                    "reproducibility" => reproducibility(toy),
                    _ => benchmark_integrity(toy),
                }
            }
        };
        ran += 1;
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
