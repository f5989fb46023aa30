use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tracing::info;

use imgchat_core::eval::{
    ablation_sweep, caption_recall, run_chatsearch_eval, AblationAxis, ChatEvalOptions, ContextMode, SweepSetup,
};
use imgchat_core::model::{Model, ModelConfig};
use imgchat_core::sequence::QueryPosition;
use imgchat_core::service::{router, Engine, SessionService};
use imgchat_core::synthworld::{
    emit_benchmark, make_instruction_pools, make_stage1_corpus, read_benchmark, write_benchmark, Benchmark,
    BenchmarkConfig, InstructionPoolSizes, Stage1CorpusConfig, World, WorldSpec,
};
use imgchat_core::trainer::{
    load_checkpoint, read_instruction_corpus, read_stage1_corpus, save_checkpoint, stage1_set, stage2_set,
    write_instruction_corpus, write_stage1_corpus, InstructionCorpus, StepMetrics, TrainConfig, TrainError,
    Trainer,
};

#[derive(Parser)]
#[command(name = "imgchat", version, about = "Generative conversational image retrieval at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit the synthetic benchmark and both training corpora.
    GenData(GenData),
    /// Alignment training from a fresh model.
    Stage1(Stage1Args),
    /// Instruction tuning from a stage-1 checkpoint.
    Stage2(Stage2Args),
    /// Benchmark recall, caption recall or an ablation sweep.
    Eval(EvalArgs),
    /// HTTP session service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    world_seed: u64,
    #[arg(long, default_value_t = 500)]
    test_pool: usize,
    #[arg(long, default_value_t = 5)]
    per_family: usize,
    #[arg(long, default_value_t = 500)]
    tchat: usize,
    #[arg(long, default_value_t = 1000)]
    ichat: usize,
    #[arg(long, default_value_t = 1000)]
    mchat: usize,
    #[arg(long, default_value_t = 11)]
    bench_seed: u64,
    #[arg(long, default_value_t = 5000)]
    stage1_docs: usize,
    #[arg(long, default_value_t = 0.3)]
    interleaved_frac: f64,
    #[arg(long, default_value_t = 21)]
    stage1_seed: u64,
    #[arg(long, default_value_t = 2000)]
    chatsearch_pool: usize,
    #[arg(long, default_value_t = 2000)]
    qa_pool: usize,
    #[arg(long, default_value_t = 1000)]
    edit_pool: usize,
    #[arg(long, default_value_t = 31)]
    pool_seed: u64,
}

/// Every TrainConfig field; unset flags keep the stage default (or the
/// value from `--config`).
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// JSON TrainConfig to start from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    queue_capacity: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    mix_qa: Option<f64>,
    #[arg(long)]
    mix_chatsearch: Option<f64>,
    #[arg(long)]
    mix_edit: Option<f64>,
    #[arg(long)]
    text_weight: Option<f64>,
    #[arg(long)]
    image_weight: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    freeze_backbone: Option<bool>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    divergence_factor: Option<f64>,
    #[arg(long)]
    divergence_window: Option<u64>,
}

impl TrainFlags {
    fn apply(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => base,
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { c.$($field).+ = v; })*
            };
        }
        set!(
            peak_lr => peak_lr,
            warmup_steps => warmup_steps,
            total_steps => total_steps,
            batch_size => batch_size,
            queue_capacity => queue_capacity,
            seed => seed,
            eval_every => eval_every,
            checkpoint_every => checkpoint_every,
            mix_qa => mixture.qa,
            mix_chatsearch => mixture.chatsearch,
            mix_edit => mixture.edit,
            text_weight => loss_weights.text,
            image_weight => loss_weights.image,
            beta1 => adam.beta1,
            beta2 => adam.beta2,
            eps => adam.eps,
            weight_decay => adam.weight_decay,
            freeze_backbone => freeze_backbone,
            dropout => dropout,
            divergence_factor => divergence.factor,
            divergence_window => divergence.window,
        );
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryAt {
    Img,
    Cls,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_latents: Option<usize>,
    #[arg(long)]
    d_retrieval: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long)]
    temperature_init: Option<f64>,
    #[arg(long, value_enum)]
    query_at: Option<QueryAt>,
    #[arg(long)]
    model_seed: Option<u64>,
}

impl ModelFlags {
    fn build(&self, world: &World) -> ModelConfig {
        let mut c = ModelConfig::toy(world.vocab().len(), world.d_img());
        let set = |t: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *t = v;
            }
        };
        set(&mut c.d_model, self.d_model);
        set(&mut c.n_layers, self.n_layers);
        set(&mut c.n_heads, self.n_heads);
        set(&mut c.n_latents, self.n_latents);
        set(&mut c.d_retrieval, self.d_retrieval);
        set(&mut c.max_seq, self.max_seq);
        if let Some(t) = self.temperature_init {
            c.temperature_init = t;
        }
        if let Some(q) = self.query_at {
            c.query_at = match q {
                QueryAt::Img => QueryPosition::Img,
                QueryAt::Cls => QueryPosition::Cls,
            };
        }
        if let Some(s) = self.model_seed {
            c.seed = s;
        }
        c
    }
}

#[derive(Args)]
struct RunOut {
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Final checkpoint path; periodic ones get a `.step<N>` suffix.
    #[arg(long)]
    out: PathBuf,
    /// Line-delimited JSON metrics; stdout when absent.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue an interrupted run of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Stage1Args {
    #[command(flatten)]
    run: RunOut,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct Stage2Args {
    #[command(flatten)]
    run: RunOut,
    /// Stage-1 checkpoint.
    #[arg(long)]
    init: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum HistoryArg {
    Full,
    LastTurn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    QueueSize,
    FrozenBackbone,
    History,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    context: HistoryArg,
    #[arg(long, default_value_t = 8)]
    max_new: usize,
    /// Caption-to-image recall on the gallery instead of the benchmark.
    #[arg(long)]
    captions: bool,
    /// One JSON record per report cell.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, value_enum)]
    sweep: Option<Sweep>,
    #[arg(long, value_delimiter = ',', default_value = "32,128,512")]
    queue_sizes: Vec<usize>,
    /// Sweep trend as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Stage-1 settings for sweep runs.
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Persist sessions here so they survive restarts.
    #[arg(long)]
    sessions: Option<PathBuf>,
}

fn gen_data(a: &GenData) -> Result<()> {
    let world = World::new(WorldSpec {
        seed: a.world_seed,
        ..WorldSpec::default()
    })?;
    let bench = emit_benchmark(
        &world,
        &BenchmarkConfig {
            test_pool: a.test_pool,
            per_family: a.per_family,
            tchat: a.tchat,
            ichat: a.ichat,
            mchat: a.mchat,
            seed: a.bench_seed,
        },
    )?;
    write_benchmark(&world, &bench, &a.out)?;
    let docs = make_stage1_corpus(
        &world,
        &bench.train_pool,
        &Stage1CorpusConfig {
            docs: a.stage1_docs,
            interleaved_frac: a.interleaved_frac,
            seed: a.stage1_seed,
            ..Stage1CorpusConfig::default()
        },
    )?;
    write_stage1_corpus(&a.out, &docs, world.vocab())?;
    let pools = make_instruction_pools(
        &world,
        &bench.train_pool,
        &InstructionPoolSizes {
            chatsearch: a.chatsearch_pool,
            qa: a.qa_pool,
            edit: a.edit_pool,
            seed: a.pool_seed,
            ..InstructionPoolSizes::default()
        },
    )?;
    let corpus = InstructionCorpus::from_pools(&pools);
    write_instruction_corpus(&a.out, &corpus)?;
    let s = &bench.stats;
    info!(
        samples = s.samples,
        unique = s.unique,
        merged = s.merged,
        ambiguous = s.merged_ambiguous_last_round,
        "benchmark written to {}",
        a.out.display()
    );
    println!(
        "{}",
        json!({
            "out": a.out,
            "gallery": bench.gallery.len(),
            "train_pool": bench.train_pool.len(),
            "stats": s,
            "stage1_docs": docs.len(),
            "instruction": { "qa": corpus.qa.len(), "chatsearch": corpus.chatsearch.len(), "edit": corpus.edit.len() },
        })
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<(World, Benchmark)> {
    read_benchmark(dir).with_context(|| format!("reading benchmark in {}", dir.display()))
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| p.display().to_string())?)),
        None => Box::new(std::io::stdout()),
    })
}

fn record(out: &mut dyn Write, kind: &str, body: serde_json::Value) -> Result<(), TrainError> {
    let mut v = json!({ "kind": kind });
    if let (Some(o), serde_json::Value::Object(b)) = (v.as_object_mut(), body) {
        o.extend(b);
    }
    writeln!(out, "{v}")
        .and_then(|_| out.flush())
        .map_err(|e| TrainError::Config(format!("metrics sink: {e}")))
}

fn step_path(out: &Path, step: u64) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".step{step}"));
    PathBuf::from(s)
}

/// Observer shared by both stages: metrics, periodic evals, checkpoints.
fn observer<'a>(
    out: &'a mut dyn Write,
    ckpt: &'a Path,
    mut evaluate: impl FnMut(&Trainer) -> Result<serde_json::Value, TrainError> + 'a,
) -> impl FnMut(&mut Trainer, &StepMetrics) -> Result<(), TrainError> + 'a {
    move |t, m| {
        record(out, "step", serde_json::to_value(m).expect("metrics"))?;
        let c = &t.config;
        if c.eval_every > 0 && m.step % c.eval_every == 0 {
            let v = evaluate(t)?;
            record(out, "eval", json!({ "step": m.step, "result": v }))?;
        }
        if c.checkpoint_every > 0 && m.step % c.checkpoint_every == 0 && !t.is_done() {
            save_checkpoint(t, &step_path(ckpt, m.step))?;
        }
        Ok(())
    }
}

fn train_err(e: impl std::fmt::Display) -> TrainError {
    TrainError::Config(e.to_string())
}

fn stage1(a: &Stage1Args) -> Result<()> {
    let (world, bench) = load_data(&a.run.data)?;
    let (mut trainer, store, set) = match &a.run.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let t = ck.into_trainer()?;
            let docs = read_stage1_corpus(&a.run.data, world.vocab())?;
            let set = stage1_set(&docs, &t.model.config)?;
            let store = world.feature_store(&t.model)?;
            (t, store, set)
        }
        None => {
            let cfg = a.train.apply(TrainConfig::stage1())?;
            let model = Model::<f32>::new(a.model.build(&world))?;
            let docs = read_stage1_corpus(&a.run.data, world.vocab())?;
            let set = stage1_set(&docs, &model.config)?;
            let store = world.feature_store(&model)?;
            let mut t = Trainer::new(model, cfg)?;
            t.warm_fill(&set.images, &store)?;
            (t, store, set)
        }
    };
    info!(sequences = set.len(), step = trainer.step, "stage 1");
    let mut out = sink(&a.run.metrics)?;
    let gallery = bench.gallery.clone();
    let obs = observer(out.as_mut(), &a.run.out, |t| {
        let r = caption_recall(&t.model, &world, &store, &gallery).map_err(train_err)?;
        Ok(json!({ "caption_recall": r }))
    });
    trainer.run(&set, &store, obs)?;
    save_checkpoint(&mut trainer, &a.run.out)?;
    info!("checkpoint written to {}", a.run.out.display());
    Ok(())
}

fn stage2(a: &Stage2Args) -> Result<()> {
    let (world, bench) = load_data(&a.run.data)?;
    let corpus = read_instruction_corpus(&a.run.data)?;
    let (mut trainer, store, set) = match &a.run.resume {
        Some(p) => {
            let t = load_checkpoint(p)?.into_trainer()?;
            let set = stage2_set(&world, &corpus, &t.config.mixture, &t.model.config)?;
            let store = world.feature_store(&t.model)?;
            (t, store, set)
        }
        None => {
            let init = load_checkpoint(&a.init)?;
            let cfg = a.train.apply(TrainConfig::stage2())?;
            let set = stage2_set(&world, &corpus, &cfg.mixture, &init.model_config)?;
            let store = world.feature_store(&init.model()?)?;
            let t = imgchat_core::trainer::prepare_stage2(&init, &set, &store, cfg)?;
            (t, store, set)
        }
    };
    info!(sequences = set.len(), step = trainer.step, "stage 2");
    let mut out = sink(&a.run.metrics)?;
    let opts = ChatEvalOptions::default();
    let obs = observer(out.as_mut(), &a.run.out, |t| {
        let r = run_chatsearch_eval(&t.model, &world, &bench, &store, &opts).map_err(train_err)?;
        Ok(json!({ "average": r.average, "emission_rate": r.emission_rate }))
    });
    trainer.run(&set, &store, obs)?;
    save_checkpoint(&mut trainer, &a.run.out)?;
    info!("checkpoint written to {}", a.run.out.display());
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| path.display().to_string())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (world, bench) = load_data(&a.data)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model()?;
    let store = world.feature_store(&model)?;
    if let Some(axis) = a.sweep {
        let axis = match axis {
            Sweep::QueueSize => AblationAxis::QueueSize(a.queue_sizes.clone()),
            Sweep::FrozenBackbone => AblationAxis::FrozenBackbone,
            Sweep::History => AblationAxis::History,
        };
        let docs = read_stage1_corpus(&a.data, world.vocab())?;
        let set = stage1_set(&docs, &model.config)?;
        let setup = SweepSetup {
            world: &world,
            store: &store,
            model_config: ck.model_config.clone(),
            train_config: a.train.apply(TrainConfig::stage1())?,
            train_set: &set,
            gallery: &bench.gallery,
            bench: Some(&bench),
            model: Some(&model),
        };
        let r = ablation_sweep(&axis, &setup)?;
        print!("{}", r.table());
        if let Some(p) = &a.csv {
            write_file(p, &r.csv())?;
        }
        if let Some(p) = &a.json {
            write_file(p, &serde_json::to_string_pretty(&r)?)?;
        }
        return Ok(());
    }
    if a.captions {
        let [r1, r5, r10] = caption_recall(&model, &world, &store, &bench.gallery)?;
        let v = json!({ "gallery": bench.gallery.len(), "r1": r1, "r5": r5, "r10": r10 });
        println!("{v}");
        if let Some(p) = &a.json {
            write_file(p, &v.to_string())?;
        }
        return Ok(());
    }
    let opts = ChatEvalOptions {
        context: match a.context {
            HistoryArg::Full => ContextMode::Full,
            HistoryArg::LastTurn => ContextMode::LastTurn,
        },
        max_new: a.max_new,
    };
    let r = run_chatsearch_eval(&model, &world, &bench, &store, &opts)?;
    print!("{}", r.table());
    if let Some(p) = &a.json {
        let mut s = String::new();
        for rec in r.records() {
            s.push_str(&rec.to_string());
            s.push('\n');
        }
        write_file(p, &s)?;
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let (world, bench) = load_data(&a.data)?;
    let model = load_checkpoint(&a.checkpoint)?.model()?;
    let store = world.feature_store(&model)?;
    let engine = Arc::new(Engine::new(model, world, store, &bench.gallery, a.k)?);
    let svc = match &a.sessions {
        Some(d) => SessionService::open(engine, d)?,
        None => SessionService::new(engine),
    };
    let app = router(Arc::new(svc));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Stage1(a) => stage1(a),
        Cmd::Stage2(a) => stage2(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Serve(a) => serve(a),
    }
}
