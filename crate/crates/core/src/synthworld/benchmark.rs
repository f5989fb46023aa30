use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::recipes::{
    make_mdc_i, make_mdc_t, make_text_dialogue, merge_contexts, top_neighbors, DialogueSample,
    Provenance, Subtask,
};
use super::resolve::{resolve, resolve_last_round};
use super::{Attr, World, WorldError, WorldSpec};
use crate::sequence::corpus::{read_jsonl, write_jsonl, CorpusRecord, CORPUS_SCHEMA};
use crate::sequence::ImageId;

pub const BENCHMARK_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Held-out images; the test gallery is exactly this pool.
    pub test_pool: usize,
    /// Test-pool members drawn from each sampled attribute family.
    pub per_family: usize,
    pub tchat: usize,
    pub ichat: usize,
    pub mchat: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    /// 500-image gallery, 2500 samples.
    fn default() -> Self {
        Self {
            test_pool: 500,
            per_family: 5,
            tchat: 500,
            ichat: 1000,
            mchat: 1000,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityStats {
    pub samples: usize,
    pub unique: usize,
    pub merged: usize,
    pub merged_ambiguous_last_round: usize,
    pub resamples: usize,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub train_pool: Vec<ImageId>,
    pub gallery: Vec<ImageId>,
    pub samples: Vec<DialogueSample>,
    pub stats: IntegrityStats,
}

impl Benchmark {
    pub fn by_subtask(&self, t: Subtask) -> impl Iterator<Item = &DialogueSample> {
        self.samples.iter().filter(move |s| s.subtask == t)
    }
}

const MAX_ATTEMPTS: usize = 200;

/// Draws until `make` yields a sample whose full context resolves to its
/// target alone.
fn draw<R: Rng>(
    world: &World,
    gallery: &[ImageId],
    rng: &mut R,
    resamples: &mut usize,
    mut make: impl FnMut(&mut R) -> Result<DialogueSample, WorldError>,
) -> Result<DialogueSample, WorldError> {
    for _ in 0..MAX_ATTEMPTS {
        match make(rng) {
            Ok(s) if resolve(world, gallery, &s.context) == vec![s.target] => return Ok(s),
            _ => *resamples += 1,
        }
    }
    Err(WorldError::Size("could not draw a resolvable sample".into()))
}

/// Generates `count` samples of a subtask over `gallery`.
pub fn generate_samples<R: Rng>(
    world: &World,
    gallery: &[ImageId],
    subtask: Subtask,
    count: usize,
    rng: &mut R,
    resamples: &mut usize,
) -> Result<Vec<DialogueSample>, WorldError> {
    let mut out = Vec::with_capacity(count);
    let mut order: Vec<ImageId> = gallery.to_vec();
    for i in 0..count {
        if i % order.len() == 0 {
            order.shuffle(rng);
        }
        let anchor = order[i % order.len()];
        let s = match subtask {
            Subtask::Tchat => draw(world, gallery, rng, resamples, |r| {
                let rounds = r.random_range(2..=3);
                make_text_dialogue(world, gallery, anchor, rounds, r)
            })?,
            Subtask::Ichat => draw(world, gallery, rng, resamples, |r| {
                let src = *gallery.choose(r).expect("gallery");
                make_mdc_i(world, gallery, src, r)
            })?,
            Subtask::Mchat if i % 2 == 0 => draw(world, gallery, rng, resamples, |r| {
                let src = *gallery.choose(r).expect("gallery");
                make_mdc_t(world, gallery, src, r)
            })?,
            Subtask::Mchat => draw(world, gallery, rng, resamples, |r| {
                let src = *gallery.choose(r).expect("gallery");
                let text = make_text_dialogue(world, gallery, src, 2, r)?;
                let image = make_mdc_i(world, gallery, src, r)?;
                merge_contexts(world, gallery, &text, &image)
            })?,
        };
        out.push(s);
    }
    Ok(out)
}

/// Six candidates for subset recall: the target and its five nearest
/// gallery neighbours, in ascending id order.
pub fn subset_for(world: &World, gallery: &[ImageId], target: ImageId) -> Vec<ImageId> {
    let mut s: Vec<ImageId> = top_neighbors(world, gallery, target, 5)
        .into_iter()
        .map(|(g, _)| g)
        .collect();
    s.push(target);
    s.sort_unstable();
    s
}

/// Builds disjoint train/test pools and the test samples. Every sample is
/// checked against the gallery by exhaustive scan.
pub fn emit_benchmark(world: &World, config: &BenchmarkConfig) -> Result<Benchmark, WorldError> {
    let (train_pool, gallery) = world.split_pools(config.test_pool, config.per_family, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut resamples = 0;
    let mut samples = Vec::new();
    for (t, n) in [
        (Subtask::Tchat, config.tchat),
        (Subtask::Ichat, config.ichat),
        (Subtask::Mchat, config.mchat),
    ] {
        samples.extend(generate_samples(world, &gallery, t, n, &mut rng, &mut resamples)?);
    }
    for s in samples.iter_mut().filter(|s| s.subtask == Subtask::Ichat) {
        s.subset = Some(subset_for(world, &gallery, s.target));
    }
    let stats = integrity(world, &gallery, &samples, resamples);
    Ok(Benchmark {
        config: config.clone(),
        train_pool,
        gallery,
        samples,
        stats,
    })
}

/// Exhaustive-scan integrity counts.
pub fn integrity(
    world: &World,
    gallery: &[ImageId],
    samples: &[DialogueSample],
    resamples: usize,
) -> IntegrityStats {
    let unique = samples
        .iter()
        .filter(|s| resolve(world, gallery, &s.context) == vec![s.target])
        .count();
    let merged: Vec<_> = samples
        .iter()
        .filter(|s| s.provenance == Provenance::Merged)
        .collect();
    let ambiguous = merged
        .iter()
        .filter(|s| resolve_last_round(world, gallery, &s.context).len() >= 2)
        .count();
    IntegrityStats {
        samples: samples.len(),
        unique,
        merged: merged.len(),
        merged_ambiguous_last_round: ambiguous,
        resamples,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    corpus_schema: u32,
    world: WorldSpec,
    config: BenchmarkConfig,
    counts: Vec<(Subtask, usize)>,
    stats: IntegrityStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryRecord {
    pub id: ImageId,
    pub attrs: Vec<(Attr, String)>,
    pub f_cls: Vec<f32>,
    pub regions: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleMeta {
    target: ImageId,
    subtask: Subtask,
    provenance: Provenance,
    #[serde(default)]
    source: Option<ImageId>,
    #[serde(default)]
    subset: Option<Vec<ImageId>>,
}

fn io<E: std::fmt::Display>(e: E) -> WorldError {
    WorldError::Io(e.to_string())
}

pub fn gallery_record(world: &World, id: ImageId) -> GalleryRecord {
    let img = world.image(id);
    GalleryRecord {
        id,
        attrs: Attr::ALL
            .iter()
            .map(|&a| (a, world.value_word(a, img.get(a)).to_string()))
            .collect(),
        f_cls: img.raw.global.clone(),
        regions: img.raw.regions.clone(),
    }
}

/// Writes `manifest.json`, `aliases.json`, `gallery.jsonl`, `train_pool.json`
/// and one `<subtask>.jsonl` per subtask into `dir`.
pub fn write_benchmark(world: &World, b: &Benchmark, dir: &Path) -> Result<(), WorldError> {
    std::fs::create_dir_all(dir).map_err(io)?;
    let manifest = Manifest {
        schema: BENCHMARK_SCHEMA,
        corpus_schema: CORPUS_SCHEMA,
        world: world.spec.clone(),
        config: b.config.clone(),
        counts: Subtask::ALL
            .iter()
            .map(|&t| (t, b.by_subtask(t).count()))
            .collect(),
        stats: b.stats.clone(),
    };
    let mut f = BufWriter::new(File::create(dir.join("manifest.json")).map_err(io)?);
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(io)?;
    f.flush().map_err(io)?;
    std::fs::write(
        dir.join("aliases.json"),
        serde_json::to_string_pretty(&world.spec.aliases).map_err(io)?,
    )
    .map_err(io)?;
    std::fs::write(
        dir.join("train_pool.json"),
        serde_json::to_string(&b.train_pool).map_err(io)?,
    )
    .map_err(io)?;
    let gallery: Vec<GalleryRecord> = b.gallery.iter().map(|&id| gallery_record(world, id)).collect();
    let f = BufWriter::new(File::create(dir.join("gallery.jsonl")).map_err(io)?);
    write_jsonl(f, &gallery).map_err(io)?;
    for t in Subtask::ALL {
        let recs: Vec<CorpusRecord> = b
            .by_subtask(t)
            .map(|s| {
                let mut r = CorpusRecord::from_dialogue(&s.context);
                r.meta = serde_json::to_value(SampleMeta {
                    target: s.target,
                    subtask: s.subtask,
                    provenance: s.provenance,
                    source: s.source,
                    subset: s.subset.clone(),
                })
                .expect("meta");
                r
            })
            .collect();
        let f = BufWriter::new(File::create(dir.join(format!("{}.jsonl", t.name()))).map_err(io)?);
        write_jsonl(f, &recs).map_err(io)?;
    }
    Ok(())
}

/// Loads a benchmark written by [`write_benchmark`]; the world is rebuilt
/// from the manifest's spec.
pub fn read_benchmark(dir: &Path) -> Result<(World, Benchmark), WorldError> {
    let m: Manifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json")).map_err(io)?))
            .map_err(io)?;
    if m.schema != BENCHMARK_SCHEMA {
        return Err(WorldError::Io(format!("unsupported benchmark schema {}", m.schema)));
    }
    let world = World::new(m.world)?;
    let gallery: Vec<GalleryRecord> =
        read_jsonl(BufReader::new(File::open(dir.join("gallery.jsonl")).map_err(io)?)).map_err(io)?;
    let train_pool: Vec<ImageId> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("train_pool.json")).map_err(io)?)
            .map_err(io)?;
    let mut samples = Vec::new();
    for t in Subtask::ALL {
        let recs: Vec<CorpusRecord> = read_jsonl(BufReader::new(
            File::open(dir.join(format!("{}.jsonl", t.name()))).map_err(io)?,
        ))
        .map_err(io)?;
        for r in recs {
            let meta: SampleMeta = serde_json::from_value(r.meta.clone()).map_err(io)?;
            let turns = r.turns.ok_or_else(|| WorldError::Io("sample without turns".into()))?;
            samples.push(DialogueSample {
                context: crate::sequence::ChatDialogue::new(turns),
                target: meta.target,
                subtask: meta.subtask,
                provenance: meta.provenance,
                source: meta.source,
                subset: meta.subset,
            });
        }
    }
    let b = Benchmark {
        config: m.config,
        train_pool,
        gallery: gallery.iter().map(|g| g.id).collect(),
        samples,
        stats: m.stats,
    };
    Ok((world, b))
}
