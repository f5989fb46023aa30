use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::WorldError;
use crate::model::RawImage;
use crate::sequence::{ImageId, Vocab};

/// The six attribute axes, in feature-block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attr {
    Subject,
    Color,
    Size,
    Count,
    Background,
    Orientation,
}

impl Attr {
    pub const ALL: [Attr; 6] = [
        Attr::Subject,
        Attr::Color,
        Attr::Size,
        Attr::Count,
        Attr::Background,
        Attr::Orientation,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attr::Subject => "subject",
            Attr::Color => "color",
            Attr::Size => "size",
            Attr::Count => "count",
            Attr::Background => "background",
            Attr::Orientation => "orientation",
        }
    }
}

/// Attribute schema, feature geometry and seed. Value words must be unique
/// across all attributes and aliases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub values: [Vec<String>; 6],
    /// `(alias, attribute, value index)`: the lookup table a reader needs
    /// to resolve aliased mentions.
    pub aliases: Vec<(String, Attr, usize)>,
    /// Feature weight per attribute block.
    pub weights: [f64; 6],
    /// Width of each attribute block in the global vector.
    pub block_widths: [usize; 6],
    /// Standard deviation of the noise added to region blocks.
    pub region_noise: f64,
    /// Cosine threshold for neighbour filtering.
    pub neighbor_threshold: f64,
    pub seed: u64,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

impl Default for WorldSpec {
    fn default() -> Self {
        let values = [
            words(&["cat", "dog", "bird", "fish", "horse", "rabbit", "fox", "owl"]),
            words(&["red", "blue", "green", "yellow", "black", "white"]),
            words(&["small", "medium", "large"]),
            words(&["one", "two", "three"]),
            words(&["grass", "sand", "snow", "water", "street"]),
            words(&["left", "right", "forward"]),
        ];
        let alias = |w: &str, a: Attr, v: usize| (w.to_string(), a, v);
        let aliases = vec![
            alias("feline", Attr::Subject, 0),
            alias("canine", Attr::Subject, 1),
            alias("avian", Attr::Subject, 2),
            alias("finned", Attr::Subject, 3),
            alias("equine", Attr::Subject, 4),
            alias("bunny", Attr::Subject, 5),
            alias("vulpine", Attr::Subject, 6),
            alias("strigine", Attr::Subject, 7),
            alias("crimson", Attr::Color, 0),
            alias("azure", Attr::Color, 1),
            alias("emerald", Attr::Color, 2),
            alias("golden", Attr::Color, 3),
            alias("ebony", Attr::Color, 4),
            alias("ivory", Attr::Color, 5),
            alias("meadow", Attr::Background, 0),
            alias("beach", Attr::Background, 1),
            alias("tundra", Attr::Background, 2),
            alias("lake", Attr::Background, 3),
            alias("road", Attr::Background, 4),
        ];
        Self {
            values,
            aliases,
            weights: [1.0, 0.7, 0.5, 0.5, 0.5, 0.4],
            block_widths: [16, 12, 8, 8, 12, 8],
            region_noise: 0.05,
            neighbor_threshold: 0.8,
            seed: 7,
        }
    }
}

/// Words used by dialogue templates; disjoint from attribute words.
pub const TEMPLATE_WORDS: &[&str] = &[
    "i", "am", "looking", "for", "a", "photo", "of", "want", "picture", "it", "is", "on", "facing",
    "the", "show", "me", "find", "image", "same", "but", "now", "make", "where", "what", "color",
    "size", "how", "many", "which", "way", "does", "face", "animal", "kind", "please", "here",
    "sure", "thanks", "hello", "hi", "can", "help", "you", "they", "are", "there", "with", "in",
    "and", "?", ",", "ok", "good", "big", "background", "this", "that", "do",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub id: ImageId,
    /// Value index per attribute, in [`Attr::ALL`] order.
    pub attrs: [usize; 6],
    pub raw: RawImage,
}

impl SynthImage {
    pub fn get(&self, a: Attr) -> usize {
        self.attrs[a.index()]
    }
}

/// The full image universe: every attribute combination exactly once.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub images: Vec<SynthImage>,
    vocab: Vocab,
    d_img: usize,
}

/// Orthonormal rows (Gram-Schmidt on Gaussian draws).
fn orthonormal(n: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("std");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..width).map(|_| normal.sample(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n2 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n2 > 1e-6 {
            out.push(v.into_iter().map(|a| a / n2).collect());
        }
    }
    out
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self, WorldError> {
        for (a, vals) in Attr::ALL.iter().zip(&spec.values) {
            if vals.is_empty() || vals.len() > spec.block_widths[a.index()] {
                return Err(WorldError::Spec(format!(
                    "attribute {} needs 1..={} values",
                    a.name(),
                    spec.block_widths[a.index()]
                )));
            }
        }
        let mut all: Vec<&str> = spec.values.iter().flatten().map(|s| s.as_str()).collect();
        all.extend(spec.aliases.iter().map(|(w, _, _)| w.as_str()));
        all.extend(TEMPLATE_WORDS);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(WorldError::Spec(format!("word `{}` is used twice", w[0])));
        }
        for (w, a, v) in &spec.aliases {
            if *v >= spec.values[a.index()].len() {
                return Err(WorldError::Spec(format!("alias `{w}` points past its attribute")));
            }
        }
        let vocab = Vocab::new(all.iter().copied());
        let d_img: usize = spec.block_widths.iter().sum();

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let bases: Vec<Vec<Vec<f64>>> = Attr::ALL
            .iter()
            .map(|a| orthonormal(spec.values[a.index()].len(), spec.block_widths[a.index()], &mut rng))
            .collect();
        let offsets: Vec<usize> = spec
            .block_widths
            .iter()
            .scan(0, |acc, &w| {
                let o = *acc;
                *acc += w;
                Some(o)
            })
            .collect();
        let total_w = spec.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        let noise = Normal::new(0.0, spec.region_noise.max(0.0)).expect("std");
        let counts: Vec<usize> = spec.values.iter().map(|v| v.len()).collect();
        let n_images: usize = counts.iter().product();
        let mut images = Vec::with_capacity(n_images);
        for id in 0..n_images {
            let mut attrs = [0usize; 6];
            let mut rest = id;
            for a in (0..6).rev() {
                attrs[a] = rest % counts[a];
                rest /= counts[a];
            }
            let mut global = vec![0.0f32; d_img];
            let mut regions = Vec::with_capacity(6);
            let mut irng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9E37_79B9_7F4A_7C15);
            irng.set_stream(id as u64);
            for a in 0..6 {
                let u = &bases[a][attrs[a]];
                let mut region: Vec<f32> =
                    (0..d_img).map(|_| noise.sample(&mut irng) as f32).collect();
                for (j, &x) in u.iter().enumerate() {
                    global[offsets[a] + j] = (spec.weights[a] * x / total_w) as f32;
                    region[offsets[a] + j] += (spec.weights[a] * x) as f32;
                }
                regions.push(region);
            }
            images.push(SynthImage {
                id: ImageId(id as u32),
                attrs,
                raw: RawImage { global, regions },
            });
        }
        Ok(Self {
            spec,
            images,
            vocab,
            d_img,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn image(&self, id: ImageId) -> &SynthImage {
        &self.images[id.0 as usize]
    }

    pub fn get_image(&self, id: ImageId) -> Option<&SynthImage> {
        self.images.get(id.0 as usize)
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn value_word(&self, a: Attr, v: usize) -> &str {
        &self.spec.values[a.index()][v]
    }

    /// Alias for `(a, v)` if the world ships one.
    pub fn alias(&self, a: Attr, v: usize) -> Option<&str> {
        self.spec
            .aliases
            .iter()
            .find(|(_, aa, vv)| *aa == a && *vv == v)
            .map(|(w, _, _)| w.as_str())
    }

    /// `(attribute, value)` a word denotes, directly or via alias.
    pub fn lookup(&self, word: &str) -> Option<(Attr, usize)> {
        for a in Attr::ALL {
            if let Some(v) = self.spec.values[a.index()].iter().position(|w| w == word) {
                return Some((a, v));
            }
        }
        self.spec
            .aliases
            .iter()
            .find(|(w, _, _)| w == word)
            .map(|(_, a, v)| (*a, *v))
    }

    /// Id of the image with exactly these attributes.
    pub fn id_of(&self, attrs: &[usize; 6]) -> ImageId {
        let mut id = 0usize;
        for (a, &v) in attrs.iter().enumerate() {
            id = id * self.spec.values[a].len() + v;
        }
        ImageId(id as u32)
    }

    /// Full caption: `count size color subject on background facing orientation`.
    pub fn caption(&self, img: &SynthImage) -> String {
        let w = |a| self.value_word(a, img.get(a));
        format!(
            "{} {} {} {} on {} facing {}",
            w(Attr::Count),
            w(Attr::Size),
            w(Attr::Color),
            w(Attr::Subject),
            w(Attr::Background),
            w(Attr::Orientation)
        )
    }

    /// Splits all images into disjoint `(train, test)` pools. The test pool
    /// takes `per_family` members from each of `test_size / per_family`
    /// random families (images sharing subject, color, size and count), so
    /// close neighbours exist inside the test gallery.
    pub fn split_pools(
        &self,
        test_size: usize,
        per_family: usize,
        seed: u64,
    ) -> Result<(Vec<ImageId>, Vec<ImageId>), WorldError> {
        let fam_size = self.spec.values[4].len() * self.spec.values[5].len();
        if per_family == 0 || per_family > fam_size {
            return Err(WorldError::Spec(format!("per_family must be in 1..={fam_size}")));
        }
        let n_fam = self.images.len() / fam_size;
        let want = test_size.div_ceil(per_family);
        if want > n_fam || test_size >= self.images.len() {
            return Err(WorldError::Size(format!(
                "test pool of {test_size} does not fit {} images",
                self.images.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fams: Vec<usize> = (0..n_fam).collect();
        fams.shuffle(&mut rng);
        let mut test = Vec::with_capacity(test_size);
        for &f in &fams[..want] {
            let mut members: Vec<usize> = (f * fam_size..(f + 1) * fam_size).collect();
            members.shuffle(&mut rng);
            for &m in members.iter().take(per_family) {
                if test.len() < test_size {
                    test.push(ImageId(m as u32));
                }
            }
        }
        test.sort_unstable();
        let mut is_test = vec![false; self.images.len()];
        test.iter().for_each(|i| is_test[i.0 as usize] = true);
        let train = (0..self.images.len())
            .filter(|&i| !is_test[i])
            .map(|i| ImageId(i as u32))
            .collect();
        Ok((train, test))
    }
}

/// Cosine of two raw global vectors.
pub fn feature_cosine(a: &[f32], b: &[f32]) -> f64 {
    crate::objective::cosine(a, b)
}
