use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::resolve::{matching, resolve};
use super::world::feature_cosine;
use super::{Attr, World, WorldError};
use crate::sequence::{ChatDialogue, ImageId, Turn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtask {
    Tchat,
    Ichat,
    Mchat,
}

impl Subtask {
    pub const ALL: [Subtask; 3] = [Subtask::Tchat, Subtask::Ichat, Subtask::Mchat];

    pub fn name(self) -> &'static str {
        match self {
            Subtask::Tchat => "tchat",
            Subtask::Ichat => "ichat",
            Subtask::Mchat => "mchat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "TDC")]
    Tdc,
    #[serde(rename = "MDC-I")]
    MdcI,
    #[serde(rename = "MDC-T")]
    MdcT,
    #[serde(rename = "merged")]
    Merged,
    #[serde(rename = "edit")]
    Edit,
}

/// A retrieval dialogue: the context ends with a user turn and the target
/// is the image the assistant should answer with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub context: ChatDialogue,
    pub target: ImageId,
    pub subtask: Subtask,
    pub provenance: Provenance,
    /// Reference image for image-anchored recipes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ImageId>,
    /// Six-candidate subset containing the target (subset recall).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<ImageId>>,
}

impl DialogueSample {
    /// Context followed by the assistant's image answer.
    pub fn with_answer(&self) -> ChatDialogue {
        let mut d = self.context.clone();
        d.push(Turn::assistant("[image]").with_image(self.target));
        d
    }
}

/// Probability of stating an attribute through its alias.
pub const ALIAS_PROB: f64 = 0.3;

fn mention<R: Rng>(world: &World, a: Attr, v: usize, rng: &mut R) -> String {
    match world.alias(a, v) {
        Some(al) if rng.random_bool(ALIAS_PROB) => al.to_string(),
        _ => world.value_word(a, v).to_string(),
    }
}

/// Phrase stating `attrs` (a subset of the image's attributes) in
/// canonical order, e.g. `two red cat on sand facing left`.
pub fn describe<R: Rng>(world: &World, vals: &[(Attr, usize)], rng: &mut R) -> String {
    let get = |a: Attr| vals.iter().find(|(x, _)| *x == a).map(|(_, v)| *v);
    let mut words = Vec::new();
    for a in [Attr::Count, Attr::Size, Attr::Color] {
        if let Some(v) = get(a) {
            words.push(mention(world, a, v, rng));
        }
    }
    if let Some(v) = get(Attr::Subject) {
        words.push(mention(world, Attr::Subject, v, rng));
    } else if !words.is_empty() {
        words.push("animal".into());
    }
    if let Some(v) = get(Attr::Background) {
        words.push("on".into());
        words.push(mention(world, Attr::Background, v, rng));
    }
    if let Some(v) = get(Attr::Orientation) {
        words.push("facing".into());
        words.push(mention(world, Attr::Orientation, v, rng));
    }
    words.join(" ")
}

fn question(a: Attr) -> &'static str {
    match a {
        Attr::Subject => "what animal is it ?",
        Attr::Color => "what color is it ?",
        Attr::Size => "what size is it ?",
        Attr::Count => "how many are there ?",
        Attr::Background => "where is it ?",
        Attr::Orientation => "which way does it face ?",
    }
}

const CUES: &[&str] = &["show me the image", "find it", "show me the picture", "find the photo"];

fn cue<R: Rng>(rng: &mut R) -> &'static str {
    CUES.choose(rng).expect("cues")
}

fn pick(img_attrs: &[usize; 6], set: &[Attr]) -> Vec<(Attr, usize)> {
    set.iter().map(|&a| (a, img_attrs[a.index()])).collect()
}

/// Multi-round text-only retrieval dialogue. Attributes are added (subject
/// first) until the target is unique in `gallery`, then spread across
/// `rounds` user turns; the final turn carries at most two attributes so
/// it is ambiguous on its own.
pub fn make_text_dialogue<R: Rng>(
    world: &World,
    gallery: &[ImageId],
    target: ImageId,
    rounds: usize,
    rng: &mut R,
) -> Result<DialogueSample, WorldError> {
    if !(2..=6).contains(&rounds) {
        return Err(WorldError::Recipe(format!(
            "text dialogue needs 2..=6 rounds, got {rounds}"
        )));
    }
    let img = world.image(target);
    let mut rest: Vec<Attr> = Attr::ALL[1..].to_vec();
    rest.shuffle(rng);
    let mut set = vec![Attr::Subject];
    let mut c = [None; 6];
    c[0] = Some(img.attrs[0]);
    while matching(world, gallery, &c).len() > 1 {
        let Some(a) = rest.pop() else { break };
        c[a.index()] = Some(img.attrs[a.index()]);
        set.push(a);
    }
    if matching(world, gallery, &c) != vec![target] {
        return Err(WorldError::Recipe(format!("target {target} is not in the gallery")));
    }
    while set.len() < rounds {
        let Some(a) = rest.pop() else {
            return Err(WorldError::Recipe(format!(
                "target attributes insufficient for {rounds} rounds"
            )));
        };
        set.push(a);
    }
    // Round 1 keeps the subject and any surplus; each middle round gets
    // one attribute; the last round gets one or two.
    let mut tail: Vec<Attr> = set[1..].to_vec();
    tail.shuffle(rng);
    let last_n = if tail.len() >= rounds && rng.random_bool(0.5) { 2 } else { 1 };
    let last: Vec<Attr> = tail.split_off(tail.len() - last_n);
    let mut groups: Vec<Vec<Attr>> = vec![vec![Attr::Subject]];
    for _ in 0..rounds - 2 {
        groups.push(vec![tail.pop().expect("enough attributes")]);
    }
    groups[0].extend(tail);
    groups.push(last);

    let mut d = ChatDialogue::default();
    for (r, g) in groups.iter().enumerate() {
        let desc = describe(world, &pick(&img.attrs, g), rng);
        let text = if r == 0 {
            format!("i am looking for a photo of {desc}")
        } else if r + 1 == groups.len() {
            format!("{desc} , {}", cue(rng))
        } else {
            desc
        };
        if r > 0 {
            d.push(Turn::assistant(question(g[0])));
        }
        d.push(Turn::user(text));
    }
    Ok(DialogueSample {
        context: d,
        target,
        subtask: Subtask::Tchat,
        provenance: Provenance::Tdc,
        source: None,
        subset: None,
    })
}

/// Exact top-`k` gallery neighbours of `id` by global-feature cosine,
/// excluding `id`; ties go to the lower id.
pub fn top_neighbors(world: &World, gallery: &[ImageId], id: ImageId, k: usize) -> Vec<(ImageId, f64)> {
    let src = &world.image(id).raw.global;
    let mut scored: Vec<(ImageId, f64)> = gallery
        .iter()
        .filter(|&&g| g != id)
        .map(|&g| (g, feature_cosine(src, &world.image(g).raw.global)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn diff_attrs(a: &[usize; 6], b: &[usize; 6]) -> Vec<Attr> {
    Attr::ALL.into_iter().filter(|x| a[x.index()] != b[x.index()]).collect()
}

/// Single-round modification dialogue from a reference image. The target
/// is a top-10 neighbour above the similarity threshold that differs only
/// in background and/or orientation.
pub fn make_mdc_i<R: Rng>(
    world: &World,
    gallery: &[ImageId],
    source: ImageId,
    rng: &mut R,
) -> Result<DialogueSample, WorldError> {
    let src = world.image(source);
    let allowed = [Attr::Background, Attr::Orientation];
    let cands: Vec<ImageId> = top_neighbors(world, gallery, source, 10)
        .into_iter()
        .filter(|&(g, s)| {
            s >= world.spec.neighbor_threshold
                && diff_attrs(&src.attrs, &world.image(g).attrs)
                    .iter()
                    .all(|a| allowed.contains(a))
        })
        .map(|(g, _)| g)
        .collect();
    let &target = cands
        .choose(rng)
        .ok_or_else(|| WorldError::NoNeighbor(source))?;
    let tgt = world.image(target);
    let diffs = diff_attrs(&src.attrs, &tgt.attrs);
    let text = format!(
        "[image] same but {} , {}",
        describe(world, &pick(&tgt.attrs, &diffs), rng),
        cue(rng)
    );
    Ok(DialogueSample {
        context: ChatDialogue::new(vec![Turn::user(text).with_image(source)]),
        target,
        subtask: Subtask::Ichat,
        provenance: Provenance::MdcI,
        source: Some(source),
        subset: None,
    })
}

/// Two-round dialogue from a reference caption: a partial caption T2 is
/// answered with its best gallery match I2, then the user names what must
/// change to reach the source.
pub fn make_mdc_t<R: Rng>(
    world: &World,
    gallery: &[ImageId],
    source: ImageId,
    rng: &mut R,
) -> Result<DialogueSample, WorldError> {
    let src = world.image(source);
    let mut others: Vec<Attr> = Attr::ALL[1..].to_vec();
    others.shuffle(rng);
    let n = rng.random_range(1..=2);
    let mut t2 = vec![Attr::Subject];
    t2.extend(&others[..n]);
    // Best match of T2: most feature weight on matched attributes, then
    // lowest id; the source itself is excluded.
    let score = |id: ImageId| -> f64 {
        let a = world.image(id).attrs;
        t2.iter()
            .filter(|x| a[x.index()] == src.attrs[x.index()])
            .map(|x| world.spec.weights[x.index()])
            .sum()
    };
    let mut best: Option<(ImageId, f64)> = None;
    for &g in gallery {
        if g == source {
            continue;
        }
        let s = score(g);
        if best.is_none_or(|(bid, bs)| s > bs || (s == bs && g < bid)) {
            best = Some((g, s));
        }
    }
    let Some((mid, s)) = best else {
        return Err(WorldError::NoNeighbor(source));
    };
    let full: f64 = t2.iter().map(|x| world.spec.weights[x.index()]).sum();
    if s < full {
        return Err(WorldError::NoNeighbor(source));
    }
    let mid_img = world.image(mid);
    let diffs = diff_attrs(&mid_img.attrs, &src.attrs);
    let d = ChatDialogue::new(vec![
        Turn::user(format!(
            "i want a picture of {}",
            describe(world, &pick(&src.attrs, &t2), rng)
        )),
        Turn::assistant("here it is [image]").with_image(mid),
        Turn::user(format!(
            "now make it {} , {}",
            describe(world, &pick(&src.attrs, &diffs), rng),
            cue(rng)
        )),
    ]);
    Ok(DialogueSample {
        context: d,
        target: source,
        subtask: Subtask::Mchat,
        provenance: Provenance::MdcT,
        source: Some(mid),
        subset: None,
    })
}

/// Joins a text dialogue and an image dialogue that share an image. When
/// the text dialogue's target is the image dialogue's source, that image
/// becomes the assistant's answer and the modification follows as a new
/// round without the image; when it is the image dialogue's target, the
/// image round is appended as is.
pub fn merge_contexts(
    world: &World,
    gallery: &[ImageId],
    text: &DialogueSample,
    image: &DialogueSample,
) -> Result<DialogueSample, WorldError> {
    let src = image.source.ok_or(WorldError::NoCommonImage)?;
    let last = image.context.turns.last().ok_or(WorldError::NoCommonImage)?;
    let mut d = text.context.clone();
    if text.target == src {
        d.push(Turn::assistant("here it is [image]").with_image(src));
        d.push(Turn::user(last.text.replace("[image] ", "")));
    } else if text.target == image.target {
        d.push(Turn::assistant("ok , what kind ?"));
        d.push(last.clone());
    } else {
        return Err(WorldError::NoCommonImage);
    }
    let merged = DialogueSample {
        context: d,
        target: image.target,
        subtask: Subtask::Mchat,
        provenance: Provenance::Merged,
        source: Some(src),
        subset: None,
    };
    if resolve(world, gallery, &merged.context) != vec![merged.target] {
        return Err(WorldError::NotUnique(merged.target));
    }
    Ok(merged)
}

/// Editing-style triplet: reference image, an instruction changing color,
/// size or count, and the edited image. `None` when no edit of the drawn
/// attribute lands inside `pool`.
pub fn make_edit<R: Rng>(
    world: &World,
    pool: &[ImageId],
    source: ImageId,
    rng: &mut R,
) -> Option<DialogueSample> {
    let src = world.image(source);
    let a = *[Attr::Color, Attr::Size, Attr::Count].choose(rng).expect("attrs");
    let n = world.spec.values[a.index()].len();
    let options: Vec<[usize; 6]> = (1..n)
        .map(|k| {
            let mut attrs = src.attrs;
            attrs[a.index()] = (src.attrs[a.index()] + k) % n;
            attrs
        })
        .filter(|attrs| pool.binary_search(&world.id_of(attrs)).is_ok())
        .collect();
    let attrs = *options.choose(rng)?;
    let target = world.id_of(&attrs);
    let text = format!(
        "[image] make it {} , {}",
        describe(world, &[(a, attrs[a.index()])], rng),
        cue(rng)
    );
    Some(DialogueSample {
        context: ChatDialogue::new(vec![Turn::user(text).with_image(source)]),
        target,
        subtask: Subtask::Ichat,
        provenance: Provenance::Edit,
        source: Some(source),
        subset: None,
    })
}

/// Visual-conversation analog: questions about an image answered in text.
pub fn make_qa<R: Rng>(world: &World, image: ImageId, rounds: usize, rng: &mut R) -> ChatDialogue {
    let img = world.image(image);
    let mut attrs = Attr::ALL.to_vec();
    attrs.shuffle(rng);
    let mut d = ChatDialogue::default();
    for (r, &a) in attrs.iter().take(rounds.clamp(1, 6)).enumerate() {
        let q = question(a);
        if r == 0 {
            d.push(Turn::user(format!("[image] {q}")).with_image(image));
        } else {
            d.push(Turn::user(q));
        }
        let v = world.value_word(a, img.get(a));
        let answer = match a {
            Attr::Background => format!("it is on {v}"),
            Attr::Orientation => format!("it is facing {v}"),
            _ => format!("it is {v}"),
        };
        d.push(Turn::assistant(answer));
    }
    d
}

/// Text-only small talk; the right reply is text, never an image.
pub fn make_chitchat<R: Rng>(rng: &mut R) -> ChatDialogue {
    const PAIRS: &[(&str, &str)] = &[
        ("hello", "hi , how can i help you ?"),
        ("hi", "hello , what can i find for you ?"),
        ("thanks", "ok , good"),
        ("how are you ?", "good , thanks"),
        ("can you help me ?", "sure , what do you want ?"),
    ];
    let &(q, a) = PAIRS.choose(rng).expect("pairs");
    ChatDialogue::new(vec![Turn::user(q), Turn::assistant(a)])
}
