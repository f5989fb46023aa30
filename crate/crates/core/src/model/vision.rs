use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::sequence::ImageId;

/// Raw image record as produced by the synthetic world: a global vector
/// plus one region block per attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawImage {
    pub global: Vec<f32>,
    pub regions: Vec<Vec<f32>>,
}

/// Output of the frozen vision encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionFeatures {
    /// Region vectors, each `d_img` wide.
    pub f: Vec<Vec<f32>>,
    /// Unit-norm global vector.
    pub f_cls: Vec<f32>,
}

/// Frozen encoder: `f_cls` is the L2-normalised global vector and every
/// region block goes through a fixed mixing matrix. Nothing here is ever
/// trained.
pub fn encode_image(
    raw: &RawImage,
    d_img: usize,
    region_mix: &[f32],
) -> Result<VisionFeatures, ModelError> {
    if raw.global.len() != d_img {
        return Err(ModelError::Config(format!(
            "image global width {} does not match d_img {d_img}",
            raw.global.len()
        )));
    }
    if raw.regions.is_empty() {
        return Err(ModelError::Config("image has no region blocks".into()));
    }
    if region_mix.len() != d_img * d_img {
        return Err(ModelError::Config("region mixing matrix has the wrong size".into()));
    }
    let norm = raw.global.iter().map(|v| v * v).sum::<f32>().sqrt();
    let f_cls = if norm > 0.0 {
        raw.global.iter().map(|v| v / norm).collect()
    } else {
        raw.global.clone()
    };
    let mut f = Vec::with_capacity(raw.regions.len());
    for r in &raw.regions {
        if r.len() != d_img {
            return Err(ModelError::Config(format!(
                "region width {} does not match d_img {d_img}",
                r.len()
            )));
        }
        let mut out = vec![0.0f32; d_img];
        for (i, &x) in r.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &region_mix[i * d_img..(i + 1) * d_img];
            out.iter_mut().zip(row).for_each(|(o, &w)| *o += x * w);
        }
        f.push(out);
    }
    Ok(VisionFeatures { f, f_cls })
}

/// Encoded features keyed by image id; what the model reads image spans from.
/// Clones share the frozen part, so per-session overlays are cheap.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    shared: Arc<HashMap<ImageId, VisionFeatures>>,
    own: HashMap<ImageId, VisionFeatures>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ImageId, v: VisionFeatures) {
        self.own.insert(id, v);
    }

    /// Moves every entry into the shared part.
    pub fn freeze(mut self) -> Self {
        if !self.own.is_empty() {
            let mut map = Arc::try_unwrap(self.shared).unwrap_or_else(|a| (*a).clone());
            map.extend(self.own.drain());
            self.shared = Arc::new(map);
        }
        self
    }

    /// A store that sees everything in `self` and keeps its own inserts
    /// to itself.
    pub fn overlay(&self) -> Self {
        let base = self.clone().freeze();
        Self {
            shared: base.shared,
            own: HashMap::new(),
        }
    }

    pub fn get(&self, id: ImageId) -> Result<&VisionFeatures, ModelError> {
        self.own
            .get(&id)
            .or_else(|| self.shared.get(&id))
            .ok_or(ModelError::UnknownImage(id))
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.own.contains_key(&id) || self.shared.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.shared.len() + self.own.keys().filter(|k| !self.shared.contains_key(k)).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.own
            .keys()
            .copied()
            .chain(self.shared.keys().copied().filter(|k| !self.own.contains_key(k)))
    }
}
