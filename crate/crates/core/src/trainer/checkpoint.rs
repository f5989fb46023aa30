//! Checkpoint container. Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "IMGCKPT\0"
//! version  u32
//! hlen     u64      byte length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! data     f32 values, little-endian; header entries give offset and shape
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Monitor, TrainConfig, TrainError, Trainer};
use crate::model::{Model, ModelConfig};
use crate::objective::{FeatureQueue, QueueEntry};
use crate::sequence::ImageId;
use crate::tensor::{AdamW, AdamWState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IMGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// u128 does not survive every JSON reader, so it travels as text.
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    rng: RngState,
    monitor: Monitor,
    params: Vec<Entry>,
    trainable: Vec<bool>,
    adam_step: u64,
    adam_m: Vec<Entry>,
    adam_v: Vec<Entry>,
    queue_capacity: usize,
    queue_inserted: u64,
    queue_ids: Vec<ImageId>,
    queue: Entry,
}

/// Everything needed to rebuild a [`Trainer`] exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>, bool)>,
    pub adam: AdamWState<f32>,
    pub queue: FeatureQueue,
    rng: ChaCha8Rng,
    monitor: Monitor,
}

fn ck<E: std::fmt::Display>(e: E) -> TrainError {
    TrainError::Checkpoint(e.to_string())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            model_config: t.model.config.clone(),
            train: t.config.clone(),
            step: t.step,
            params: t
                .model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone(), p.trainable))
                .collect(),
            adam: t.opt.state().clone(),
            queue: t.queue.clone(),
            rng: t.rng.clone(),
            monitor: t.monitor,
        }
    }

    /// Rebuilds the model with the stored weights and trainable flags.
    pub fn model(&self) -> Result<Model<f32>, TrainError> {
        let mut m = Model::new(self.model_config.clone())?;
        if m.params.len() != self.params.len() {
            return Err(ck(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                m.params.len()
            )));
        }
        for (p, (name, value, trainable)) in m.params.iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(ck(format!("parameter {name} does not match model layout")));
            }
            p.value = value.clone();
            p.trainable = *trainable;
        }
        Ok(m)
    }

    /// Resumes training exactly where the checkpoint was taken.
    pub fn into_trainer(self) -> Result<Trainer, TrainError> {
        let model = self.model()?;
        let mut opt = AdamW::new(self.train.adam, &model.params);
        opt.set_state(self.adam);
        Ok(Trainer {
            model,
            opt,
            queue: self.queue,
            config: self.train,
            step: self.step,
            rng: self.rng,
            monitor: self.monitor,
            last_checkpoint: None,
        })
    }
}

fn push(data: &mut Vec<f32>, name: &str, t: &Tensor<f32>) -> Entry {
    let e = Entry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        offset: data.len(),
    };
    data.extend_from_slice(t.data());
    e
}

pub fn save_checkpoint(t: &mut Trainer, path: &Path) -> Result<(), TrainError> {
    write_checkpoint(&Checkpoint::from_trainer(t), path)?;
    t.last_checkpoint = Some(PathBuf::from(path));
    Ok(())
}

pub fn write_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let mut data = Vec::new();
    let params = c.params.iter().map(|(n, v, _)| push(&mut data, n, v)).collect();
    let names: Vec<&str> = c.params.iter().map(|(n, _, _)| n.as_str()).collect();
    let adam_m = c.adam.m.iter().zip(&names).map(|(t, n)| push(&mut data, n, t)).collect();
    let adam_v = c.adam.v.iter().zip(&names).map(|(t, n)| push(&mut data, n, t)).collect();
    let width = c.queue.width();
    let qdata: Vec<f32> = c.queue.iter().flat_map(|e| e.f_cls.iter().copied()).collect();
    // Raw block rather than a tensor: an unfilled queue has zero rows.
    let queue = Entry {
        name: "queue".into(),
        shape: vec![c.queue.len(), width],
        offset: data.len(),
    };
    data.extend_from_slice(&qdata);
    let header = Header {
        model: c.model_config.clone(),
        train: c.train.clone(),
        step: c.step,
        rng: RngState {
            seed: c.rng.get_seed(),
            stream: c.rng.get_stream(),
            word_pos: c.rng.get_word_pos().to_string(),
        },
        monitor: c.monitor,
        params,
        trainable: c.params.iter().map(|(_, _, t)| *t).collect(),
        adam_step: c.adam.step,
        adam_m,
        adam_v,
        queue_capacity: c.queue.capacity(),
        queue_inserted: c.queue.inserted(),
        queue_ids: c.queue.ids(),
        queue,
    };
    let json = serde_json::to_vec(&header).map_err(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(ck)?;
    }
    // Write beside the target and rename so a crash never leaves a torn file.
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(ck)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(ck)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(ck)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(ck)?;
        w.write_all(&json).map_err(ck)?;
        for v in &data {
            w.write_all(&v.to_le_bytes()).map_err(ck)?;
        }
        w.flush().map_err(ck)?;
    }
    std::fs::rename(&tmp, path).map_err(ck)?;
    Ok(())
}

fn take(data: &[f32], e: &Entry) -> Result<Tensor<f32>, TrainError> {
    let n: usize = e.shape.iter().product();
    let slice = data
        .get(e.offset..e.offset + n)
        .ok_or_else(|| ck(format!("tensor {} runs past the data block", e.name)))?;
    Tensor::new(e.shape.clone(), slice.to_vec()).map_err(ck)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut r = BufReader::new(File::open(path).map_err(ck)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(ck)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck("not a checkpoint file (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(ck)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(ck)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json).map_err(ck)?;
    let h: Header = serde_json::from_slice(&json).map_err(ck)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(ck)?;
    if bytes.len() % 4 != 0 {
        return Err(ck("data block is not a whole number of f32 values"));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    if h.trainable.len() != h.params.len() {
        return Err(ck("trainable flags do not match parameter list"));
    }
    let mut params = Vec::with_capacity(h.params.len());
    for (e, &tr) in h.params.iter().zip(&h.trainable) {
        params.push((e.name.clone(), take(&data, e)?, tr));
    }
    let adam = AdamWState {
        step: h.adam_step,
        m: h.adam_m.iter().map(|e| take(&data, e)).collect::<Result<_, _>>()?,
        v: h.adam_v.iter().map(|e| take(&data, e)).collect::<Result<_, _>>()?,
    };
    let (rows, width) = match h.queue.shape[..] {
        [r, w] => (r, w),
        _ => return Err(ck("queue block must be two-dimensional")),
    };
    if rows != h.queue_ids.len() {
        return Err(ck("queue ids and features disagree"));
    }
    let qdata = data
        .get(h.queue.offset..h.queue.offset + rows * width)
        .ok_or_else(|| ck("queue runs past the data block"))?;
    let entries: Vec<QueueEntry> = h
        .queue_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| QueueEntry {
            id,
            f_cls: qdata[i * width..(i + 1) * width].to_vec(),
        })
        .collect();
    let queue = FeatureQueue::from_parts(h.queue_capacity, width, entries, h.queue_inserted)
        .map_err(ck)?;
    let word_pos: u128 = h.rng.word_pos.parse().map_err(ck)?;
    let mut rng = ChaCha8Rng::from_seed(h.rng.seed);
    rng.set_stream(h.rng.stream);
    rng.set_word_pos(word_pos);
    Ok(Checkpoint {
        model_config: h.model,
        train: h.train,
        step: h.step,
        params,
        adam,
        queue,
        rng,
        monitor: h.monitor,
    })
}
