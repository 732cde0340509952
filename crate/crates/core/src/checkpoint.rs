//! Binary checkpoint format (version 1). All integers and floats are
//! little-endian.
//!
//! ```text
//! magic        8 bytes   "WSUMCKPT"
//! version      u32       1
//! meta_len     u32       then meta_len bytes of UTF-8 "key=value\n" lines, keys sorted
//! vocab_count  u32       then per content word: u32 byte length + UTF-8 bytes
//! tensor_count u32       then per tensor: u16 name length, name bytes,
//!                        u8 rank, rank x u64 dims
//! data                   each tensor in table order, row-major f64
//! ```
//!
//! Model tensors are the weights named in [`crate::model::WEIGHT_NAMES`]. A
//! training checkpoint additionally stores `adam.m.<name>` / `adam.v.<name>`
//! for every weight and for the trainable embedding rows, plus the `epoch` and
//! `adam_step` meta keys.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::corpus::{EmbeddingTable, Vocabulary};
use crate::model::{Model, ModelConfig, Params, Weights};
use crate::training::AdamState;
use crate::windowing::{CorpusStats, WindowSpec};
use crate::{Error, Mode, Result};

pub const MAGIC: &[u8; 8] = b"WSUMCKPT";
pub const VERSION: u32 = 1;

/// A model, optionally with the optimizer state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub training: Option<TrainingState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub adam: AdamState,
    pub epoch: usize,
}

struct Tensor<'a> {
    name: String,
    dims: Vec<usize>,
    data: &'a [f64],
}

fn meta(config: &ModelConfig, emb_dim: usize, training: Option<&TrainingState>) -> BTreeMap<&'static str, String> {
    let mut m = BTreeMap::new();
    m.insert("mode", config.mode.to_string());
    m.insert("window", config.window.window.to_string());
    m.insert("stride", config.window.stride.to_string());
    m.insert("max_input", config.max_input.to_string());
    m.insert("max_summary", config.max_summary.to_string());
    // {:?} is the shortest representation that parses back bit-exactly
    m.insert("k", format!("{:?}", config.k));
    m.insert("d", format!("{:?}", config.d));
    m.insert("hidden", config.hidden.to_string());
    m.insert("emb_dim", emb_dim.to_string());
    m.insert("train_embeddings", config.train_embeddings.to_string());
    if let Some(s) = config.stats {
        m.insert("majority_doc_len", s.majority_doc_len.to_string());
        m.insert("majority_sum_len", s.majority_sum_len.to_string());
    }
    if let Some(t) = training {
        m.insert("epoch", t.epoch.to_string());
        m.insert("adam_step", t.adam.step.to_string());
    }
    m
}

pub fn encode(checkpoint: &Checkpoint) -> Vec<u8> {
    let model = &checkpoint.model;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let meta: String = meta(&model.config, model.emb_dim(), checkpoint.training.as_ref())
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());

    let words = model.vocab.content_words();
    out.extend_from_slice(&(words.len() as u32).to_le_bytes());
    for w in words {
        out.extend_from_slice(&(w.len() as u32).to_le_bytes());
        out.extend_from_slice(w.as_bytes());
    }

    let mut tensors: Vec<Tensor<'_>> = Vec::new();
    let weights = &model.params.weights;
    for ((name, data), (_, dims)) in weights.tensors().into_iter().zip(weights.shapes()) {
        tensors.push(Tensor {
            name: name.to_string(),
            dims,
            data,
        });
    }
    let emb = &model.params.embeddings.matrix;
    tensors.push(Tensor {
        name: "embeddings".into(),
        dims: vec![emb.nrows(), emb.ncols()],
        data: emb.as_slice().expect("standard layout"),
    });
    if let Some(t) = &checkpoint.training {
        for (prefix, moments, rows) in [("adam.m", &t.adam.m, &t.adam.m_emb), ("adam.v", &t.adam.v, &t.adam.v_emb)] {
            for ((name, data), (_, dims)) in moments.tensors().into_iter().zip(moments.shapes()) {
                tensors.push(Tensor {
                    name: format!("{prefix}.{name}"),
                    dims,
                    data,
                });
            }
            tensors.push(Tensor {
                name: format!("{prefix}.embeddings"),
                dims: vec![rows.nrows(), rows.ncols()],
                data: rows.as_slice().expect("standard layout"),
            });
        }
    }

    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in &tensors {
        for &x in t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("bad value `{raw}` for `{key}`")))
}

type TensorData = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn take_tensor(data: &mut TensorData, name: &str, want: &[usize]) -> Result<Vec<f64>> {
    let (dims, values) = data
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    if dims != want {
        return Err(Error::Checkpoint(format!("tensor `{name}` has shape {dims:?}, expected {want:?}")));
    }
    Ok(values)
}

fn fill(data: &mut TensorData, weights: &mut Weights, prefix: &str) -> Result<()> {
    let shapes = weights.shapes();
    for ((name, slot), (_, dims)) in weights.tensors_mut().into_iter().zip(shapes) {
        let values = take_tensor(data, &format!("{prefix}{name}"), &dims)?;
        slot.copy_from_slice(&values);
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta_text = r.string(meta_len)?;
    let meta: BTreeMap<String, String> = meta_text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();

    let n_words = r.u32()? as usize;
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let len = r.u32()? as usize;
        words.push(r.string(len)?);
    }

    let n_tensors = r.u32()? as usize;
    let mut table = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        table.push((name, dims));
    }
    let mut data = TensorData::new();
    for (name, dims) in table {
        let count: usize = dims.iter().product();
        let raw = r.take(count * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data.insert(name, (dims, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let stats = match (meta.get("majority_doc_len"), meta.get("majority_sum_len")) {
        (Some(_), Some(_)) => Some(CorpusStats::new(get(&meta, "majority_doc_len")?, get(&meta, "majority_sum_len")?)?),
        _ => None,
    };
    let mode: Mode = get::<String>(&meta, "mode")?.parse()?;
    let config = ModelConfig {
        mode,
        window: WindowSpec {
            window: get(&meta, "window")?,
            stride: get(&meta, "stride")?,
        },
        max_input: get(&meta, "max_input")?,
        max_summary: get(&meta, "max_summary")?,
        k: get(&meta, "k")?,
        d: get(&meta, "d")?,
        stats,
        hidden: get(&meta, "hidden")?,
        train_embeddings: get(&meta, "train_embeddings")?,
    };
    let emb_dim: usize = get(&meta, "emb_dim")?;
    let vocab = Vocabulary::new(words)?;

    let mut weights = Weights::zeros(emb_dim, config.hidden);
    fill(&mut data, &mut weights, "")?;
    let emb = take_tensor(&mut data, "embeddings", &[vocab.len(), emb_dim])?;
    let embeddings = EmbeddingTable {
        matrix: Array2::from_shape_vec((vocab.len(), emb_dim), emb).map_err(|e| Error::Shape(e.to_string()))?,
    };
    let model = Model::from_parts(config, vocab, Params { weights, embeddings })?;

    let training = if meta.contains_key("adam_step") {
        let mut adam = AdamState::new(&model);
        adam.step = get(&meta, "adam_step")?;
        fill(&mut data, &mut adam.m, "adam.m.")?;
        fill(&mut data, &mut adam.v, "adam.v.")?;
        let rows = adam.m_emb.dim();
        adam.m_emb = Array2::from_shape_vec(rows, take_tensor(&mut data, "adam.m.embeddings", &[rows.0, rows.1])?)
            .map_err(|e| Error::Shape(e.to_string()))?;
        adam.v_emb = Array2::from_shape_vec(rows, take_tensor(&mut data, "adam.v.embeddings", &[rows.0, rows.1])?)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Some(TrainingState {
            adam,
            epoch: get(&meta, "epoch")?,
        })
    } else {
        None
    };
    if let Some(name) = data.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
    }
    Ok(Checkpoint { model, training })
}

/// Writes `bytes` to a temporary sibling file and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(checkpoint))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
