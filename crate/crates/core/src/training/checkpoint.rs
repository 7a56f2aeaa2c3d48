//! Binary checkpoints: `PLCK` magic, u32 version, u64 header length, a JSON
//! header, then every tensor as little-endian f64 in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Vocab;
use crate::model::{Model, ModelConfig};
use crate::numerics::{AdamW, AdamWConfig, ParamStore};
use crate::tensor::Tensor;
use crate::training::{Progress, StageRecord, TrainState};

pub const MAGIC: &[u8; 4] = b"PLCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocab: Vec<String>,
    seed: u64,
    global_step: u64,
    progress: Option<Progress>,
    history: Vec<StageRecord>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

fn put(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        model: state.model.config.clone(),
        vocab: state.model.vocab.words().to_vec(),
        seed: state.seed,
        global_step: state.global_step,
        progress: state.progress.clone(),
        history: state.history.clone(),
        tensors: state
            .store
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        optimizer: state.optimizer.as_ref().map(|o| OptimizerHeader {
            config: o.config,
            step: o.step_count(),
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * state.store.num_scalars() * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in state.store.iter() {
        put(&mut out, t);
    }
    if let Some(opt) = &state.optimizer {
        let (m, v) = opt.moments();
        m.iter().chain(v).for_each(|t| put(&mut out, t));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("checkpoint: bad magic".into()))? != MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut store = ParamStore::new();
    for e in &header.tensors {
        let t = r.tensor(&e.shape)?;
        store.insert(e.name.clone(), t);
    }
    let optimizer = match header.optimizer {
        Some(h) => {
            let mut read_all = || -> Result<Vec<Tensor>> { header.tensors.iter().map(|e| r.tensor(&e.shape)).collect() };
            let m = read_all()?;
            let v = read_all()?;
            Some(AdamW::from_parts(h.config, m, v, h.step))
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let vocab = Vocab::from_list(header.vocab)?;
    let model = Model::bind(header.model, vocab, &store)?;
    Ok(TrainState {
        model,
        store,
        optimizer,
        progress: header.progress,
        global_step: header.global_step,
        seed: header.seed,
        history: header.history,
    })
}

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    from_bytes(&bytes)
}
