//! Binary checkpoints: magic, version, a JSON header, then raw
//! little-endian f64 values (parameters, then optional Adam moments).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::task::ToyTaskSpec;
use crate::data::Stage;
use crate::error::{Error, Result};
use crate::flow::{ModelSpec, VelocityModel};
use crate::numeric::{AdamW, ParamStore, SeededRng, Tensor};

const MAGIC: &[u8; 8] = b"MRGRPOCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: ToyTaskSpec,
    pub model: ModelSpec,
    pub stage: Stage,
    /// Completed optimizer steps of `stage`.
    pub step: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
    optimizer_step: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    /// Step count and first/second moments, when saved.
    pub optimizer: Option<(u64, Vec<Tensor>, Vec<Tensor>)>,
}

fn write_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParamStore,
    optimizer: Option<&AdamW>,
) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        params: params
            .iter()
            .map(|(_, name, p)| ParamEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        optimizer_step: optimizer.map(|o| o.step_count()),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 8 * params.num_scalars() * 3 + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, p) in params.iter() {
        write_values(&mut buf, &p.value);
    }
    if let Some(opt) = optimizer {
        let (m, v) = opt.moments();
        for t in m.iter().chain(v) {
            write_values(&mut buf, t);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(8 * n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(c.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = ParamStore::new();
    for e in &header.params {
        params.add(e.name.clone(), c.tensor(&e.shape)?, e.trainable)?;
    }
    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let m = header
                .params
                .iter()
                .map(|e| c.tensor(&e.shape))
                .collect::<Result<Vec<_>>>()?;
            let v = header
                .params
                .iter()
                .map(|e| c.tensor(&e.shape))
                .collect::<Result<Vec<_>>>()?;
            Some((step, m, v))
        }
    };
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(
            "trailing bytes after checkpoint body".into(),
        ));
    }
    Ok(Checkpoint {
        meta: header.meta,
        params,
        optimizer,
    })
}

impl Checkpoint {
    /// Rebuilds the architecture and installs the saved values.
    pub fn instantiate(&self) -> Result<(VelocityModel, ParamStore)> {
        let (model, mut store) =
            VelocityModel::build(self.meta.model.clone(), &mut SeededRng::new(0))?;
        store.check_layout(&self.params)?;
        store.copy_values_from(&self.params)?;
        let flags: Vec<(String, bool)> = self
            .params
            .iter()
            .map(|(_, n, p)| (n.to_string(), p.trainable))
            .collect();
        for (name, trainable) in flags {
            store.set_trainable(&name, trainable)?;
        }
        Ok((model, store))
    }

    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        match &self.optimizer {
            Some((step, m, v)) => opt.restore(*step, m.clone(), v.clone()),
            None => Err(Error::Checkpoint(
                "checkpoint holds no optimizer state".into(),
            )),
        }
    }
}
