//! Binary checkpoints of model parameters and optimizer state.
//!
//! Layout (little endian): magic `CMAR`, `u32` version, `u32` header length,
//! JSON header, `u64` step, `u32` record count, then records of
//! `u32` name length, name, `u32` rank, `u32` dims, `f32` values.
//! Adam moments are stored as records named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CanvasMar, ModelConfig};
use crate::numerics::{AdamConfig, OptState, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CMAR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub step: u64,
    pub records: Vec<(String, Tensor<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode<T: Scalar>(model: &CanvasMar<T>, opt: &OptState<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        model: model.config.clone(),
        adam: opt.config,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    out.extend_from_slice(&opt.step.to_le_bytes());
    let ids: Vec<_> = model.params.ids().collect();
    put_u32(&mut out, (3 * ids.len()) as u32);
    let mut record = |name: &str, t: &Tensor<T>| {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for x in t.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    };
    for &id in &ids {
        record(model.params.name(id), model.params.get(id));
    }
    for &id in &ids {
        record(&format!("adam.m/{}", model.params.name(id)), &opt.m[id.index()]);
    }
    for &id in &ids {
        record(&format!("adam.v/{}", model.params.name(id)), &opt.v[id.index()]);
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &CanvasMar<T>, opt: &OptState<T>) -> Result<()> {
    let bytes = encode(model, opt)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<X>(&self, reason: impl Into<String>) -> Result<X> {
        Err(Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what} at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return r.fail("not a checkpoint (bad magic)");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u32("header length")? as usize;
    let header: CheckpointHeader = match serde_json::from_slice(r.take(len, "header")?) {
        Ok(h) => h,
        Err(e) => return r.fail(format!("bad header: {e}")),
    };
    let step = r.u64("step")?;
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = match std::str::from_utf8(r.take(nlen, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail("record name is not UTF-8"),
        };
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 4, "values")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return r.fail(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(Checkpoint { header, step, records })
}

impl Checkpoint {
    /// Rebuilds the model and optimizer. With `expected`, the stored model
    /// config must match it exactly; the first differing field is reported.
    pub fn restore<T: Scalar>(&self, expected: Option<&ModelConfig>) -> Result<(CanvasMar<T>, OptState<T>)> {
        if let Some(exp) = expected {
            if let Some((field, want, found)) = exp.first_difference(&self.header.model) {
                return Err(Error::ConfigMismatch {
                    field,
                    expected: want,
                    found,
                });
            }
        }
        let mut model = CanvasMar::<T>::new(self.header.model.clone(), 0)?;
        let mut opt = OptState::new(&model.params, self.header.adam);
        opt.step = self.step;
        let ids: Vec<_> = model.params.ids().collect();
        if self.records.len() != 3 * ids.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint holds {} records, model needs {}",
                self.records.len(),
                3 * ids.len()
            )));
        }
        let lookup = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = self
                .records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape {
                return Err(Error::InvalidConfig(format!(
                    "{name} has shape {:?}, model needs {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.cast())
        };
        for id in ids {
            let name = model.params.name(id).to_string();
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = lookup(&name, &shape)?;
            opt.m[id.index()] = lookup(&format!("adam.m/{name}"), &shape)?;
            opt.v[id.index()] = lookup(&format!("adam.v/{name}"), &shape)?;
        }
        Ok((model, opt))
    }
}
