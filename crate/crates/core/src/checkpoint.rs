//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      7 bytes   "MOEUP1\0"
//! version    u32       FORMAT_VERSION
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! params     tensor section
//! adam_m     tensor section
//! adam_v     tensor section
//! step       u64
//! beta1, beta2, eps, beta1_pow, beta2_pow   5 × f64
//! ```
//!
//! A tensor section is a `u32` count followed by that many records of
//! `u32 name_len`, the UTF-8 name, `u32 rows`, `u32 cols` and `rows·cols`
//! `f64` values in row-major order. Selection biases are stored as ordinary
//! tensors named `blocks.{i}.select_bias`. Nothing may follow the last field.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoEModel, ModelConfig, OptState, Params};
use crate::upcycle::ReplicationPlan;

pub const MAGIC: &[u8; 7] = b"MOEUP1\0";
pub const FORMAT_VERSION: u32 = 1;

/// JSON header of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Run seed; model init, data and operator seeds derive from it.
    pub seed: u64,
    pub data_seed: u64,
    pub operator_seed: u64,
    /// Plan of the last expansion, if any.
    #[serde(default)]
    pub plan: Option<ReplicationPlan>,
    /// Free-form experiment settings.
    #[serde(default)]
    pub experiment: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(model: &ModelConfig, seed: u64) -> Self {
        Self {
            model: model.clone(),
            seed,
            data_seed: seed ^ 1,
            operator_seed: seed ^ 2,
            plan: None,
            experiment: serde_json::Value::Null,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: MoEModel,
    pub opt: OptState,
}

fn put_tensors(out: &mut Vec<u8>, p: &Params) {
    let names = p.tensor_names();
    let tensors = p.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for x in t.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.meta.model != ckpt.model.config {
        return Err(Error::InvalidState(
            "checkpoint header config differs from the model".into(),
        ));
    }
    if !ckpt.opt.matches(&ckpt.model.params) {
        return Err(Error::InvalidState("optimizer state does not match model".into()));
    }
    let meta = serde_json::to_vec(&ckpt.meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    put_tensors(&mut out, &ckpt.model.params);
    put_tensors(&mut out, &ckpt.opt.m);
    put_tensors(&mut out, &ckpt.opt.v);
    let o = &ckpt.opt;
    out.extend_from_slice(&o.step.to_le_bytes());
    for x in [o.beta1, o.beta2, o.eps, o.beta1_pow, o.beta2_pow] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            detail: detail.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    /// Fills `into` from a tensor section, checking names and shapes.
    fn tensors(&mut self, into: &mut Params, section: &str) -> Result<()> {
        let names = into.tensor_names();
        let count = self.u32(section)? as usize;
        if count != names.len() {
            return self.fail(format!("{section}: {count} tensors, config implies {}", names.len()));
        }
        for (name, t) in names.iter().zip(into.tensors_mut()) {
            let len = self.u32("tensor name length")? as usize;
            let start = self.pos;
            let got = self.take(len, "tensor name")?;
            if got != name.as_bytes() {
                self.pos = start;
                return self.fail(format!(
                    "{section}: expected tensor {name}, found {}",
                    String::from_utf8_lossy(got)
                ));
            }
            let (r, c) = (self.u32("rows")? as usize, self.u32("cols")? as usize);
            if (r, c) != t.shape() {
                return self.fail(format!("{section}: {name} is {r}x{c}, expected {:?}", t.shape()));
            }
            let bytes = self.take(r * c * 8, name)?;
            for (dst, chunk) in t.as_mut_slice().iter_mut().zip(bytes.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic bytes");
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}, expected {FORMAT_VERSION}"));
    }
    let meta_len = r.u64("header length")?;
    let meta_at = r.pos;
    let meta_bytes = r.take(usize::try_from(meta_len).unwrap_or(usize::MAX), "header")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Format {
        offset: meta_at as u64,
        detail: format!("header JSON: {e}"),
    })?;
    let mut model = MoEModel::init(&meta.model).map_err(|e| Error::Format {
        offset: meta_at as u64,
        detail: format!("header config: {e}"),
    })?;
    r.tensors(&mut model.params, "params")?;
    let mut opt = OptState::new(&model.params);
    r.tensors(&mut opt.m, "adam_m")?;
    r.tensors(&mut opt.v, "adam_v")?;
    opt.step = r.u64("step")?;
    opt.beta1 = r.f64("beta1")?;
    opt.beta2 = r.f64("beta2")?;
    opt.eps = r.f64("eps")?;
    opt.beta1_pow = r.f64("beta1_pow")?;
    opt.beta2_pow = r.f64("beta2_pow")?;
    if r.pos != buf.len() {
        return r.fail(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(Checkpoint { meta, model, opt })
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
