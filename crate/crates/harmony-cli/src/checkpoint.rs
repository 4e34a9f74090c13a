//! Checkpoint archive: one file holding the config snapshot, the
//! vocabulary, the training stage, and every named weight array as raw
//! little-endian f64 bytes. `load(save(x))` is bit-exact, and re-saving a
//! loaded checkpoint reproduces the file byte for byte.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8  b"HRMNCKP1"
//! version u32
//! stage   u8            0 = pretrained, 1 = adapted
//! config  u64 len, then that many bytes of config JSON
//! vocab   u64 count, then per token: u64 len + UTF-8 bytes
//! arrays  u64 count, then per array:
//!         u64 name len + UTF-8 name, u64 element count, f64 LE elements
//! ```
//!
//! Arrays are written in sorted name order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use harmony_core::backbone::ToyModel;
use harmony_core::HarmonyConfig;

const MAGIC: &[u8; 8] = b"HRMNCKP1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointStage {
    Pretrained,
    Adapted,
}

impl CheckpointStage {
    fn to_byte(self) -> u8 {
        match self {
            CheckpointStage::Pretrained => 0,
            CheckpointStage::Adapted => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(CheckpointStage::Pretrained),
            1 => Ok(CheckpointStage::Adapted),
            other => bail!("unknown checkpoint stage byte {other}"),
        }
    }
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    write_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("checkpoint truncated at offset {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        Ok(String::from_utf8(self.take(len)?.to_vec())?)
    }
}

/// Serialize a model to checkpoint bytes.
pub fn checkpoint_bytes(model: &mut ToyModel, stage: CheckpointStage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(stage.to_byte());
    let config_json = serde_json::to_string(&model.cfg)?;
    write_str(&mut out, &config_json);
    write_u64(&mut out, model.vocab.len() as u64);
    for token in model.vocab.tokens() {
        write_str(&mut out, token);
    }
    let mut arrays: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    model.visit_params(&mut |name, p| {
        arrays.insert(name.to_string(), p.data.clone());
    });
    write_u64(&mut out, arrays.len() as u64);
    for (name, data) in &arrays {
        write_str(&mut out, name);
        write_u64(&mut out, data.len() as u64);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &mut ToyModel, stage: CheckpointStage, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, stage)?;
    let mut f = fs::File::create(path)
        .with_context(|| format!("creating checkpoint {}", path.display()))?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Rebuild a model from checkpoint bytes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ToyModel, CheckpointStage)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        bail!("not a checkpoint file (bad magic)");
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let stage = CheckpointStage::from_byte(r.take(1)?[0])?;
    let config_json = r.string()?;
    let cfg: HarmonyConfig = serde_json::from_str(&config_json)?;
    let mut model = ToyModel::new(&cfg, 0)?;
    if stage == CheckpointStage::Adapted {
        model.install_adapter(0)?;
    }
    let vocab_count = r.u64()? as usize;
    let mut tokens = Vec::with_capacity(vocab_count);
    for _ in 0..vocab_count {
        tokens.push(r.string()?);
    }
    let expected: Vec<String> = model.vocab.tokens().to_vec();
    if tokens != expected {
        bail!("checkpoint vocabulary does not match this build's roster");
    }
    let array_count = r.u64()? as usize;
    let mut arrays: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..array_count {
        let name = r.string()?;
        let len = r.u64()? as usize;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        arrays.insert(name, data);
    }
    if r.pos != bytes.len() {
        bail!("trailing bytes after checkpoint payload");
    }
    let mut missing = Vec::new();
    model.visit_params(&mut |name, p| match arrays.remove(name) {
        Some(data) if data.len() == p.data.len() => p.data = data,
        Some(data) => missing.push(format!(
            "{name}: expected {} elements, found {}",
            p.data.len(),
            data.len()
        )),
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        bail!("checkpoint arrays do not match the model: {missing:?}");
    }
    if !arrays.is_empty() {
        bail!(
            "checkpoint contains arrays unknown to the model: {:?}",
            arrays.keys().collect::<Vec<_>>()
        );
    }
    Ok((model, stage))
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyModel, CheckpointStage)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?
        .read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}
