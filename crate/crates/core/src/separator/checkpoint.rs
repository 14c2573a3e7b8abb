//! Binary parameter checkpoints and learning-curve CSV.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "FRGSEPv1"
//! version     u32      1
//! layers      u32
//! hidden      u32
//! embed_dim   u32
//! bins        u32
//! speakers    u32
//! label_len   u32, then label_len bytes of UTF-8
//! tensors     u32
//! per tensor: u64 element count, then that many f64
//! ```
//!
//! Tensor order: for each layer, the forward cell then the backward cell
//! (`w_in`, `w_rec`, `b_in`, `b_rec` each, row-major), then `w_proj`,
//! `b_proj`, `input_mean`, `input_scale`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::train::EpochRecord;
use super::{SeparatorConfig, SeparatorParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FRGSEPv1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: SeparatorConfig,
    pub label: String,
    pub params: SeparatorParams,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} overflows u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(config: &SeparatorConfig, label: &str, params: &SeparatorParams) -> Result<Vec<u8>> {
    let tensors = params.all_tensors();
    let mut out = Vec::with_capacity(64 + 8 * tensors.iter().map(|t| t.len() + 1).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [config.layers, config.hidden, config.embed_dim, config.bins, config.speakers] {
        put_u32(&mut out, v)?;
    }
    put_u32(&mut out, label.len())?;
    out.extend_from_slice(label.as_bytes());
    put_u32(&mut out, tensors.len())?;
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = SeparatorConfig {
        layers: r.u32()?,
        hidden: r.u32()?,
        embed_dim: r.u32()?,
        bins: r.u32()?,
        speakers: r.u32()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let label_len = r.u32()?;
    let label = std::str::from_utf8(r.take(label_len)?)
        .map_err(|_| Error::Checkpoint("label is not UTF-8".into()))?
        .to_string();
    let mut params = SeparatorParams::zeros(&config);
    let count = r.u32()?;
    let slots = params.all_tensors_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!("{count} tensors, expected {}", slots.len())));
    }
    for (i, slot) in slots.into_iter().enumerate() {
        let len = r.u64()?;
        if len != slot.len() as u64 {
            return Err(Error::Checkpoint(format!("tensor {i} has {len} values, expected {}", slot.len())));
        }
        let raw = r.take(slot.len() * 8)?;
        for (x, chunk) in slot.iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(Checkpoint { config, label, params })
}

pub fn save(path: impl AsRef<Path>, config: &SeparatorConfig, label: &str, params: &SeparatorParams) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(config, label, params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}

pub const CURVE_HEADER: &str = "epoch,train_loss,valid_loss,lr";

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in curve {
        out.push_str(&format!("{},{:.10},{:.10},{:e}\n", r.epoch, r.train_loss, r.valid_loss, r.lr));
    }
    out
}

pub fn save_curve(path: impl AsRef<Path>, curve: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(curve_csv(curve).as_bytes())?;
    Ok(())
}

pub fn load_curve(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::InvalidArgument(format!("{} is not a learning curve", path.display())));
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::InvalidArgument(format!("bad curve row `{line}`"));
            if cols.len() != 4 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: cols[0].parse().map_err(|_| bad())?,
                train_loss: cols[1].parse().map_err(|_| bad())?,
                valid_loss: cols[2].parse().map_err(|_| bad())?,
                lr: cols[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
