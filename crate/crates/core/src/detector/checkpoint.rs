//! Versioned binary checkpoints: the settings text the model was built
//! from, training progress, and every named parameter array.
//!
//! Layout (little endian): magic, `u32` version, settings text, `u64`
//! epoch, `u64` step, `f64` lr, `u64` array count, then per array its name,
//! four `u64` dims and the `f64` values. Strings are `u64` length + UTF-8.

use std::path::{Path, PathBuf};

use ef_tensor::Tensor;

use super::model::Detector;
use crate::config::Settings;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EFFACECK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
}

pub fn encode_checkpoint(settings: &Settings, detector: &Detector, progress: Progress) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut b, &settings.to_text());
    b.extend_from_slice(&progress.epoch.to_le_bytes());
    b.extend_from_slice(&progress.step.to_le_bytes());
    b.extend_from_slice(&progress.lr.to_le_bytes());
    b.extend_from_slice(&(detector.params.len() as u64).to_le_bytes());
    for (_, name, t) in detector.params.iter() {
        put_str(&mut b, name);
        for d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

/// Writes to a sibling temporary file and renames it into place, so an
/// interrupted save never clobbers the previous checkpoint.
pub fn save_checkpoint(path: &Path, settings: &Settings, detector: &Detector, progress: Progress) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, encode_checkpoint(settings, detector, progress))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Settings, Detector, Progress)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint { message, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Settings, Detector, Progress)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("not a detector checkpoint"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version} (expected {VERSION})")));
    }
    let settings = Settings::from_text(&r.string()?)?;
    let progress = Progress {
        epoch: r.u64()?,
        step: r.u64()?,
        lr: f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
    };
    let mut detector = Detector::build(&settings.model, 0)?;
    let count = r.u64()? as usize;
    if count != detector.params.len() {
        return Err(bad(&format!(
            "{count} arrays stored, model has {}",
            detector.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name = r.string()?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u64()? as usize;
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("array too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = detector
            .params
            .find(&name)
            .ok_or_else(|| bad(&format!("unknown array `{name}`")))?;
        if detector.params.get(id).shape() != shape {
            return Err(bad(&format!(
                "array `{name}` has shape {shape:?}, model expects {:?}",
                detector.params.get(id).shape()
            )));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(bad(&format!("array `{name}` stored twice")));
        }
        detector.params.set(id, Tensor::from_vec(shape, data));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((settings, detector, progress))
}

fn bad(message: &str) -> Error {
    Error::Checkpoint {
        path: PathBuf::new(),
        message: message.to_string(),
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u64).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}
