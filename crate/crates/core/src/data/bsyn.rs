//! BSYN distilled-set files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `BSYN` |
//! | 4     | version (u32, currently 1) |
//! | 24    | classes, ipc, channels, height, width (u32 each), dtype tag (u32: 0 = f32, 1 = f64) |
//! | 2·n   | labels, u16 each, `n = classes · ipc` |
//! | rest  | pixels, row-major, in the tagged dtype |
//!
//! A JSON sidecar at `<path>.json` carries provenance plus free-form
//! run metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::{Provenance, SyntheticSet};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BSYN";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelDtype {
    F32,
    F64,
}

impl PixelDtype {
    fn tag(self) -> u32 {
        match self {
            PixelDtype::F32 => 0,
            PixelDtype::F64 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            PixelDtype::F32 => 4,
            PixelDtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub provenance: Provenance,
    pub dtype: PixelDtype,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(set: &SyntheticSet, dtype: PixelDtype) -> Vec<u8> {
    let [ch, h, w] = set.image_shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * set.len() + set.images().numel() * dtype.width());
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        set.classes() as u32,
        set.ipc() as u32,
        ch as u32,
        h as u32,
        w as u32,
        dtype.tag(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in set.labels() {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    for &v in set.images().data() {
        match dtype {
            PixelDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            PixelDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8], provenance: Provenance) -> Result<SyntheticSet> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: "BSYN".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile(format!("BSYN header needs {HEADER_LEN} bytes")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != VERSION {
        return Err(Error::VersionUnsupported {
            found: version,
            supported: VERSION,
        });
    }
    let (classes, ipc, ch, h, w) = (
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
        word(5) as usize,
    );
    let dtype = match word(6) {
        0 => PixelDtype::F32,
        1 => PixelDtype::F64,
        t => return Err(Error::InvalidConfig(format!("unknown BSYN dtype tag {t}"))),
    };
    let n = classes * ipc;
    let numel = n * ch * h * w;
    let expected = HEADER_LEN + 2 * n + numel * dtype.width();
    if bytes.len() != expected {
        return Err(Error::TruncatedFile(format!(
            "BSYN body is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let label_bytes = &bytes[HEADER_LEN..HEADER_LEN + 2 * n];
    for (i, pair) in label_bytes.chunks(2).enumerate() {
        let l = u16::from_le_bytes([pair[0], pair[1]]) as usize;
        if l != i / ipc {
            return Err(Error::BadShape(format!(
                "label {l} at row {i} breaks the block layout"
            )));
        }
    }
    let body = &bytes[HEADER_LEN + 2 * n..];
    let data: Vec<f64> = match dtype {
        PixelDtype::F32 => body
            .chunks(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect(),
        PixelDtype::F64 => body
            .chunks(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
    };
    SyntheticSet::new(Tensor::new(vec![n, ch, h, w], data)?, classes, ipc, provenance)
}

/// Saves pixels as f64 with a provenance-only sidecar.
pub fn save_synthetic(set: &SyntheticSet, path: impl AsRef<Path>) -> Result<()> {
    save_synthetic_with_sidecar(set, path, PixelDtype::F64, serde_json::Value::Null)
}

pub fn save_synthetic_with_sidecar(
    set: &SyntheticSet,
    path: impl AsRef<Path>,
    dtype: PixelDtype,
    metadata: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode(set, dtype))?;
    let sidecar = Sidecar {
        provenance: set.provenance.clone(),
        dtype,
        metadata,
    };
    write_atomic(sidecar_path(path), &serde_json::to_vec_pretty(&sidecar)?)
}

/// Loads a BSYN file; provenance comes from the sidecar when present.
pub fn load_synthetic(path: impl AsRef<Path>) -> Result<SyntheticSet> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let side = sidecar_path(path);
    let provenance = if side.exists() {
        serde_json::from_slice::<Sidecar>(&fs::read(side)?)?.provenance
    } else {
        Provenance::default()
    };
    decode(&bytes, provenance)
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<Sidecar> {
    Ok(serde_json::from_slice(&fs::read(sidecar_path(path.as_ref()))?)?)
}
