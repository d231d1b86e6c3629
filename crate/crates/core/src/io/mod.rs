//! On-disk formats: raw volumes with JSON sidecars, checkpoints, and CSV
//! exports. Everything is little-endian.

pub mod checkpoint;
pub mod csv;
pub mod volume;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
};
pub use csv::{attention_csv, log_csv, metrics_csv, parse_attention, write_text};
pub use volume::{
    decode_payload, list_volumes, parse_header, read_array, read_volume, write_array, write_volume,
    Dtype, Payload, VolumeHeader,
};

/// `key=value` pairs echoed at the top of every artifact.
pub type Echo = BTreeMap<String, String>;

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32_to_le(values: impl IntoIterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn le_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}
