//! One array per file: `NAME` holds the raw payload, `NAME.json` the header.
//! A [`VolumeSample`] is stored as `BASE.img` (f32 HU) and `BASE.lbl` (u8).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{f32_to_le, le_to_f32, read_bytes, write_bytes, Echo};
use crate::error::Error;
use crate::synth::VolumeSample;

pub const VOLUME_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }

    pub fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "f32" | "float32" => Ok(Dtype::F32),
            "u8" | "uint8" => Ok(Dtype::U8),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub version: u32,
    pub id: String,
    /// `[D, H, W]`, row-major.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub num_classes: usize,
    /// Echoed flags of the command that wrote the file.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl VolumeHeader {
    pub fn dtype(&self) -> Result<Dtype, Error> {
        Dtype::parse(&self.dtype)
    }

    pub fn voxels(&self) -> Result<usize, Error> {
        if self.dims.contains(&0) {
            return Err(Error::Header(format!(
                "dims {:?} must be positive",
                self.dims
            )));
        }
        self.dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Header(format!("dims {:?} overflow", self.dims)))
    }

    pub fn payload_len(&self) -> Result<usize, Error> {
        let size = self.dtype()?.size();
        self.voxels()?
            .checked_mul(size)
            .ok_or_else(|| Error::Header(format!("dims {:?} overflow", self.dims)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

pub fn parse_header(text: &str) -> Result<VolumeHeader, Error> {
    let header: VolumeHeader =
        serde_json::from_str(text).map_err(|e| Error::Header(e.to_string()))?;
    if header.version != VOLUME_VERSION {
        return Err(Error::VersionMismatch {
            expected: VOLUME_VERSION,
            found: header.version,
        });
    }
    header.dtype()?;
    header.voxels()?;
    if header.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Header(format!(
            "spacing {:?} must be positive",
            header.spacing
        )));
    }
    Ok(header)
}

/// Short payloads are truncation errors; long ones mean the header dims are wrong.
pub fn decode_payload(header: &VolumeHeader, bytes: &[u8]) -> Result<Payload, Error> {
    let expected = header.payload_len()?;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::DimMismatch(format!(
            "header dims {:?} need {expected} bytes, payload has {}",
            header.dims,
            bytes.len()
        )));
    }
    Ok(match header.dtype()? {
        Dtype::F32 => Payload::F32(le_to_f32(bytes)),
        Dtype::U8 => Payload::U8(bytes.to_vec()),
    })
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_array(path: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(header).map_err(|e| Error::Header(e.to_string()))?;
    write_bytes(&sidecar(path), format!("{text}\n").as_bytes())?;
    write_bytes(path, payload)
}

pub fn read_array(path: &Path) -> Result<(VolumeHeader, Payload), Error> {
    let head = sidecar(path);
    let text = String::from_utf8(read_bytes(&head)?).map_err(|e| Error::Header(e.to_string()))?;
    let header = parse_header(&text)?;
    let payload = decode_payload(&header, &read_bytes(path)?)?;
    Ok((header, payload))
}

/// Writes `BASE.img`, `BASE.lbl` and their sidecars.
pub fn write_volume(base: &Path, sample: &VolumeSample, meta: &Echo) -> Result<(), Error> {
    let header = |dtype: Dtype| VolumeHeader {
        version: VOLUME_VERSION,
        id: sample.id.clone(),
        dims: sample.shape,
        spacing: sample.spacing,
        dtype: dtype.as_str().into(),
        num_classes: sample.num_classes,
        meta: meta.clone(),
    };
    let mut image = Vec::with_capacity(sample.image.len() * 4);
    f32_to_le(sample.image.iter().copied(), &mut image);
    write_array(&with_suffix(base, ".img"), &header(Dtype::F32), &image)?;
    write_array(
        &with_suffix(base, ".lbl"),
        &header(Dtype::U8),
        &sample.labels,
    )
}

pub fn read_volume(base: &Path) -> Result<VolumeSample, Error> {
    let (ih, image) = read_array(&with_suffix(base, ".img"))?;
    let (lh, labels) = read_array(&with_suffix(base, ".lbl"))?;
    if ih.dims != lh.dims {
        return Err(Error::DimMismatch(format!(
            "image dims {:?} vs label dims {:?}",
            ih.dims, lh.dims
        )));
    }
    let image = match image {
        Payload::F32(v) => v,
        Payload::U8(_) => return Err(Error::Header("image file must hold f32".into())),
    };
    let labels = match labels {
        Payload::U8(v) => v,
        Payload::F32(_) => return Err(Error::Header("label file must hold u8".into())),
    };
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > lh.num_classes) {
        return Err(Error::Header(format!(
            "label {bad} exceeds class count {}",
            lh.num_classes
        )));
    }
    Ok(VolumeSample {
        id: ih.id,
        shape: ih.dims,
        spacing: ih.spacing,
        num_classes: lh.num_classes,
        image,
        labels,
    })
}

/// Lists `BASE` stems of every `*.img` in `dir`, sorted.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "img") {
            out.push(path.with_extension(""));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dims: [usize; 3], dtype: &str) -> VolumeHeader {
        VolumeHeader {
            version: VOLUME_VERSION,
            id: "x".into(),
            dims,
            spacing: [1.0; 3],
            dtype: dtype.into(),
            num_classes: 3,
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn float_payload_size() {
        assert_eq!(
            header([64, 64, 64], "f32").payload_len().unwrap(),
            1_048_576
        );
    }

    #[test]
    fn errors_are_distinct() {
        let h = header([2, 2, 2], "f32");
        assert!(matches!(
            decode_payload(&h, &[0; 31]),
            Err(Error::TruncatedPayload {
                expected: 32,
                found: 31
            })
        ));
        assert!(matches!(
            decode_payload(&h, &[0; 36]),
            Err(Error::DimMismatch(_))
        ));
        assert!(matches!(
            decode_payload(&header([2, 2, 2], "f16"), &[0; 16]),
            Err(Error::UnknownDtype(_))
        ));
        assert!(matches!(
            parse_header("{\"dims\": [1,"),
            Err(Error::Header(_))
        ));
    }

    #[test]
    fn huge_dims_do_not_overflow() {
        let h = header([usize::MAX, 2, 2], "f32");
        assert!(matches!(h.payload_len(), Err(Error::Header(_))));
    }
}

#[cfg(test)]
mod file_tests {
    use super::*;
    use crate::synth::{generate, PhantomSpec};

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let sample = generate(&PhantomSpec::micro().with_seed(3)).unwrap();
        let base = dir.path().join("case");
        write_volume(&base, &sample, &Echo::new()).unwrap();
        assert_eq!(read_volume(&base).unwrap(), sample);
        assert_eq!(list_volumes(dir.path()).unwrap(), vec![base]);
    }
}
