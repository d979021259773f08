//! Mask and field files: a JSON sidecar plus a raw x-fastest payload next to
//! it (`name.json` / `name.raw`), and binary PGM slice renders.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Axis, BinaryMask, GridMeta, ScalarField};
use crate::error::{Error, Result};
use crate::util::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    meta: GridMeta,
    dtype: DType,
    byte_order: String,
}

fn payload_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("raw")
}

fn write_sidecar(json_path: &Path, meta: &GridMeta, dtype: DType, payload: &[u8]) -> Result<()> {
    let sidecar = Sidecar {
        meta: *meta,
        dtype,
        byte_order: "little".into(),
    };
    write_atomic(&payload_path(json_path), payload)?;
    write_atomic(
        json_path,
        serde_json::to_string_pretty(&sidecar)?.as_bytes(),
    )
}

fn read_sidecar(json_path: &Path) -> Result<(Sidecar, Vec<u8>)> {
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(json_path)?)?;
    sidecar.meta.validate()?;
    if sidecar.byte_order != "little" {
        return Err(Error::Format(format!(
            "unsupported byte order {:?}",
            sidecar.byte_order
        )));
    }
    let payload = fs::read(payload_path(json_path))?;
    let width = match sidecar.dtype {
        DType::U8 => 1,
        DType::F32 => 4,
    };
    let expected = sidecar.meta.len() * width;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    Ok((sidecar, payload))
}

pub fn write_mask(mask: &BinaryMask, json_path: &Path) -> Result<()> {
    let payload: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
    write_sidecar(json_path, mask.meta(), DType::U8, &payload)
}

pub fn read_mask(json_path: &Path) -> Result<BinaryMask> {
    let (sidecar, payload) = read_sidecar(json_path)?;
    let data = match sidecar.dtype {
        DType::U8 => payload.iter().map(|&b| b != 0).collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) > 0.5)
            .collect(),
    };
    BinaryMask::new(sidecar.meta, data)
}

pub fn write_field(field: &ScalarField, json_path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(field.data().len() * 4);
    for &v in field.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_sidecar(json_path, field.meta(), DType::F32, &payload)
}

pub fn read_field(json_path: &Path) -> Result<ScalarField> {
    let (sidecar, payload) = read_sidecar(json_path)?;
    let data = match sidecar.dtype {
        DType::U8 => payload.iter().map(|&b| b as f64).collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    ScalarField::new(sidecar.meta, data)
}

/// Writes one slice orthogonal to `axis` as binary PGM. Values are clamped
/// to `[0, 1]` and scaled to `0..=255`; the first in-plane axis runs along
/// the image rows.
pub fn write_pgm_slice<W: Write>(
    field: &ScalarField,
    axis: Axis,
    index: usize,
    mut out: W,
) -> Result<()> {
    let meta = field.meta();
    let k = axis.index();
    if index >= meta.shape[k] {
        return Err(Error::InvalidArgument(format!(
            "slice {index} out of range for axis of length {}",
            meta.shape[k]
        )));
    }
    let (a, b) = axis.in_plane();
    let (w, h) = (meta.shape[a], meta.shape[b]);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let mut pixels = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let mut v = [0usize; 3];
            v[a] = i;
            v[b] = j;
            v[k] = index;
            let x = field.get(v).clamp(0.0, 1.0);
            pixels.push((x * 255.0).round() as u8);
        }
    }
    out.write_all(&pixels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_and_field_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let meta = GridMeta::new([3, 4, 5], [1.0, 0.5, 2.0], [1.0, -2.0, 0.0]).unwrap();
        let mask = BinaryMask::from_fn(meta, |p| (p[0] + p[1] + p[2]) % 3 == 0);
        let path = dir.path().join("m.json");
        write_mask(&mask, &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
        assert_eq!(fs::read(dir.path().join("m.raw")).unwrap().len(), 60);

        let field = ScalarField::new(meta, (0..60).map(|i| i as f64 * 0.25).collect()).unwrap();
        let fpath = dir.path().join("f.json");
        write_field(&field, &fpath).unwrap();
        assert_eq!(read_field(&fpath).unwrap(), field);
        let text = fs::read_to_string(&fpath).unwrap();
        assert!(text.contains("\"spacing_mm\"") && text.contains("\"f32\""));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let meta = GridMeta::cube(4, 1.0).unwrap();
        let path = dir.path().join("m.json");
        write_mask(&BinaryMask::empty(meta), &path).unwrap();
        fs::write(dir.path().join("m.raw"), [0u8; 10]).unwrap();
        assert!(matches!(read_mask(&path), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_of_full_mask_is_white() {
        let meta = GridMeta::new([4, 3, 2], [1.0; 3], [0.0; 3]).unwrap();
        let field = BinaryMask::from_fn(meta, |_| true).to_field();
        let mut buf = Vec::new();
        write_pgm_slice(&field, Axis::Z, 1, &mut buf).unwrap();
        let header = b"P5\n4 3\n255\n";
        assert_eq!(&buf[..header.len()], header);
        assert!(buf[header.len()..].iter().all(|&p| p == 255));
        assert_eq!(buf.len(), header.len() + 12);
        assert!(write_pgm_slice(&field, Axis::Z, 2, &mut Vec::new()).is_err());
    }
}
