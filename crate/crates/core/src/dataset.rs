//! Binary scene files.
//!
//! Little-endian layout: magic `CXSD`, `u32` version, `u32` grid, `u32`
//! tile_px, `u32` channels, `u32` concepts, `u64` scene count; then per scene
//! `u64` id, `u64` label mask and the `f32` mosaic in (channel, row, col)
//! order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use numkernel::Tensor;

use crate::error::{CxsError, Result};
use crate::scene::{Scene, SceneSpec};

pub const DATASET_MAGIC: [u8; 4] = *b"CXSD";
pub const DATASET_VERSION: u32 = 1;

/// Geometry recorded in a dataset header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub grid: u32,
    pub tile_px: u32,
    pub channels: u32,
    pub concepts: u32,
}

impl DatasetHeader {
    pub fn of(spec: &SceneSpec) -> Self {
        Self {
            grid: spec.grid as u32,
            tile_px: spec.tile_px as u32,
            channels: spec.channels as u32,
            concepts: spec.concepts as u32,
        }
    }

    pub fn matches(&self, spec: &SceneSpec) -> Result<()> {
        if *self != Self::of(spec) {
            return Err(CxsError::Geometry(format!(
                "dataset header {self:?} does not match configured geometry {:?}",
                Self::of(spec)
            )));
        }
        Ok(())
    }

    fn mosaic_len(&self) -> usize {
        let side = (self.grid * self.tile_px) as usize;
        self.channels as usize * side * side
    }
}

pub(crate) fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CxsError::Truncated(what),
        _ => CxsError::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &'static str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize, what: &'static str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 4 * n];
    read_exact_or(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn check_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    read_exact_or(r, &mut found, "magic")?;
    if found != expected {
        return Err(CxsError::BadMagic { expected, found });
    }
    Ok(())
}

pub fn write_dataset_to<W: Write>(w: &mut W, header: DatasetHeader, scenes: &[Scene]) -> Result<()> {
    w.write_all(&DATASET_MAGIC)?;
    for v in [DATASET_VERSION, header.grid, header.tile_px, header.channels, header.concepts] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(scenes.len() as u64).to_le_bytes())?;
    let expected = header.mosaic_len();
    for s in scenes {
        if s.hr_mosaic.numel() != expected {
            return Err(CxsError::Geometry(format!(
                "scene {} mosaic has {} values, header implies {expected}",
                s.scene_id,
                s.hr_mosaic.numel()
            )));
        }
        w.write_all(&s.scene_id.to_le_bytes())?;
        w.write_all(&s.labels.to_le_bytes())?;
        write_f32s(w, s.hr_mosaic.data())?;
    }
    Ok(())
}

pub fn read_dataset_from<R: Read>(r: &mut R) -> Result<(DatasetHeader, Vec<Scene>)> {
    check_magic(r, DATASET_MAGIC)?;
    let version = read_u32(r, "version")?;
    if version != DATASET_VERSION {
        return Err(CxsError::VersionMismatch {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let header = DatasetHeader {
        grid: read_u32(r, "header")?,
        tile_px: read_u32(r, "header")?,
        channels: read_u32(r, "header")?,
        concepts: read_u32(r, "header")?,
    };
    if header.grid == 0 || header.tile_px == 0 || header.channels == 0 || header.concepts > 64 {
        return Err(CxsError::Geometry(format!("invalid dataset header {header:?}")));
    }
    let count = read_u64(r, "scene count")?;
    let side = (header.grid * header.tile_px) as usize;
    let mut scenes = Vec::new();
    for _ in 0..count {
        let scene_id = read_u64(r, "scene id")?;
        let labels = read_u64(r, "labels")?;
        let data = read_f32s(r, header.mosaic_len(), "mosaic")?;
        scenes.push(Scene {
            scene_id,
            labels,
            hr_mosaic: Tensor::new([header.channels as usize, side, side], data)?,
        });
    }
    Ok((header, scenes))
}

pub fn write_dataset(path: &Path, header: DatasetHeader, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, header, scenes)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    read_dataset_from(&mut BufReader::new(File::open(path)?))
}
