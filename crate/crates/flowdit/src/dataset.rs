//! Binary dataset files and raw-array import/export.
//!
//! Layout, all little-endian: `"VXFD"`, u32 version, u32 field count,
//! u32 `dx, dy, dz, c`, then per field a u64 time index followed by the
//! f32 samples (x slowest, channel fastest), then f32 `mean[c]`, `std[c]`.

use std::fs;
use std::path::Path;

use flowdit_core::flowgen::{FieldMeta, FlowDataset, NormStats, VoxelField};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"VXFD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 4 * 6;

/// Exact file size of a dataset with `n` fields.
pub fn dataset_file_size(n: usize, extents: [usize; 3], channels: usize) -> usize {
    let voxels: usize = extents.iter().product();
    HEADER_BYTES + n * (8 + 4 * voxels * channels) + 8 * channels
}

pub fn encode_dataset(ds: &FlowDataset) -> Result<Vec<u8>> {
    let ext = ds.extents();
    let ch = ds.channels();
    let mut out = Vec::with_capacity(dataset_file_size(ds.len(), ext, ch));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION as usize, ds.len(), ext[0], ext[1], ext[2], ch] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit the u32 header")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in &ds.fields {
        out.extend_from_slice(&f.meta.time_index.to_le_bytes());
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in ds.stats.mean.iter().chain(&ds.stats.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<FlowDataset> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4).map_err(|_| Error::Version("not a dataset file: too short".into()))?;
    if magic != DATASET_MAGIC {
        return Err(Error::Version(format!("not a dataset file: magic {magic:02x?}")));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version(format!(
            "unsupported dataset version {version} (expected {DATASET_VERSION})"
        )));
    }
    let n = cur.u32()? as usize;
    let ext = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let ch = cur.u32()? as usize;
    let want = dataset_file_size(n, ext, ch);
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "dataset of {n} fields {ext:?}x{ch} needs {want} bytes, file has {}",
            bytes.len()
        )));
    }
    let voxels: usize = ext.iter().product();
    let mut fields = Vec::with_capacity(n);
    for _ in 0..n {
        let time_index = cur.u64()?;
        let data = cur.f32s(voxels * ch)?;
        let meta = FieldMeta {
            time_index,
            ..FieldMeta::default()
        };
        fields.push(VoxelField::new(ext, ch, data, meta)?);
    }
    let mean = cur.f32s(ch)?;
    let std = cur.f32s(ch)?;
    let mut ds = FlowDataset::new(fields)?;
    ds.stats = NormStats { mean, std };
    Ok(ds)
}

pub fn write_dataset(ds: &FlowDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<FlowDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawDtype {
    F32,
    F64,
}

impl RawDtype {
    pub fn size(self) -> usize {
        match self {
            RawDtype::F32 => 4,
            RawDtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for RawDtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(RawDtype::F32),
            "f64" | "float64" => Ok(RawDtype::F64),
            _ => Err(Error::Usage(format!("unknown dtype `{s}` (f32 or f64)"))),
        }
    }
}

/// Element order of each field in a raw file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawOrder {
    /// x slowest, channel fastest (the internal layout).
    XyzC,
    /// channel slowest, then z, y, with x fastest (Fortran order of
    /// `[dx, dy, dz, c]`).
    CZyx,
}

impl std::str::FromStr for RawOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyzc" | "c" => Ok(RawOrder::XyzC),
            "czyx" | "fortran" => Ok(RawOrder::CZyx),
            _ => Err(Error::Usage(format!("unknown order `{s}` (xyzc or czyx)"))),
        }
    }
}

/// Position in a raw record of internal element `(x, y, z, c)`.
fn raw_offset(order: RawOrder, extents: [usize; 3], channels: usize, x: usize, y: usize, z: usize, c: usize) -> usize {
    let [dx, dy, dz] = extents;
    match order {
        RawOrder::XyzC => ((x * dy + y) * dz + z) * channels + c,
        RawOrder::CZyx => ((c * dz + z) * dy + y) * dx + x,
    }
}

/// Converts concatenated raw fields. `source` is recorded in every field's
/// meta; non-finite values are rejected with their flat element index.
pub fn decode_raw(
    bytes: &[u8],
    extents: [usize; 3],
    channels: usize,
    dtype: RawDtype,
    order: RawOrder,
    source: &str,
) -> Result<FlowDataset> {
    let per_field = extents.iter().product::<usize>() * channels;
    let record = per_field * dtype.size();
    if record == 0 || bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Format(format!(
            "{source}: {} bytes is not a positive multiple of one {extents:?}x{channels} {dtype:?} field ({record} bytes)",
            bytes.len()
        )));
    }
    let values: Vec<f64> = match dtype {
        RawDtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect(),
        RawDtype::F64 => bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("{source}: non-finite value at flat index {i}")));
    }
    let n = bytes.len() / record;
    let mut fields = Vec::with_capacity(n);
    for k in 0..n {
        let raw = &values[k * per_field..(k + 1) * per_field];
        let meta = FieldMeta {
            generator: "import".into(),
            time_index: k as u64,
            source: Some(source.to_string()),
            ..FieldMeta::default()
        };
        let field = VoxelField::from_fn(extents, channels, meta, |x, y, z, c| {
            raw[raw_offset(order, extents, channels, x, y, z, c)]
        })?;
        fields.push(field);
    }
    Ok(FlowDataset::new(fields)?)
}

pub fn encode_raw(ds: &FlowDataset, dtype: RawDtype, order: RawOrder) -> Vec<u8> {
    let ext = ds.extents();
    let ch = ds.channels();
    let per_field = ext.iter().product::<usize>() * ch;
    let mut out = Vec::with_capacity(ds.len() * per_field * dtype.size());
    for f in &ds.fields {
        let mut vals = vec![0.0f32; per_field];
        for x in 0..ext[0] {
            for y in 0..ext[1] {
                for z in 0..ext[2] {
                    for c in 0..ch {
                        vals[raw_offset(order, ext, ch, x, y, z, c)] = f.at(x, y, z, c);
                    }
                }
            }
        }
        for v in vals {
            match dtype {
                RawDtype::F32 => out.extend_from_slice(&v.to_le_bytes()),
                RawDtype::F64 => out.extend_from_slice(&(v as f64).to_le_bytes()),
            }
        }
    }
    out
}

pub fn import_raw(
    path: &Path,
    extents: [usize; 3],
    channels: usize,
    dtype: RawDtype,
    order: RawOrder,
) -> Result<FlowDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, extents, channels, dtype, order, &path.display().to_string())
}

pub fn export_raw(ds: &FlowDataset, path: &Path, dtype: RawDtype, order: RawOrder) -> Result<()> {
    fs::write(path, encode_raw(ds, dtype, order)).map_err(|e| Error::io(path, e))
}
