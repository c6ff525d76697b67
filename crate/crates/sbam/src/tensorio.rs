//! Binary tensor container.
//!
//! One record is: magic `SBTN`, version (u32 LE), ndim (u32 LE), each dim as
//! u64 LE, then the f32 LE payload in row-major order. A file may hold any
//! number of records back to back; model parameters are stored as eight
//! records in the fixed block order of [`TinyMaeParams::blocks`].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::TinyMaeParams;

const MAGIC: &[u8; 4] = b"SBTN";
const VERSION: u32 = 1;

/// A single dims-plus-payload record.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let expect: u64 = dims.iter().product();
        if expect != data.len() as u64 {
            return Err(Error::shape(
                "TensorRecord::new",
                format!("dims {dims:?} = {expect} elements"),
                format!("buffer of {}", data.len()),
            ));
        }
        Ok(TensorRecord { dims, data })
    }
}

pub fn write_records(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let mut out = Vec::new();
    for rec in records {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(rec.dims.len() as u32).to_le_bytes());
        for &d in &rec.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &rec.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<TensorRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut pos = 0usize;
    let fail = |msg: String| Error::format(path, msg);
    while pos < bytes.len() {
        let header = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| fail(format!("truncated magic at byte {pos}")))?;
        if header != MAGIC {
            return Err(fail(format!("bad magic {header:?} at byte {pos}")));
        }
        pos += 4;
        let version = read_u32(&bytes, &mut pos).ok_or_else(|| fail("truncated version".into()))?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let ndim = read_u32(&bytes, &mut pos).ok_or_else(|| fail("truncated ndim".into()))?;
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            dims.push(read_u64(&bytes, &mut pos).ok_or_else(|| fail("truncated dims".into()))?);
        }
        let count: u64 = dims.iter().product();
        let payload = count as usize * 4;
        let raw = bytes
            .get(pos..pos + payload)
            .ok_or_else(|| fail(format!("truncated payload: need {payload} bytes at {pos}")))?;
        pos += payload;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(TensorRecord { dims, data });
    }
    Ok(records)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    let raw = bytes.get(*pos..*pos + 4)?;
    *pos += 4;
    Some(u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]))
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Option<u64> {
    let raw = bytes.get(*pos..*pos + 8)?;
    *pos += 8;
    Some(u64::from_le_bytes([
        raw[0], raw[1], raw[2], raw[3], raw[4], raw[5], raw[6], raw[7],
    ]))
}

/// Serializes all parameter blocks, shapes included.
pub fn save_params(path: &Path, params: &TinyMaeParams) -> Result<()> {
    let d_in = params.d_in() as u64;
    let d_h = params.d_h() as u64;
    let shapes: [Vec<u64>; 8] = [
        vec![d_in, d_h],
        vec![d_h],
        vec![d_h, d_h],
        vec![d_h, d_h],
        vec![d_h, d_h],
        vec![d_h],
        vec![d_h, d_in],
        vec![d_in],
    ];
    let records: Vec<TensorRecord> = params
        .blocks()
        .iter()
        .zip(shapes)
        .map(|((_, data), dims)| TensorRecord::new(dims, data.to_vec()))
        .collect::<Result<_>>()?;
    write_records(path, &records)
}

pub fn load_params(path: &Path) -> Result<TinyMaeParams> {
    let records = read_records(path)?;
    if records.len() != 8 {
        return Err(Error::format(
            path,
            format!("expected 8 parameter records, found {}", records.len()),
        ));
    }
    if records[0].dims.len() != 2 {
        return Err(Error::format(path, "embed weights must be rank 2"));
    }
    let d_in = records[0].dims[0] as usize;
    let d_h = records[0].dims[1] as usize;
    let mut params = TinyMaeParams::zeros(d_in, d_h);
    for ((name, block), rec) in params.blocks_mut().into_iter().zip(&records) {
        if block.len() != rec.data.len() {
            return Err(Error::format(
                path,
                format!(
                    "block {name}: expected {} values, found {} (dims {:?})",
                    block.len(),
                    rec.data.len(),
                    rec.dims
                ),
            ));
        }
        block.copy_from_slice(&rec.data);
    }
    Ok(params)
}
