//! Flat binary container for named tensor collections (checkpoints, prompt
//! generator banks, optimizer state).
//!
//! Layout: 4-byte magic `FLT0`, little-endian `u32` header length, a JSON
//! header listing `{name, rows, cols}` records in order, then the tensor
//! payloads as little-endian `f64` in the same order. The header order is the
//! canonical parameter order of whatever was saved, so a round trip preserves
//! both values and ordering exactly.

use crate::tensor::Tensor;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"FLT0";

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("payload truncated: expected {expected} values for '{name}', got {got}")]
    Truncated { name: String, expected: usize, got: usize },
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Record {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn write_tensors<W: Write>(
    mut w: W,
    named: &[(&str, &Tensor)],
) -> Result<(), ContainerError> {
    let header: Vec<Record> = named
        .iter()
        .map(|(name, t)| Record { name: name.to_string(), rows: t.rows(), cols: t.cols() })
        .collect();
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ContainerError::Header(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, t) in named {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, ContainerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::Header(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header_json)?;
    let header: Vec<Record> =
        serde_json::from_slice(&header_json).map_err(|e| ContainerError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(header.len());
    for rec in header {
        let n = rec.rows * rec.cols;
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for (i, slot) in data.iter_mut().enumerate() {
            if let Err(e) = r.read_exact(&mut buf) {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    return Err(ContainerError::Truncated {
                        name: rec.name,
                        expected: n,
                        got: i,
                    });
                }
                return Err(e.into());
            }
            *slot = f64::from_le_bytes(buf);
        }
        let t = Tensor::from_vec(rec.rows, rec.cols, data)
            .map_err(|e| ContainerError::Header(e.to_string()))?;
        out.push((rec.name, t));
    }
    Ok(out)
}

pub fn save_tensors(
    path: &std::path::Path,
    named: &[(&str, &Tensor)],
) -> Result<(), ContainerError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(&mut w, named)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &std::path::Path) -> Result<Vec<(String, Tensor)>, ContainerError> {
    read_tensors(std::io::BufReader::new(std::fs::File::open(path)?))
}
