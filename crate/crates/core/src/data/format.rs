//! `AUE1` embedding matrix files.
//!
//! ```text
//! 0..4    magic "AUE1"
//! 4..8    version, u32 LE (= 1)
//! 8..12   rows, u32 LE
//! 12..16  cols, u32 LE
//! 16..24  reserved, zero
//! 24..    rows × cols f32 LE, row-major
//! ```
//!
//! Values are widened to `f64` on read. A matrix whose entries are exactly
//! representable as `f32` survives a write/read cycle bit for bit.

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{domain_err, shape_err, Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"AUE1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

pub fn encode_embeddings(matrix: &Tensor) -> Result<Vec<u8>> {
    if matrix.rank() != 2 {
        return Err(shape_err!(
            "embedding files hold matrices, got shape {:?}",
            matrix.shape()
        ));
    }
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let rows32 = u32::try_from(rows).map_err(|_| shape_err!("too many rows: {rows}"))?;
    let cols32 = u32::try_from(cols).map_err(|_| shape_err!("too many columns: {cols}"))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * matrix.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&rows32.to_le_bytes());
    buf.extend_from_slice(&cols32.to_le_bytes());
    buf.extend_from_slice(&[0u8; 8]);
    for (i, &v) in matrix.data().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(domain_err!("entry {v} at flat index {i} does not fit in f32"));
        }
        buf.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(buf)
}

/// Write `matrix` as an `AUE1` file (temp file + rename).
pub fn write_embeddings(matrix: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_embeddings(matrix)?;
    write_atomic(path, &bytes)
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parse an in-memory `AUE1` buffer; `path` is used only in error messages.
pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (rows, cols) = decode_header(bytes, path)?;
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("payload truncated: {rows}×{cols} needs {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(path, expected, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(path, HEADER_LEN + 4 * i, "non-finite value"));
        }
        data.push(f64::from(v));
    }
    Tensor::matrix(rows, cols, data)
}

fn decode_header(bytes: &[u8], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, bytes.len(), "file shorter than the 24-byte header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(path, 0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(format_err(path, 4, format!("unsupported version {version}")));
    }
    let rows = u32_at(bytes, 8) as usize;
    let cols = u32_at(bytes, 12) as usize;
    if rows == 0 {
        return Err(format_err(path, 8, "zero rows"));
    }
    if cols == 0 {
        return Err(format_err(path, 12, "zero columns"));
    }
    if let Some(i) = bytes[16..24].iter().position(|&b| b != 0) {
        return Err(format_err(path, 16 + i, "reserved header bytes are not zero"));
    }
    Ok((rows, cols))
}

pub fn read_embeddings(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, path)
}

/// Row and column counts from the header alone.
pub fn read_embedding_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = Vec::with_capacity(HEADER_LEN);
    f.by_ref()
        .take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    decode_header(&head, path)
}
