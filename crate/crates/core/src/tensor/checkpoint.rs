//! Binary checkpoint format.
//!
//! Layout: one JSON header line (an ordered array of `{"name", "shape"}`
//! entries) terminated by `'\n'`, followed by the tensors' raw little-endian
//! 32-bit floats concatenated in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes named tensors to `path` in header order.
pub fn save_checkpoint<P: AsRef<Path>>(path: P, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let header: Vec<HeaderEntry> = entries
        .iter()
        .map(|(name, t)| HeaderEntry { name: name.clone(), shape: t.shape().to_vec() })
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, t) in entries {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back as named tensors, validating that the payload
/// length matches the header exactly.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Format("checkpoint header missing terminating newline".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Vec<HeaderEntry> = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;

    let mut out = Vec::with_capacity(header.len());
    for entry in &header {
        let len: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; len * 4];
        r.read_exact(&mut buf).map_err(|_| {
            Error::Format(format!(
                "checkpoint payload too short for tensor '{}' of shape {:?}",
                entry.name, entry.shape
            ))
        })?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("checkpoint has trailing bytes beyond header contents".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let a = Tensor::<f32>::new(&[2, 3], Fill::Uniform { seed: 1, lo: -1.0, hi: 1.0 }).unwrap();
        let b = Tensor::<f32>::new(&[4], Fill::Const(0.5)).unwrap();
        save_checkpoint(&path, &[("a".into(), a.clone()), ("b".into(), b.clone())]).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "a");
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].0, "b");
        assert_eq!(loaded[1].1, b);
    }

    #[test]
    fn short_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ckpt");
        std::fs::write(&path, b"[{\"name\":\"a\",\"shape\":[4]}]\n\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.ckpt");
        let a = Tensor::<f32>::new(&[1], Fill::Const(1.0)).unwrap();
        save_checkpoint(&path, &[("a".into(), a)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
