//! Binary tensor containers, JSONL helpers, and content hashing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for line in lines {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let r = BufReader::new(File::open(path)?);
    r.lines().map(|l| l.map_err(Error::from)).collect()
}

/// Element type tag inside a tensor container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(Error::Checkpoint(format!("unknown dtype code {c}"))),
        }
    }
}

/// One named tensor as stored on disk. Values are carried as f64 in memory;
/// the dtype controls the on-disk width.
#[derive(Debug, Clone)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub rows: usize,
    pub cols: usize,
    /// 0 = frozen, 1 = fully trainable, 2+k encodes "rows >= k trainable".
    pub trainable_tag: u64,
    pub data: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"PTTC";
const VERSION: u32 = 1;

/// Writes a tensor container: magic, version, a JSON metadata blob, then
/// named tensors in the given order. Byte-stable for identical inputs.
pub fn write_container(path: &Path, meta_json: &str, tensors: &[StoredTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = meta_json.as_bytes();
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[t.dtype.code()])?;
        w.write_all(&(t.rows as u64).to_le_bytes())?;
        w.write_all(&(t.cols as u64).to_le_bytes())?;
        w.write_all(&t.trainable_tag.to_le_bytes())?;
        if t.data.len() != t.rows * t.cols {
            return Err(Error::Shape(format!(
                "tensor {}: data len {} != {}x{}",
                t.name,
                t.data.len(),
                t.rows,
                t.cols
            )));
        }
        match t.dtype {
            DType::F32 => {
                for v in &t.data {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
            DType::F64 => {
                for v in &t.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(String, Vec<StoredTensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta, "metadata")?;
    let meta = String::from_utf8(meta)
        .map_err(|e| Error::Checkpoint(format!("metadata not utf8: {e}")))?;
    let n_tensors = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("tensor name not utf8: {e}")))?;
        let mut code = [0u8; 1];
        read_exact(&mut r, &mut code, "dtype")?;
        let dtype = DType::from_code(code[0])?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let trainable_tag = read_u64(&mut r)?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
        let mut data = Vec::with_capacity(n);
        match dtype {
            DType::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..n {
                    read_exact(&mut r, &mut buf, &name)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            DType::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    read_exact(&mut r, &mut buf, &name)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
        }
        tensors.push(StoredTensor {
            name,
            dtype,
            rows,
            cols,
            trainable_tag,
            data,
        });
    }
    Ok((meta, tensors))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, "u16")?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "u32")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "u64")?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let tensors = vec![
            StoredTensor {
                name: "a".into(),
                dtype: DType::F64,
                rows: 2,
                cols: 3,
                trainable_tag: 1,
                data: vec![1.0, -2.5, 3.25, 0.0, 1e-9, 7.0],
            },
            StoredTensor {
                name: "b.c".into(),
                dtype: DType::F32,
                rows: 1,
                cols: 2,
                trainable_tag: 0,
                data: vec![0.5, -0.25],
            },
        ];
        write_container(&path, "{\"k\":1}", &tensors).unwrap();
        let (meta, back) = read_container(&path).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].data, tensors[0].data);
        assert_eq!(back[1].data, tensors[1].data);
        assert_eq!(back[1].dtype, DType::F32);
    }

    #[test]
    fn truncated_container_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let tensors = vec![StoredTensor {
            name: "a".into(),
            dtype: DType::F64,
            rows: 4,
            cols: 4,
            trainable_tag: 1,
            data: vec![0.0; 16],
        }];
        write_container(&path, "{}", &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(read_container(&path).is_err());
    }
}
