//! YTF: one UTF-8 JSON header line `{"shape":[...],"dtype":"f32"}`, a `\n`,
//! then the raw little-endian `f32` payload.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
}

pub fn write_ytf_to<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    let header = Header {
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_ytf_from<R: BufRead>(mut r: R) -> Result<Tensor> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Parse {
            position: line.len(),
            message: "missing header terminator".into(),
        });
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1])?;
    if header.dtype != "f32" {
        return Err(Error::Parse {
            position: 0,
            message: format!("unsupported dtype {}", header.dtype),
        });
    }
    let numel: usize = header.shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(|_| Error::Parse {
        position: line.len(),
        message: format!("payload shorter than {} values", numel),
    })?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Parse {
            position: line.len() + payload.len(),
            message: "trailing bytes after payload".into(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(header.shape, data)
}

pub fn write_ytf(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_ytf_to(t, BufWriter::new(File::create(path)?))
}

pub fn read_ytf(path: impl AsRef<Path>) -> Result<Tensor> {
    read_ytf_from(BufReader::new(File::open(path)?))
}
