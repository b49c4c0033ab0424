//! ELST binary tensor container.
//!
//! Layout: magic `ELST`, `u16` version (1), `u8` dtype code (0 = f32,
//! 1 = u8), `u8` rank, `rank x u32` extents, then the little-endian
//! row-major payload. Nothing may follow the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"ELST";
pub const VERSION: u16 = 1;

pub trait ElstElement: Copy + Sized {
    const CODE: u8;
    const WIDTH: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl ElstElement for f32 {
    const CODE: u8 = 0;
    const WIDTH: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl ElstElement for u8 {
    const CODE: u8 = 1;
    const WIDTH: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn take(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

pub fn encode<E: ElstElement>(dims: &[usize], data: &[E]) -> Result<Vec<u8>> {
    if dims.len() > u8::MAX as usize {
        return Err(Error::Validation(format!(
            "rank {} exceeds 255",
            dims.len()
        )));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Validation(format!(
            "dims {dims:?} do not cover {} values",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + data.len() * E::WIDTH);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(E::CODE);
    out.push(dims.len() as u8);
    for &d in dims {
        let d =
            u32::try_from(d).map_err(|_| Error::Validation(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        v.put(&mut out);
    }
    Ok(out)
}

fn need(bytes: &[u8], offset: usize, len: usize, what: &str) -> Result<()> {
    if bytes.len() < offset + len {
        return Err(Error::Format {
            offset: bytes.len(),
            detail: format!("truncated {what}: need {len} bytes at offset {offset}"),
        });
    }
    Ok(())
}

pub fn decode<E: ElstElement>(bytes: &[u8]) -> Result<(Vec<usize>, Vec<E>)> {
    need(bytes, 0, 8, "header")?;
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {:?}", &bytes[..4]),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    if bytes[6] != E::CODE {
        return Err(Error::Format {
            offset: 6,
            detail: format!("dtype code {} where {} was expected", bytes[6], E::CODE),
        });
    }
    let rank = bytes[7] as usize;
    let mut off = 8;
    need(bytes, off, 4 * rank, "extents")?;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: off,
                detail: "zero extent".into(),
            });
        }
        dims.push(d);
        off += 4;
    }
    let n: usize = dims.iter().product();
    need(bytes, off, n * E::WIDTH, "payload")?;
    let data = bytes[off..off + n * E::WIDTH]
        .chunks_exact(E::WIDTH)
        .map(E::take)
        .collect();
    off += n * E::WIDTH;
    if off != bytes.len() {
        return Err(Error::Format {
            offset: off,
            detail: format!("{} trailing bytes", bytes.len() - off),
        });
    }
    Ok((dims, data))
}

pub fn write_file<E: ElstElement>(path: &Path, dims: &[usize], data: &[E]) -> Result<()> {
    let bytes = encode(dims, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file<E: ElstElement>(path: &Path) -> Result<(Vec<usize>, Vec<E>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_file(path, t.dims(), t.data())
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let (dims, data) = read_file::<f32>(path)?;
    Tensor::from_vec(&dims, data)
}
