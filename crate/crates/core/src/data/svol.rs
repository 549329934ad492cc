//! SVOL: a minimal bit-exact volume file format.
//!
//! Layout, all integers big-endian:
//!
//! | bytes  | content                              |
//! |--------|--------------------------------------|
//! | 0..4   | magic ASCII `SVOL`                   |
//! | 4..6   | version `u16` = 1                    |
//! | 6..18  | three `u32` extents D, H, W          |
//! | 18..   | `D*H*W` IEEE-754 `f32`, row-major (W fastest) |
//!
//! Every extent must lie in `1..=512`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{elem, Element, Tensor};

const MAGIC: &[u8; 4] = b"SVOL";
const VERSION: u16 = 1;
const MAX_DIM: u32 = 512;
const HEADER_LEN: usize = 18;

/// Serializes a `[1,D,H,W]` (or `[D,H,W]`) tensor to SVOL bytes.
pub fn encode_volume<T: Element>(volume: &Tensor<T>) -> Result<Vec<u8>> {
    let dims = volume_dims(volume)?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + volume.numel() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_be_bytes());
    for d in dims {
        bytes.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in volume.data() {
        bytes.extend_from_slice(&(v.to_f64().unwrap() as f32).to_be_bytes());
    }
    Ok(bytes)
}

pub fn write_volume<T: Element>(path: &Path, volume: &Tensor<T>) -> Result<()> {
    let bytes = encode_volume(volume)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an SVOL file into a channel-major `[1,D,H,W]` tensor.
pub fn read_volume<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

pub fn decode_volume<T: Element>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    let version = u16::from_be_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::BadVersion { version });
    }
    let mut dims = [0u32; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_be_bytes([
            bytes[6 + 4 * i],
            bytes[7 + 4 * i],
            bytes[8 + 4 * i],
            bytes[9 + 4 * i],
        ]);
        if *d > MAX_DIM {
            return Err(Error::DimOverflow { path: path.to_path_buf(), dim: *d });
        }
        if *d == 0 {
            return Err(Error::InvalidDims {
                path: path.to_path_buf(),
                detail: format!("zero extent in {dims:?}"),
            });
        }
    }
    let numel = dims.iter().map(|&d| d as usize).product::<usize>();
    let expected = HEADER_LEN + numel * 4;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes { path: path.to_path_buf(), got: bytes.len() - expected });
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = HEADER_LEN + i * 4;
        let v = f32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "read_volume" });
        }
        data.push(elem::<T>(v as f64));
    }
    Tensor::from_vec(vec![1, dims[0] as usize, dims[1] as usize, dims[2] as usize], data)
}

fn volume_dims<T: Element>(volume: &Tensor<T>) -> Result<[usize; 3]> {
    match volume.shape() {
        [1, d, h, w] | [d, h, w] => {
            if [*d, *h, *w].iter().any(|&e| e > MAX_DIM as usize) {
                return Err(Error::DimOverflow {
                    path: "<in-memory>".into(),
                    dim: *[*d, *h, *w].iter().max().unwrap() as u32,
                });
            }
            Ok([*d, *h, *w])
        }
        s => Err(Error::shape("write_volume", format!("expected [1,D,H,W] or [D,H,W], got {s:?}"))),
    }
}
