//! Binary tensor format: five little-endian `u64` shape words followed by
//! the elements as little-endian IEEE-754 `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Writes `t`; `f64` tensors are narrowed to `f32`.
pub fn write_tensor_to<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    for d in t.shape().0 {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one tensor. Truncated input is an error.
pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut dims = [0usize; 5];
    let mut word = [0u8; 8];
    for d in dims.iter_mut() {
        r.read_exact(&mut word)
            .map_err(|e| Error::Format(format!("tensor header: {e}")))?;
        *d = usize::try_from(u64::from_le_bytes(word))
            .map_err(|_| Error::Format("tensor dimension overflows usize".into()))?;
    }
    let shape = Shape(dims);
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n <= (1 << 34))
        .ok_or_else(|| Error::Format(format!("implausible tensor shape {shape}")))?;
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("tensor body ({numel} elements): {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor_to(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(&mut BufReader::new(f))
}
