//! `HRT1` tensor files: magic, four little-endian `u32` dims, raw
//! little-endian `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"HRT1";

pub fn write_tensor_to(tensor: &Tensor<f32>, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    for dim in tensor.shape().dims() {
        let dim = u32::try_from(dim)
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "dim > u32"))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_tensor_from(mut input: impl Read) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<stream>", e))?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<Tensor<f32>> {
    let fail = |pos: usize, msg: &str| Error::Format {
        kind: "HRT1",
        pos,
        msg: msg.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(fail(0, "bad magic"));
    }
    if bytes.len() < 20 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    let mut dims = [0usize; 4];
    for (i, dim) in dims.iter_mut().enumerate() {
        let at = 4 + 4 * i;
        *dim = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape(dims);
    let payload = &bytes[20..];
    if payload.len() != shape.numel() * 4 {
        return Err(fail(
            bytes.len(),
            &format!("payload {} bytes, shape {shape} needs {}", payload.len(), shape.numel() * 4),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor(tensor: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_tensor_to(tensor, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}
