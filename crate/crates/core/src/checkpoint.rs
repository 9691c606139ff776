//! Binary parameter checkpoints.
//!
//! Layout: the magic `RPK1`, then one record per parameter until end of
//! input: `u32` name length, UTF-8 name bytes, `u32` rank, `rank` × `u64`
//! dims, and the values as little-endian `f64`.

use std::io::{Read, Write};

use crate::nn::Parameters;
use crate::tensor::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"RPK1";

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn write_params<W: Write>(params: &Parameters, mut out: W) -> Result<()> {
    out.write_all(MAGIC).map_err(io_err)?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        out.write_all(name).map_err(io_err)?;
        out.write_all(&(p.value.rank() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in p.value.shape() {
            out.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn to_bytes(params: &Parameters) -> Vec<u8> {
    let mut buf = Vec::new();
    write_params(params, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Fills `buf` unless end of input arrives first; returns the bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_err(e)),
        }
    }
    Ok(filled)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads parameters. Weight-decay flags are not stored; every tensor named
/// `*.weight` is flagged, matching [`crate::nn::Network::new`].
pub fn read_params<R: Read>(mut input: R) -> Result<Parameters> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut params = Parameters::new();
    loop {
        let mut first = [0u8; 4];
        let got = read_full(&mut input, &mut first)?;
        if got == 0 {
            break;
        }
        if got < 4 {
            return Err(TensorError::Checkpoint("truncated record header".into()));
        }
        let len = u32::from_le_bytes(first) as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|e| TensorError::Checkpoint(format!("parameter name: {e}")))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut b).map_err(io_err)?;
            data.push(f64::from_le_bytes(b));
        }
        let decay = name.ends_with(".weight");
        params.push(name, Tensor::new(shape, data)?, decay)?;
    }
    Ok(params)
}

/// Copies checkpointed values into `target`, which must have the same names
/// and shapes.
pub fn load_into(target: &mut Parameters, source: &Parameters) -> Result<()> {
    if target.len() != source.len() {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint holds {} parameters, network expects {}",
            source.len(),
            target.len()
        )));
    }
    for src in source.iter() {
        let dst = target
            .get_mut(&src.name)
            .ok_or_else(|| TensorError::UnknownParameter(src.name.clone()))?;
        if dst.value.shape() != src.value.shape() {
            return Err(TensorError::ShapeMismatch {
                expected: dst.value.shape().to_vec(),
                found: src.value.shape().to_vec(),
            });
        }
        dst.value.data_mut().copy_from_slice(src.value.data());
    }
    Ok(())
}
