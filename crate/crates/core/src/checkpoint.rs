//! Binary parameter checkpoints.
//!
//! Single little-endian file:
//!
//! ```text
//! magic   4 bytes  "LRDM"
//! version u32      currently 1
//! count   u32      number of named tensors
//! entry*  count times:
//!   name_len u32, name bytes (utf-8)
//!   rank     u32, dims u64 * rank
//!   values   f64 * product(dims)
//! ```
//!
//! The training stage travels as the scalar entry `meta.stage`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LRDM";
const VERSION: u32 = 1;

pub fn save(path: impl AsRef<Path>, entries: &[(String, &Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load(path: impl AsRef<Path>) -> Result<HashMap<String, Tensor>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &display)?;
    if &magic != MAGIC {
        return Err(Error::format(display, "bad magic, not a checkpoint"));
    }
    let version = read_u32(&mut r, &display)?;
    if version != VERSION {
        return Err(Error::format(
            display,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = read_u32(&mut r, &display)?;
    let mut map = HashMap::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r, &display)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, &display)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(display.clone(), "non-utf8 tensor name"))?;
        let rank = read_u32(&mut r, &display)? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, &display)?;
            let d = u64::from_le_bytes(b) as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        if numel > (1 << 31) {
            return Err(Error::format(display, format!("tensor '{name}' implausibly large")));
        }
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut b, &display)?;
            data.push(f64::from_le_bytes(b));
        }
        map.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(map)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format(path.to_string(), format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}
