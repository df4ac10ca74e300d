//! Checkpoint container: a flat binary file holding named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "PULSCKPT"
//! version   u32      currently 1
//! count     u32      number of entries
//! entry     repeated, sorted by name:
//!   name_len  u16
//!   name      UTF-8 bytes
//!   rank      u8
//!   dims      u32 per axis
//!   payload   f32 per value, row-major
//! ```
//!
//! Round trips are bit-exact: floats are moved as raw little-endian words,
//! never reformatted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PulseError, Result};

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PULSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| PulseError::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| PulseError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| PulseError::io(path, e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    let count = u32::try_from(params.len()).map_err(|_| {
        PulseError::InvalidArgument("too many parameters for checkpoint".into())
    })?;
    w.write_all(&count.to_le_bytes()).map_err(io_err)?;

    // ParamStore iterates name-sorted already.
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len()).map_err(|_| {
            PulseError::InvalidArgument(format!("parameter name too long: {name:?}"))
        })?;
        w.write_all(&name_len.to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        let rank = u8::try_from(tensor.rank()).map_err(|_| {
            PulseError::InvalidArgument(format!("rank too large for {name:?}"))
        })?;
        w.write_all(&[rank]).map_err(io_err)?;
        for &d in tensor.shape() {
            let d = u32::try_from(d).map_err(|_| {
                PulseError::InvalidArgument(format!("dimension too large for {name:?}"))
            })?;
            w.write_all(&d.to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let file = File::open(path).map_err(|e| PulseError::io(path, e))?;
    let mut r = BufReader::new(file);
    read_from(&mut r, path)
}

fn read_from(r: &mut impl Read, path: &Path) -> Result<ParamStore> {
    let io_err = |e| PulseError::io(path, e);
    let format_err = |detail: String| PulseError::Format {
        path: path.to_path_buf(),
        detail,
    };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic, not a checkpoint file".into()));
    }
    let version = read_u32(r).map_err(io_err)?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r).map_err(io_err)?;

    let mut store = ParamStore::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = read_u16(r).map_err(io_err)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| format_err("parameter name is not UTF-8".into()))?;
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(format_err(format!(
                    "entries out of order: {prev:?} before {name:?}"
                )));
            }
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(io_err)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(r).map_err(io_err)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(io_err)?;
            data.push(f32::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| format_err(format!("entry {name:?}: {e}")))?;
        store
            .insert(&name, tensor)
            .map_err(|_| format_err(format!("duplicate entry {name:?}")))?;
        prev_name = Some(name);
    }

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(store),
        Ok(_) => Err(format_err("trailing bytes after last entry".into())),
        Err(e) => Err(io_err(e)),
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}
