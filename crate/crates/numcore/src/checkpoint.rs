//! Binary parameter checkpoints.
//!
//! Layout: magic `EPST1`, a little-endian `u32` block count, then per block
//! a `u32` name length, the UTF-8 name, a `u32` rank, `u64` dimensions and
//! the values as little-endian `f32`.

use std::io::{Read, Write};

use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"EPST1";

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumError::Checkpoint("bad magic".into()));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NumError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

/// Copies values from `loaded` into `store` by name; every parameter in
/// `store` must be present with the same shape.
pub fn restore_into(store: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let src = loaded
            .id(&name)
            .ok_or_else(|| NumError::Checkpoint(format!("missing parameter {name}")))?;
        store.set(id, loaded.get(src).clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::matrix(2, 2, vec![0.5, -1.25, 3.0, 1e-3]).unwrap())
            .unwrap();
        s.add("b", Tensor::vector(vec![0.1])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        assert_eq!(&buf[..5], MAGIC);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        let a = back.id("a.weight").unwrap();
        assert_eq!(back.get(a).shape(), &[2, 2]);
        assert_eq!(back.get(a).data()[1], -1.25);
        let b = back.get(back.id("b").unwrap()).item();
        assert_eq!(b, 0.1f32 as f64);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(read_checkpoint(&b"EPST0\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn restore_requires_every_parameter() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![1.0])).unwrap();
        let empty = ParamStore::new();
        assert!(restore_into(&mut s, &empty).is_err());
    }
}
