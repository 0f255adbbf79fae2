//! Flat binary container for named float64 parameter arrays.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "MSGATPR1"
//! version  u32
//! hash     32 bytes (config hash)
//! extra    u32 length + bytes (embedded config text, may be empty)
//! count    u32
//! entry*   name(u32 len + utf8), ndim u32, dims u32*, data f64*
//! ```
//!
//! Round-trips are bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MSGATPR1";
pub const VERSION: u32 = 1;

pub fn save<W: Write>(
    mut w: W,
    config_hash: &[u8; 32],
    extra: &[u8],
    entries: &[(String, &Tensor)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(config_hash)?;
    w.write_all(&u32::try_from(extra.len()).unwrap().to_le_bytes())?;
    w.write_all(extra)?;
    w.write_all(&u32::try_from(entries.len()).unwrap().to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        w.write_all(&u32::try_from(name_bytes.len()).unwrap().to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&u32::try_from(tensor.shape.len()).unwrap().to_le_bytes())?;
        for &d in &tensor.shape {
            w.write_all(&u32::try_from(d).unwrap().to_le_bytes())?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub struct Container {
    pub config_hash: [u8; 32],
    pub extra: Vec<u8>,
    pub entries: Vec<(String, Tensor)>,
}

pub fn load<R: Read>(mut r: R) -> Result<Container> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Contract("bad parameter container magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Contract(format!(
            "unsupported container version {version}"
        )));
    }
    let mut config_hash = [0u8; 32];
    r.read_exact(&mut config_hash)?;
    let extra_len = read_u32(&mut r)? as usize;
    let mut extra = vec![0u8; extra_len];
    r.read_exact(&mut extra)?;
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Contract("non-utf8 parameter name".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(Container {
        config_hash,
        extra,
        entries,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let t1 = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.1, f64::MIN_POSITIVE, 1e300, -0.0])
            .unwrap();
        let t2 = Tensor::new(vec![4], vec![0.25; 4]).unwrap();
        let hash = [7u8; 32];
        let extra = b"k=v\n";
        let mut buf = Vec::new();
        save(
            &mut buf,
            &hash,
            extra,
            &[("a.w".to_string(), &t1), ("b.v".to_string(), &t2)],
        )
        .unwrap();

        let c = load(&buf[..]).unwrap();
        assert_eq!(c.config_hash, hash);
        assert_eq!(c.extra, extra);
        assert_eq!(c.entries.len(), 2);
        assert_eq!(c.entries[0].0, "a.w");
        assert_eq!(c.entries[0].1.shape, vec![2, 3]);
        // bit-for-bit, including -0.0
        for (a, b) in c.entries[0].1.data.iter().zip(&t1.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // saving again reproduces identical bytes
        let mut buf2 = Vec::new();
        save(
            &mut buf2,
            &c.config_hash,
            &c.extra,
            &[
                ("a.w".to_string(), &c.entries[0].1),
                ("b.v".to_string(), &c.entries[1].1),
            ],
        )
        .unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_wrong_magic() {
        let err = load(&b"NOTMAGIC"[..]).err();
        assert!(err.is_some());
    }
}
