//! Flat parameter archive.
//!
//! Binary layout (version 1, all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "MBTCKPT1"
//! count      u32       number of entries
//! entry*     name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!            payload f64 × product(dims)
//! ```
//!
//! The companion text manifest has a `mbt-checkpoint v1` header line followed
//! by one tab-separated line per entry: `name  dims(comma-separated)  count`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::value::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MBTCKPT1";
pub const MANIFEST_HEADER: &str = "mbt-checkpoint v1";

pub fn write_archive<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an MBTCKPT1 archive".into()));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn manifest(entries: &[(String, Tensor)]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for (name, t) in entries {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        s.push_str(&format!("{name}\t{}\t{}\n", dims.join(","), t.len()));
    }
    s
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Write `path` and `path.manifest`.
pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_archive(&mut w, entries)?;
    w.flush()?;
    std::fs::write(manifest_path(path), manifest(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_archive(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let entries = vec![
            ("a".to_string(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25)),
            ("layer.0.bias".to_string(), Tensor::scalar(-0.0)),
        ];
        let mut buf = Vec::new();
        write_archive(&mut buf, &entries).unwrap();
        let back = read_archive(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOTACKPT\0\0\0\0".to_vec();
        assert!(matches!(read_archive(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_lists_entries() {
        let m = manifest(&[("w".into(), Tensor::zeros(&[4, 2]))]);
        assert_eq!(m, "mbt-checkpoint v1\nw\t4,2\t8\n");
    }
}
