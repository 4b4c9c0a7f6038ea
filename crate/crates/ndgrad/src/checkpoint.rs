//! Flat binary tensor container.
//!
//! ```text
//! "AVFL" | version u32 | count u32
//! repeated count times:
//!   name_len u16 | name bytes | rank u8 | dims u32 * rank | f32 payload
//! ```
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{GradError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AVFL";
pub const VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> GradError {
    GradError::Checkpoint(msg.into())
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| corrupt(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| corrupt(format!("rank too large: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| corrupt(format!("dimension too large: {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => corrupt("truncated checkpoint"),
        _ => GradError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut r, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("name is not utf-8"))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact(&mut r, &mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Writes through a temporary file and renames it into place.
pub fn save(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp)?;
        write_tensors(BufWriter::new(f), tensors)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(BufReader::new(File::open(path)?))
}

pub fn save_params(path: &Path, params: &ParamStore, extra: &[(&str, &Tensor)]) -> Result<()> {
    let mut all: Vec<(&str, &Tensor)> = params.iter().map(|(_, n, t)| (n, t)).collect();
    all.extend_from_slice(extra);
    save(path, &all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab", &t)]).unwrap();
        let mut want = b"AVFL".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn truncated_is_an_error() {
        let t = Tensor::ones(&[3, 3]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensors(buf.as_slice()).is_err());
    }
}
