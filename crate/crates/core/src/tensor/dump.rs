//! Binary tensor dump: `"PCXD"`, `u32` rank, `u32` dims, then the row-major
//! payload as little-endian `f64`. All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

pub const DUMP_MAGIC: &[u8; 4] = b"PCXD";

pub fn write_dump_to<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dump_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(TensorError::BadDump(format!("magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(TensorError::BadDump(format!("rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data).map_err(|e| TensorError::BadDump(e.to_string()))
}

pub fn write_dump(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dump_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Tensor> {
    read_dump_from(&mut BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::from_rows(&[[1.0, -2.5]]).unwrap();
        let mut buf = Vec::new();
        write_dump_to(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"PCXD");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&buf[24..32], &(-2.5f64).to_le_bytes());
        assert_eq!(buf.len(), 32);
        let back = read_dump_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            read_dump_from(&mut buf.as_slice()),
            Err(TensorError::BadDump(_))
        ));
    }
}
