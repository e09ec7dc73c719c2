//! DTSR tensor files: `DTENSR01` magic, u32 LE rank, rank u64 LE extents,
//! then the row-major f64 payload in little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{numel, Result, Tensor, TensorError};

const MAGIC: &[u8; 8] = b"DTENSR01";

// Caps rank and payload so a corrupt header cannot trigger a huge allocation.
const MAX_RANK: u32 = 16;
const MAX_ELEMS: u64 = 1 << 32;

pub fn write_dtsr(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes to `<path>.tmp` in the same directory and renames over the target,
/// so a crash mid-write never leaves a truncated tensor behind.
pub fn write_dtsr_atomic(path: &Path, t: &Tensor) -> Result<()> {
    let tmp = path.with_extension("dtsr.tmp");
    write_dtsr(&tmp, t)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_dtsr(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::BadFile(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(TensorError::BadFile(format!("{}: rank {}", path.display(), rank)));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut b8 = [0u8; 8];
    let mut n: u64 = 1;
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        let d = u64::from_le_bytes(b8);
        n = n.saturating_mul(d.max(1)).min(MAX_ELEMS + 1);
        shape.push(d as usize);
    }
    if n > MAX_ELEMS {
        return Err(TensorError::BadFile(format!("{}: payload too large", path.display())));
    }
    let count = numel(&shape);
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(TensorError::BadFile(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    Tensor::new(&shape, data)
}
