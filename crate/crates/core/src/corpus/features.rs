//! `XMFE` dense feature files.
//!
//! Layout (little-endian): magic `XMFE`, version `u32`, count `u32`,
//! dim `u32`, then `count * dim` `f64` values row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"XMFE";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(path: &Path, features: &Array2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_features(&mut w, features).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_features<W: Write>(w: &mut W, features: &Array2<f64>) -> std::io::Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_u32::<LittleEndian>(FEATURE_VERSION)?;
    w.write_u32::<LittleEndian>(features.nrows() as u32)?;
    w.write_u32::<LittleEndian>(features.ncols() as u32)?;
    for v in features.iter() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: String| Error::format("feature", path, reason);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
    if &magic != FEATURE_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let header = (|| -> std::io::Result<(u32, u32, u32)> {
        Ok((
            r.read_u32::<LittleEndian>()?,
            r.read_u32::<LittleEndian>()?,
            r.read_u32::<LittleEndian>()?,
        ))
    })();
    let (version, count, dim) = header.map_err(|_| bad("truncated header".into()))?;
    if version != FEATURE_VERSION {
        return Err(Error::Version {
            kind: "feature",
            found: version,
            supported: FEATURE_VERSION,
        });
    }
    if count == 0 {
        return Err(Error::Empty("feature file"));
    }
    if dim == 0 {
        return Err(bad("zero feature dimension".into()));
    }
    let len = (count as usize)
        .checked_mul(dim as usize)
        .ok_or_else(|| bad("size overflow".into()))?;
    let mut data = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut data)
        .map_err(|_| bad(format!("expected {count}x{dim} values, file is truncated")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after feature block".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite feature value".into()));
    }
    Ok(Array2::from_shape_vec((count as usize, dim as usize), data).expect("length checked"))
}
