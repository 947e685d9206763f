//! The `RAAB` token file.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RAAB"
//! 4       4     u32 version (1)
//! 8       4     u32 P (patches)
//! 12      4     u32 R (rows)
//! 16      4     u32 C (cols)
//! 20      4     u32 D (dim)
//! 24      ...   P*R*C*D f32, little-endian, [patch][row][col][dim]
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on read, so a bag read
//! from disk (or produced by the synthetic generator) round-trips exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{GridTokens, TokenBag};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RAAB";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;

pub fn write_bag(bag: &TokenBag, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    bag.validate()?;
    let (rows, cols, dim) = bag.grid_shape();
    let n: usize = bag.grids.iter().map(|g| g.values.len()).sum();
    let mut buf = Vec::with_capacity(HEADER_BYTES + 4 * n);
    buf.extend_from_slice(&MAGIC);
    for v in [VERSION, bag.patches() as u32, rows as u32, cols as u32, dim as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for g in &bag.grids {
        for &v in &g.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Read the patch grids of a token file. Patient id and label live in the
/// manifest, not in the file.
pub fn read_bag(path: impl AsRef<Path>) -> Result<Vec<GridTokens>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER_BYTES {
        return Err(fail(format!(
            "file is {} bytes, shorter than the {HEADER_BYTES}-byte header",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let version = word(1) as u32;
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let (patches, rows, cols, dim) = (word(2), word(3), word(4), word(5));
    if patches == 0 || rows == 0 || cols == 0 || dim == 0 {
        return Err(fail(format!("degenerate header P={patches} R={rows} C={cols} D={dim}")));
    }
    let per_patch = rows * cols * dim;
    let expected = patches * per_patch * 4;
    let actual = bytes.len() - HEADER_BYTES;
    if expected != actual {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }

    let payload = &bytes[HEADER_BYTES..];
    let mut grids = Vec::with_capacity(patches);
    for p in 0..patches {
        let mut values = Vec::with_capacity(per_patch);
        for i in 0..per_patch {
            let at = (p * per_patch + i) * 4;
            let v = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(fail(format!("non-finite value {v} at patch {p}, index {i}")));
            }
            values.push(f64::from(v));
        }
        grids.push(GridTokens::new(rows, cols, dim, values)?);
    }
    Ok(grids)
}
