use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Dataset, ImageBuffer};

pub const MAGIC: [u8; 4] = *b"SSL1";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 4 + 2 + 2 + 1;

pub fn write_raw_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<(), DataError> {
    ds.validate()?;
    let (h, w, c) = ds.dims().unwrap_or((0, 0, 3));
    let n = u32::try_from(ds.len()).map_err(|_| DataError::DimensionOverflow(format!("n = {}", ds.len())))?;
    let h16 = u16::try_from(h).map_err(|_| DataError::DimensionOverflow(format!("h = {h}")))?;
    let w16 = u16::try_from(w).map_err(|_| DataError::DimensionOverflow(format!("w = {w}")))?;
    let c8 = u8::try_from(c).map_err(|_| DataError::DimensionOverflow(format!("c = {c}")))?;
    if ds.class_count > 256 {
        return Err(DataError::DimensionOverflow(format!("{} classes", ds.class_count)));
    }
    let mut head = Vec::with_capacity(HEADER);
    head.extend_from_slice(&MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&n.to_le_bytes());
    head.extend_from_slice(&h16.to_le_bytes());
    head.extend_from_slice(&w16.to_le_bytes());
    head.push(c8);
    out.write_all(&head)?;
    out.write_all(&ds.labels)?;
    for im in &ds.images {
        out.write_all(&im.pixels)?;
    }
    Ok(())
}

/// Parses a dataset from bytes. The class count is `max(label) + 1`.
pub fn read_raw_dataset<R: Read>(mut input: R) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(DataError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        return Err(DataError::Truncated { expected: HEADER as u64, found: bytes.len() as u64 });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(DataError::Version(version));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as u64;
    let (h, w, c) = (u16_at(10) as u64, u16_at(12) as u64, bytes[14] as u64);
    let per_image = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| DataError::DimensionOverflow(format!("{h}x{w}x{c}")))?;
    if n > 0 && per_image == 0 {
        return Err(DataError::DimensionOverflow(format!("zero-sized images {h}x{w}x{c}")));
    }
    let expected = n
        .checked_mul(per_image)
        .and_then(|v| v.checked_add(n))
        .and_then(|v| v.checked_add(HEADER as u64))
        .filter(|&v| usize::try_from(v).is_ok())
        .ok_or_else(|| DataError::DimensionOverflow(format!("{n} images of {h}x{w}x{c}")))?;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(DataError::Truncated { expected, found });
    }
    if found > expected {
        return Err(DataError::Trailing(found - expected));
    }
    let (n, per_image) = (n as usize, per_image as usize);
    let labels = bytes[HEADER..HEADER + n].to_vec();
    let images = bytes[HEADER + n..]
        .chunks_exact(per_image.max(1))
        .take(n)
        .map(|px| ImageBuffer { h: h as usize, w: w as usize, c: c as usize, pixels: px.to_vec() })
        .collect();
    let class_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Dataset::new(images, labels, class_count)
}

pub fn save_raw_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_raw_dataset(ds, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_raw_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    read_raw_dataset(std::fs::File::open(path)?)
}
