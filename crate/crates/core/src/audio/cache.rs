//! Binary example cache: `KWSC0001` followed by fixed-size records of
//! `(label: u8, 16384 × f32 little-endian)`.

use std::io::{Read, Write};
use std::path::Path;

use super::WINDOW;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"KWSC0001";
const RECORD_BYTES: usize = 1 + 4 * WINDOW;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub label: u8,
    pub samples: Vec<f32>,
}

pub fn write_cache<W: Write>(mut w: W, records: &[CacheRecord]) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    let mut buf = Vec::with_capacity(RECORD_BYTES);
    for r in records {
        if r.samples.len() != WINDOW {
            return Err(Error::shape(format!(
                "cache records hold {WINDOW} samples, got {}",
                r.samples.len()
            )));
        }
        buf.clear();
        buf.push(r.label);
        for s in &r.samples {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cache<R: Read>(mut r: R) -> Result<Vec<CacheRecord>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let body = bytes
        .strip_prefix(CACHE_MAGIC.as_slice())
        .ok_or_else(|| Error::format("example cache", "bad magic"))?;
    if body.len() % RECORD_BYTES != 0 {
        return Err(Error::format(
            "example cache",
            format!(
                "{} payload bytes is not a whole number of records",
                body.len()
            ),
        ));
    }
    Ok(body
        .chunks_exact(RECORD_BYTES)
        .map(|rec| CacheRecord {
            label: rec[0],
            samples: rec[1..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        })
        .collect())
}

pub fn write_cache_file(path: &Path, records: &[CacheRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(Error::at_path(path))?;
    write_cache(std::io::BufWriter::new(f), records)
}

pub fn read_cache_file(path: &Path) -> Result<Vec<CacheRecord>> {
    let f = std::fs::File::open(path).map_err(Error::at_path(path))?;
    read_cache(std::io::BufReader::new(f))
}
