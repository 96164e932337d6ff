//! The `PROTOEMB1` embedding file.
//!
//! ```text
//! offset  size         field
//! 0       9            magic "PROTOEMB1"
//! 9       5 x u32 LE   N, C, width, height, d_in
//! 29      ...          N records: u32 LE label, then width*height*d_in f32 LE
//! ```
//!
//! Feature values are laid out row-major over the spatial grid, then by
//! channel: value `(x, y, d)` sits at index `(x * height + y) * d_in + d`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetMeta, EmbeddingDataset, Record};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"PROTOEMB1";

/// Writes `data` to `path`, truncating any existing file.
pub fn save_embeddings(data: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(data, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_embeddings(data: &EmbeddingDataset, w: &mut impl Write) -> Result<()> {
    let m = data.meta;
    w.write_all(MAGIC)?;
    for v in [data.records.len(), m.classes, m.width, m.height, m.d_in] {
        let v = u32::try_from(v)
            .map_err(|_| Error::Configuration(format!("header field {v} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 + 4 * m.record_len());
    for r in &data.records {
        buf.clear();
        buf.extend_from_slice(&r.label.to_le_bytes());
        for x in &r.features {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_embeddings(&mut r)
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.offset + got as u64,
                        message: format!("unexpected end of file while reading {what}"),
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_embeddings(r: &mut impl Read) -> Result<EmbeddingDataset> {
    let mut cur = Cursor {
        inner: r,
        offset: 0,
    };
    let mut magic = [0u8; 9];
    cur.fill(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let n = cur.u32("record count")? as usize;
    let header_at = cur.offset;
    let classes = cur.u32("class count")? as usize;
    let width = cur.u32("width")? as usize;
    let height = cur.u32("height")? as usize;
    let d_in = cur.u32("d_in")? as usize;
    let meta = DatasetMeta {
        classes,
        width,
        height,
        d_in,
    };
    if classes == 0 || width == 0 || height == 0 || d_in == 0 {
        return Err(Error::Format {
            offset: header_at,
            message: format!("degenerate shape {meta:?}"),
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let len = meta.record_len();
    let mut records = Vec::with_capacity(n.min(1 << 20));
    let mut raw = vec![0u8; 4 * len];
    for _ in 0..n {
        let label_at = cur.offset;
        let label = cur.u32("label")?;
        if label as usize >= classes {
            return Err(Error::Format {
                offset: label_at,
                message: format!("label {label} >= class count {classes}"),
            });
        }
        let values_at = cur.offset;
        cur.fill(&mut raw, "features")?;
        let features: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::Format {
                offset: values_at + 4 * i as u64,
                message: "non-finite feature value".into(),
            });
        }
        records.push(Record { label, features });
    }
    let mut trailing = [0u8; 1];
    if cur.inner.read(&mut trailing)? != 0 {
        return Err(Error::Format {
            offset: cur.offset,
            message: "trailing bytes after the last record".into(),
        });
    }
    Ok(EmbeddingDataset { meta, records })
}
