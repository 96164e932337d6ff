//! The `PROTOFORM1` checkpoint file.
//!
//! ```text
//! offset  size          field
//! 0       10            magic "PROTOFORM1"
//! 10      10 x u32 LE   formulation code, C, Q, D, zeta_w, zeta_h, d_in,
//!                       d_hidden, patch, mixture components
//! 50      f64 LE        L2 epsilon
//! 58      u64 LE        parameter count P
//! 66      P x f64 LE    flat parameters (neck, bank, head)
//! ```
//!
//! Formulation codes are indices into [`Formulation::ALL`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::Formulation;

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"PROTOFORM1";

pub fn write_checkpoint(params: &ModelParams, w: &mut impl Write) -> Result<()> {
    let c = &params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    let fields = [
        c.formulation.code() as usize,
        c.classes,
        c.per_class,
        c.dim,
        c.zeta.0,
        c.zeta.1,
        c.d_in,
        c.d_hidden,
        c.patch,
        c.mixture_components,
    ];
    for v in fields {
        let v = u32::try_from(v)
            .map_err(|_| Error::Configuration(format!("header field {v} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&c.eps.to_le_bytes())?;
    let flat = params.flatten();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 * flat.len());
    for v in &flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Writes a checkpoint to `path`, truncating any existing file.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

fn fill(r: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format {
            offset: *offset,
            message: format!("unexpected end of file while reading {what}"),
        },
        _ => Error::Io(e),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
    let mut offset = 0u64;
    let mut magic = [0u8; 10];
    fill(r, &mut magic, &mut offset, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let mut f = [0u32; 10];
    for v in f.iter_mut() {
        let mut b = [0u8; 4];
        fill(r, &mut b, &mut offset, "header")?;
        *v = u32::from_le_bytes(b);
    }
    let formulation = Formulation::from_code(f[0]).ok_or_else(|| Error::Format {
        offset: 10,
        message: format!("unknown formulation code {}", f[0]),
    })?;
    let mut b8 = [0u8; 8];
    fill(r, &mut b8, &mut offset, "eps")?;
    let eps = f64::from_le_bytes(b8);
    let [_, classes, per_class, dim, zw, zh, d_in, d_hidden, patch, mixture_components] =
        f.map(|v| v as usize);
    let config = ModelConfig {
        formulation,
        classes,
        per_class,
        dim,
        d_in,
        d_hidden,
        eps,
        mixture_components,
        zeta: (zw, zh),
        patch,
    };
    config.validate().map_err(|e| Error::Format {
        offset: 10,
        message: e.to_string(),
    })?;
    let mut params = ModelParams::init(&config, 0)?;
    let count_at = offset;
    fill(r, &mut b8, &mut offset, "parameter count")?;
    let count = u64::from_le_bytes(b8);
    if count != params.num_params() as u64 {
        return Err(Error::Format {
            offset: count_at,
            message: format!(
                "parameter count {count} does not match the header shape ({})",
                params.num_params()
            ),
        });
    }
    let mut raw = vec![0u8; 8 * count as usize];
    let values_at = offset;
    fill(r, &mut raw, &mut offset, "parameters")?;
    let flat: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            offset: values_at + 8 * i as u64,
            message: format!("non-finite value for {}", params.param_path(i)),
        });
    }
    params.unflatten(&flat)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format {
            offset,
            message: "trailing bytes after the parameters".into(),
        });
    }
    Ok(params)
}
