//! Versioned little-endian checkpoint container.
//!
//! ```text
//! offset  size      field
//! 0       8         magic  b"IMKWSCKP"
//! 8       4         format version (u32 LE) = 1
//! 12      4         F (u32 LE)
//! 16      4         H (u32 LE)
//! 20      4         C (u32 LE)
//! 24      8         eps (f64 LE)
//! 32      ...       f64 LE arrays, row-major, in this order:
//!                   W1 [F×H], b1 [H], gamma [H], beta [H],
//!                   running_mean [H], running_var [H], W2 [H×C], b2 [C]
//! ```
//!
//! Nothing follows `b2`; trailing bytes are rejected.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use super::{ModelParams, NormPoolClassifier};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IMKWSCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &NormPoolClassifier, mut out: W) -> Result<()> {
    let p = model.params();
    let d = p.dims();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for dim in [d.features, d.hidden, d.classes] {
        let dim = u32::try_from(dim).map_err(|_| Error::Checkpoint("dimension overflows u32".into()))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    out.write_all(&p.eps.to_le_bytes())?;
    let arrays = [
        p.w1.as_standard_layout().iter().copied().collect::<Vec<_>>(),
        p.b1.to_vec(),
        p.gamma.to_vec(),
        p.beta.to_vec(),
        p.running_mean.to_vec(),
        p.running_var.to_vec(),
        p.w2.as_standard_layout().iter().copied().collect(),
        p.b2.to_vec(),
    ];
    for a in &arrays {
        for v in a {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32(buf: &[u8], at: &mut usize) -> Result<u32> {
    let bytes = buf
        .get(*at..*at + 4)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    *at += 4;
    Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
}

fn read_f64s(buf: &[u8], at: &mut usize, n: usize) -> Result<Vec<f64>> {
    let len = n * 8;
    let bytes = buf
        .get(*at..*at + len)
        .ok_or_else(|| Error::Checkpoint("truncated parameter data".into()))?;
    *at += len;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<NormPoolClassifier> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut at = 8;
    let version = read_u32(&buf, &mut at)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let f = read_u32(&buf, &mut at)? as usize;
    let h = read_u32(&buf, &mut at)? as usize;
    let c = read_u32(&buf, &mut at)? as usize;
    let eps = read_f64s(&buf, &mut at, 1)?[0];
    let shape_err = |e: ndarray::ShapeError| Error::Checkpoint(e.to_string());
    let w1 = Array2::from_shape_vec((f, h), read_f64s(&buf, &mut at, f * h)?).map_err(shape_err)?;
    let mut vec = |n| read_f64s(&buf, &mut at, n).map(Array1::from);
    let b1 = vec(h)?;
    let gamma = vec(h)?;
    let beta = vec(h)?;
    let running_mean = vec(h)?;
    let running_var = vec(h)?;
    let w2 = Array2::from_shape_vec((h, c), read_f64s(&buf, &mut at, h * c)?).map_err(shape_err)?;
    let b2 = Array1::from(read_f64s(&buf, &mut at, c)?);
    if at != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - at)));
    }
    NormPoolClassifier::from_params(ModelParams {
        w1,
        b1,
        gamma,
        beta,
        running_mean,
        running_var,
        w2,
        b2,
        eps,
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))
}
