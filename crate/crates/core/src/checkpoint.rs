//! Binary checkpoint container.
//!
//! ```text
//! "RSGN1"
//! u32 in_channels, u32 C1, u32 C2, u32 C3, u32 ppm_out, u32 semantics_guided (0/1)
//! per tensor, in canonical traversal order:
//!     u32 rank, rank × u32 extent, extent-product × f64
//! ```
//!
//! All integers and reals are little-endian. The traversal order is the
//! field order of [`Network`](crate::model::Network): encoder blocks, the
//! semantics module, the two aggregation blocks, then the master, side-2 and
//! side-3 heads; each convolution contributes its weight then its bias.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{layout, ArchConfig, RsgnParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"RSGN1";

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit a 32-bit field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(params: &RsgnParams) -> Result<Vec<u8>> {
    let c = &params.config;
    let mut buf = MAGIC.to_vec();
    for v in [
        c.in_channels,
        c.widths[0],
        c.widths[1],
        c.widths[2],
        c.ppm_out,
        c.semantics_guided as usize,
    ] {
        put_u32(&mut buf, v)?;
    }
    for t in params.tensors() {
        put_u32(&mut buf, t.rank())?;
        for &e in t.shape() {
            put_u32(&mut buf, e)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {} (needed {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<ArchConfig> {
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut f = [0usize; 6];
    for v in &mut f {
        *v = r.u32()?;
    }
    let semantics_guided = match f[5] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("semantics flag must be 0 or 1, got {other}"))),
    };
    let config = ArchConfig {
        in_channels: f[0],
        widths: [f[1], f[2], f[3]],
        ppm_out: f[4],
        semantics_guided,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;
    Ok(config)
}

pub fn from_bytes(bytes: &[u8]) -> Result<RsgnParams> {
    let mut r = Reader { bytes, pos: 0 };
    let config = read_header(&mut r)?;
    let shapes = layout(&config);
    let mut tensors = Vec::new();
    for (k, expected) in shapes.leaves().into_iter().enumerate() {
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &shape != expected {
            return Err(Error::Format(format!(
                "checkpoint tensor {k}: shape {shape:?} but the architecture needs {expected:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    let mut it = tensors.into_iter();
    let net = shapes.map(|_| it.next().expect("one tensor per leaf"));
    Ok(RsgnParams { config, net })
}

pub fn save(path: &Path, params: &RsgnParams) -> Result<()> {
    fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<RsgnParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Architecture stored in a checkpoint, without reading the weights.
pub fn peek_config(bytes: &[u8]) -> Result<ArchConfig> {
    read_header(&mut Reader { bytes, pos: 0 })
}
