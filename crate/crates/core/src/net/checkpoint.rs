//! `WCNQ` parameter files.
//!
//! Layout (little-endian): magic `WCNQ`, `u32` version, `u32` tensor count,
//! then per tensor a `u16` name length, UTF-8 name, `u8` rank, `u32` dims and
//! `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use super::config::NetworkConfig;
use super::params::NetworkParams;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"WCNQ";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(params: &NetworkParams, mut w: W) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for e in params.entries() {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.tensor.rank() as u8])?;
        for &d in e.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(e.tensor.len() * 4);
        for &v in e.tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("checkpoint ended inside {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }
}

/// Reads every tensor as `(name, tensor)` in file order.
pub fn read_tensors<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    read_tensors_from(r, "<stream>")
}

fn read_tensors_from<R: Read>(r: R, path: &str) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { inner: r };
    let magic: [u8; 4] = r.bytes(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.bytes(2, "name length")?.try_into().unwrap());
        let name = String::from_utf8(r.bytes(len as usize, "name")?)
            .map_err(|_| Error::InvalidArgument("tensor name is not UTF-8".into()))?;
        let rank = r.bytes(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Loads tensors into a freshly built parameter set for `cfg`. Every
/// expected name must be present with its exact shape.
pub fn load_params<R: Read>(cfg: &NetworkConfig, r: R) -> Result<NetworkParams> {
    into_params(cfg, read_tensors(r)?)
}

fn into_params(cfg: &NetworkConfig, tensors: Vec<(String, Tensor)>) -> Result<NetworkParams> {
    let mut params = NetworkParams::build(cfg, 0)?;
    if tensors.len() != params.len() {
        return Err(shape_err!(
            "checkpoint has {} tensors, configuration expects {}",
            tensors.len(),
            params.len()
        ));
    }
    for (name, t) in tensors {
        params.set(&name, t)?;
    }
    Ok(params)
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_params(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(cfg: &NetworkConfig, path: &Path) -> Result<NetworkParams> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    into_params(cfg, read_tensors_from(f, &path.display().to_string())?)
}
