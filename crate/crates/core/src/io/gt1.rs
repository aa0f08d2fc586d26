//! GT1: a minimal little-endian tensor container.
//!
//! ```text
//! record  = "GTEN" | version u32 | dtype u8 | ndim u32 | dims u32×ndim | payload | payload_bytes u64
//! archive = count u32 | (name_len u16 | name utf-8 | record)×count
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GTEN";
pub const VERSION: u32 = 1;

/// A decoded tensor of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::F32(_) => Precision::F32,
            AnyTensor::F64(_) => Precision::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, exactly when the precision already matches.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() == 0 {
        return Err(Error::invalid("GT1 records need at least one dimension"));
    }
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::PRECISION.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    let start = out.len();
    for &v in t.data() {
        v.write_le(out);
    }
    let payload = (out.len() - start) as u64;
    out.extend_from_slice(&payload.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "{what}: need {n} bytes at offset {}, {} left",
                    self.at,
                    self.bytes.len() - self.at
                ),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn truncated(&self, detail: String) -> Error {
        Error::Truncated {
            path: self.path.to_path_buf(),
            detail,
        }
    }

    fn record(&mut self) -> Result<AnyTensor> {
        if self.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
            });
        }
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: self.path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let code = self.take(1, "dtype")?[0];
        let precision =
            Precision::from_code(code).ok_or_else(|| self.truncated(format!("unknown dtype code {code}")))?;
        let ndim = self.u32("ndim")? as usize;
        if ndim == 0 {
            return Err(self.truncated("record with no dimensions".into()));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32("dims")? as usize);
        }
        let count: usize = dims.iter().product();
        let payload_len = count * precision.size_of();
        let payload = self.take(payload_len, "payload")?;
        let trailer = self.u64("trailing byte count")?;
        if trailer != payload_len as u64 {
            return Err(self.truncated(format!("trailing count {trailer} != payload {payload_len}")));
        }
        Ok(match precision {
            Precision::F32 => AnyTensor::F32(decode_payload(payload, dims)?),
            Precision::F64 => AnyTensor::F64(decode_payload(payload, dims)?),
        })
    }
}

fn decode_payload<T: Scalar>(payload: &[u8], dims: Vec<usize>) -> Result<Tensor<T>> {
    let size = T::PRECISION.size_of();
    Tensor::new(dims, payload.chunks_exact(size).map(T::read_le).collect())
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    let mut r = Reader { bytes, at: 0, path };
    let t = r.record()?;
    if r.at != bytes.len() {
        return Err(r.truncated(format!("{} unexpected trailing bytes", bytes.len() - r.at)));
    }
    Ok(t)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf)?;
    write_bytes(path.as_ref(), &buf)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    decode(&read_bytes(path)?, path)
}

/// Incremental archive encoder; entries may mix precisions.
#[derive(Debug, Default)]
pub struct ArchiveWriter {
    names: HashSet<String>,
    body: Vec<u8>,
}

impl ArchiveWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        if !self.names.insert(name.to_string()) {
            return Err(Error::invalid(format!("duplicate archive entry `{name}`")));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("entry name too long: {name}")))?;
        self.body.extend_from_slice(&len.to_le_bytes());
        self.body.extend_from_slice(name.as_bytes());
        encode(t, &mut self.body)
    }

    pub fn finish(self) -> Vec<u8> {
        let mut out = (self.names.len() as u32).to_le_bytes().to_vec();
        out.extend(self.body);
        out
    }
}

pub fn encode_archive<T: Scalar>(entries: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut w = ArchiveWriter::new();
    for (name, t) in entries {
        w.push(name, t)?;
    }
    Ok(w.finish())
}

pub fn decode_archive(bytes: &[u8], path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    let mut r = Reader { bytes, at: 0, path };
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.truncated("entry name is not UTF-8".into()))?
            .to_string();
        out.push((name, r.record()?));
    }
    if r.at != bytes.len() {
        return Err(r.truncated(format!("{} unexpected trailing bytes", bytes.len() - r.at)));
    }
    Ok(out)
}

pub fn write_archive<T: Scalar>(path: impl AsRef<Path>, entries: &[(String, &Tensor<T>)]) -> Result<()> {
    write_bytes(path.as_ref(), &encode_archive(entries)?)
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<(String, AnyTensor)>> {
    let path = path.as_ref();
    decode_archive(&read_bytes(path)?, path)
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
