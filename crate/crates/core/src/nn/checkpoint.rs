//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! b"MADP"                 magic
//! u16                     format version (currently 1)
//! u8                      model kind (0 = epigraph, 1 = safety)
//! u32                     number of layer sizes L
//! u32 x L                 layer sizes, input first, output (=1) last
//! f64                     omega0
//! f64                     horizon T
//! u32                     number of inputs D (must equal the first size)
//! (f64 offset, f64 scale) x D   input normalization
//! u64                     parameter count P
//! f64 x P                 parameters, layer by layer: weights (row-major,
//!                         out x in) then biases
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::mlp::{Arch, NetParams};
use crate::nn::value::{ModelKind, Normalization, ValueModel};

pub const MAGIC: &[u8; 4] = b"MADP";
pub const VERSION: u16 = 1;

pub fn encode(model: &ValueModel) -> Vec<u8> {
    let arch = model.params.arch();
    let mut out = Vec::with_capacity(64 + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.kind.tag());
    out.extend_from_slice(&(arch.sizes.len() as u32).to_le_bytes());
    for &s in &arch.sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.extend_from_slice(&arch.omega0.to_le_bytes());
    out.extend_from_slice(&model.horizon.to_le_bytes());
    out.extend_from_slice(&(model.norm.len() as u32).to_le_bytes());
    for (o, s) in model.norm.offset.iter().zip(&model.norm.scale) {
        out.extend_from_slice(&o.to_le_bytes());
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in model.params.as_slice() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointCorrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ValueModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CheckpointCorrupt("bad magic bytes".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let kind_tag = r.u8("model kind")?;
    let kind = ModelKind::from_tag(kind_tag)
        .ok_or_else(|| Error::CheckpointCorrupt(format!("unknown model kind {kind_tag}")))?;
    let n_sizes = r.u32("layer count")? as usize;
    if n_sizes > 1024 {
        return Err(Error::CheckpointCorrupt(format!("implausible layer count {n_sizes}")));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(r.u32("layer size")? as usize);
    }
    let omega0 = r.f64("omega0")?;
    let horizon = r.f64("horizon")?;
    let arch = Arch { sizes, omega0 };
    arch.validate()
        .map_err(|e| Error::CheckpointShape(format!("invalid architecture: {e}")))?;
    let n_norm = r.u32("normalization length")? as usize;
    if n_norm != arch.input_dim() {
        return Err(Error::CheckpointShape(format!(
            "normalization has {n_norm} entries, network takes {} inputs",
            arch.input_dim()
        )));
    }
    let mut offset = Vec::with_capacity(n_norm);
    let mut scale = Vec::with_capacity(n_norm);
    for _ in 0..n_norm {
        offset.push(r.f64("normalization offset")?);
        scale.push(r.f64("normalization scale")?);
    }
    let n_params = r.u64("parameter count")? as usize;
    if n_params != arch.param_count() {
        return Err(Error::CheckpointShape(format!(
            "file holds {n_params} parameters, architecture {:?} needs {}",
            arch.sizes,
            arch.param_count()
        )));
    }
    let mut data = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        data.push(r.f64("parameters")?);
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let params = NetParams::from_parts(arch, data)?;
    ValueModel::new(kind, params, Normalization::new(offset, scale)?, horizon)
}

pub fn save(model: &ValueModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<ValueModel> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(format!("checkpoint {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ValueModel {
        let params = NetParams::init(9, Arch::new(5, &[8, 8], 30.0)).unwrap();
        let norm = Normalization::new(vec![0.1, 0.0, 0.0, 0.0, 0.0], vec![10.0, 1.0, 1.0, 0.125, 0.125]).unwrap();
        ValueModel::new(ModelKind::Safety, params, norm, 0.2).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.madp");
        let m = model();
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, m);
        let a: Vec<u64> = m.params.as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode(&model());
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::CheckpointCorrupt(_))), "cut {cut}");
        }
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = encode(&model());
        bytes[4] = 7;
        assert!(matches!(decode(&bytes), Err(Error::CheckpointVersion { found: 7, .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut bytes = encode(&model());
        // Bump the first hidden width from 8 to 9.
        let off = 4 + 2 + 1 + 4 + 4;
        bytes[off] = 9;
        assert!(matches!(decode(&bytes), Err(Error::CheckpointShape(_))));
    }

    #[test]
    fn missing_file_is_a_dependency_error() {
        assert!(matches!(load(Path::new("/nonexistent/x.madp")), Err(Error::MissingArtifact(_))));
    }
}
