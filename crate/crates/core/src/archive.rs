//! Versioned binary parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "M2APARAM"  u32 version
//! u32 channels, height, width, hidden, blocks, classes   f64 norm_eps, input_center
//! u32 block count
//! per block: u32 name length, name bytes, u8 role (0 frozen, 1 adaptable),
//!            u32 rank, u64 dims[rank], f64 values[prod(dims)]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Classifier, ClassifierConfig, Param, ParamRole};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"M2APARAM";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn snapshot(model: &Classifier) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.total_param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    let c = model.config();
    for v in [c.channels, c.height, c.width, c.hidden, c.blocks, c.classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.norm_eps.to_le_bytes());
    out.extend_from_slice(&c.input_center.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(match p.role {
            ParamRole::Frozen => 0,
            ParamRole::Adaptable => 1,
        });
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Archive("truncated archive".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn restore(bytes: &[u8]) -> Result<Classifier> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Archive("not a parameter archive".into()));
    }
    let version = r.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Archive(format!(
            "version {version} is not supported (expected {ARCHIVE_VERSION})"
        )));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let norm_eps = r.f64()?;
    let input_center = r.f64()?;
    let config = ClassifierConfig {
        channels: dims[0],
        height: dims[1],
        width: dims[2],
        hidden: dims[3],
        blocks: dims[4],
        classes: dims[5],
        norm_eps,
        input_center,
    };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Archive("parameter name is not utf-8".into()))?;
        let role = match r.take(1)?[0] {
            0 => ParamRole::Frozen,
            1 => ParamRole::Adaptable,
            b => return Err(Error::Archive(format!("bad role byte {b}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.push(Param {
            name,
            role,
            value: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Archive("trailing bytes after last block".into()));
    }
    Classifier::from_params(config, params)
}

pub fn save(model: &Classifier, path: &Path) -> Result<()> {
    std::fs::write(path, snapshot(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Classifier> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageTensor;

    fn cfg() -> ClassifierConfig {
        ClassifierConfig {
            channels: 1,
            height: 3,
            width: 3,
            hidden: 5,
            blocks: 2,
            classes: 4,
            norm_eps: 1e-5,
            input_center: 0.5,
        }
    }

    #[test]
    fn roundtrip_preserves_logits_bitwise() {
        let m = Classifier::new(cfg(), 77);
        let back = restore(&snapshot(&m)).unwrap();
        let x = ImageTensor::new(2, 1, 3, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let a = m.logits(&x).unwrap();
        let b = back.logits(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(m.digest(), back.digest());
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = snapshot(&Classifier::new(cfg(), 1));
        bytes[8] = 9;
        let err = restore(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn truncation_rejected() {
        let bytes = snapshot(&Classifier::new(cfg(), 1));
        assert!(restore(&bytes[..bytes.len() - 3]).is_err());
        assert!(restore(b"nonsense").is_err());
    }

    #[test]
    fn archive_size_tracks_registry() {
        let m = Classifier::new(ClassifierConfig::default(), 2);
        let bytes = snapshot(&m);
        let header = 8 + 4 + 6 * 4 + 2 * 8 + 4;
        let per_block: usize = m
            .params()
            .iter()
            .map(|p| 4 + p.name.len() + 1 + 4 + 8 * p.value.shape().len())
            .sum();
        assert_eq!(bytes.len(), header + per_block + 8 * m.total_param_count());
    }
}
