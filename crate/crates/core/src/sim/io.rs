//! FLD1 dataset container.
//!
//! Layout, all integers little-endian:
//! magic "FLD1" | version u32 | N u32 | H u32 | W u32 | G u32 | flags u32 |
//! f32 stacks in order tpsf, irf, truth (3 planes per sample), mask |
//! optional provenance block: u32 length + JSON.
//!
//! Flags: bit 0 mask present, bit 1 truth present, bit 2 provenance present.

use super::dataset::{DatasetMeta, FliDataset, Truth};
use crate::error::{Error, FormatErrorKind, Result};
use std::path::Path;

pub const FLD_MAGIC: [u8; 4] = *b"FLD1";
pub const FLD_VERSION: u32 = 1;

const FLAG_MASK: u32 = 1;
const FLAG_TRUTH: u32 = 2;
const FLAG_META: u32 = 4;

pub fn write_dataset(path: &Path, ds: &FliDataset) -> Result<()> {
    let bytes = dataset_to_bytes(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<FliDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes, path)
}

pub fn dataset_to_bytes(ds: &FliDataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&FLD_MAGIC);
    push_u32(&mut out, FLD_VERSION);
    push_u32(&mut out, ds.samples as u32);
    push_u32(&mut out, ds.height as u32);
    push_u32(&mut out, ds.width as u32);
    push_u32(&mut out, ds.gates as u32);
    let mut flags = FLAG_META;
    if ds.mask.is_some() {
        flags |= FLAG_MASK;
    }
    if ds.truth.is_some() {
        flags |= FLAG_TRUTH;
    }
    push_u32(&mut out, flags);

    push_f32s(&mut out, &ds.tpsf);
    push_f32s(&mut out, &ds.irf);
    if let Some(truth) = &ds.truth {
        let per = ds.height * ds.width;
        for n in 0..ds.samples {
            for plane in [&truth.tau1, &truth.tau2, &truth.a_r] {
                push_f32s(&mut out, &plane[n * per..(n + 1) * per]);
            }
        }
    }
    if let Some(mask) = &ds.mask {
        push_f32s(&mut out, mask);
    }
    let meta = serde_json::to_vec(&ds.meta)
        .map_err(|e| Error::Numerical(format!("provenance serialization failed: {e}")))?;
    push_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8], path: &Path) -> Result<FliDataset> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != FLD_MAGIC {
        return Err(r.format(FormatErrorKind::BadMagic {
            expected: FLD_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        }));
    }
    let version = r.u32("version")?;
    if version != FLD_VERSION {
        return Err(r.format(FormatErrorKind::Version {
            expected: FLD_VERSION,
            found: version,
        }));
    }
    let samples = r.u32("sample count")? as usize;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let gates = r.u32("gate count")? as usize;
    let flags = r.u32("flags")?;

    let pixels = samples * height * width;
    let tpsf = r.f32s(pixels * gates, "tpsf stack")?;
    let irf = r.f32s(pixels * gates, "irf stack")?;
    let truth = if flags & FLAG_TRUTH != 0 {
        let per = height * width;
        let mut t = Truth {
            tau1: vec![0.0; pixels],
            tau2: vec![0.0; pixels],
            a_r: vec![0.0; pixels],
        };
        for n in 0..samples {
            let t1 = r.f32s(per, "truth tau1 plane")?;
            let t2 = r.f32s(per, "truth tau2 plane")?;
            let ar = r.f32s(per, "truth a_r plane")?;
            t.tau1[n * per..(n + 1) * per].copy_from_slice(&t1);
            t.tau2[n * per..(n + 1) * per].copy_from_slice(&t2);
            t.a_r[n * per..(n + 1) * per].copy_from_slice(&ar);
        }
        Some(t)
    } else {
        None
    };
    let mask = if flags & FLAG_MASK != 0 {
        Some(r.f32s(pixels, "mask stack")?)
    } else {
        None
    };
    let meta: DatasetMeta = if flags & FLAG_META != 0 {
        let len = r.u32("provenance length")? as usize;
        let raw = r.take(len, "provenance block")?;
        serde_json::from_slice(raw)
            .map_err(|e| r.format(FormatErrorKind::Corrupt(format!("provenance json: {e}"))))?
    } else {
        return Err(r.format(FormatErrorKind::Corrupt(
            "dataset lacks the provenance block".into(),
        )));
    };
    if r.pos != bytes.len() {
        return Err(r.format(FormatErrorKind::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        ))));
    }
    let dt_ps = meta.sim.dt_ps;
    Ok(FliDataset {
        samples,
        height,
        width,
        gates,
        dt_ps,
        tpsf,
        irf,
        truth,
        mask,
        meta,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn format(&self, kind: FormatErrorKind) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            kind,
        }
    }

    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.format(FormatErrorKind::Truncated {
                context: context.to_string(),
            }));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, context: &str) -> Result<Vec<f64>> {
        let b = self.take(n * 4, context)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

pub(crate) fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, vs: &[f64]) {
    out.reserve(vs.len() * 4);
    for &v in vs {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Round a stack to f32 precision so in-memory data matches its file form.
pub(crate) fn quantize_f32(vs: &mut [f64]) {
    for v in vs {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::dataset::{generate_dataset, SimConfig};
    use std::path::PathBuf;

    fn ds() -> FliDataset {
        let cfg = SimConfig {
            samples: 1,
            image_side: 8,
            gates: 24,
            ..SimConfig::default()
        };
        generate_dataset(&cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let d = ds();
        let bytes = dataset_to_bytes(&d).unwrap();
        let back = dataset_from_bytes(&bytes, &PathBuf::from("mem")).unwrap();
        let again = dataset_to_bytes(&back).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(back.truth, d.truth, "truth maps survive the round trip");
    }

    #[test]
    fn bad_magic_detected() {
        let d = ds();
        let mut bytes = dataset_to_bytes(&d).unwrap();
        bytes[0] = b'X';
        let err = dataset_from_bytes(&bytes, &PathBuf::from("mem")).unwrap_err();
        assert!(matches!(
            err,
            Error::Format {
                kind: FormatErrorKind::BadMagic { .. },
                ..
            }
        ));
    }

    #[test]
    fn truncation_detected() {
        let d = ds();
        let bytes = dataset_to_bytes(&d).unwrap();
        let err = dataset_from_bytes(&bytes[..bytes.len() / 2], &PathBuf::from("mem")).unwrap_err();
        assert!(matches!(
            err,
            Error::Format {
                kind: FormatErrorKind::Truncated { .. },
                ..
            }
        ));
    }
}
