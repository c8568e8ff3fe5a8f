//! Named-tensor container used by the weights ("FLW1") and optimizer-state
//! ("FLO1") files.
//!
//! Layout, integers little-endian: magic (4 bytes) | version u32 |
//! tensor count u32 | per tensor: name length u16, UTF-8 name, rank u8,
//! dims u32 each, raw f32 data | optional trailing provenance:
//! "META" | u32 length | JSON bytes.
//!
//! Readers walk the file against an expected schema, so a corrupted
//! dimension is reported as a shape mismatch naming the tensor instead of
//! desynchronizing the stream.

use crate::error::{Error, FormatErrorKind, Result};
use std::path::Path;

pub const CONTAINER_VERSION: u32 = 1;
const META_MARK: [u8; 4] = *b"META";

pub struct ContainerWriter {
    bytes: Vec<u8>,
    count: u32,
}

impl ContainerWriter {
    pub fn new(magic: [u8; 4]) -> Self {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&magic);
        bytes.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes()); // count, backpatched
        ContainerWriter { bytes, count: 0 }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.bytes
            .extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.bytes.extend_from_slice(name.as_bytes());
        self.bytes.push(shape.len() as u8);
        for &d in shape {
            self.bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.count += 1;
    }

    pub fn finish(mut self, meta_json: Option<&str>) -> Vec<u8> {
        self.bytes[8..12].copy_from_slice(&self.count.to_le_bytes());
        if let Some(meta) = meta_json {
            self.bytes.extend_from_slice(&META_MARK);
            self.bytes
                .extend_from_slice(&(meta.len() as u32).to_le_bytes());
            self.bytes.extend_from_slice(meta.as_bytes());
        }
        self.bytes
    }
}

pub struct ContainerReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
    remaining: u32,
}

impl<'a> ContainerReader<'a> {
    pub fn new(bytes: &'a [u8], magic: [u8; 4], path: &'a Path) -> Result<Self> {
        let mut r = ContainerReader {
            bytes,
            pos: 0,
            path,
            remaining: 0,
        };
        let found = r.take(4, "magic")?;
        if found != magic {
            return Err(r.format(FormatErrorKind::BadMagic {
                expected: magic,
                found: [found[0], found[1], found[2], found[3]],
            }));
        }
        let version = r.u32("version")?;
        if version != CONTAINER_VERSION {
            return Err(r.format(FormatErrorKind::Version {
                expected: CONTAINER_VERSION,
                found: version,
            }));
        }
        r.remaining = r.u32("tensor count")?;
        Ok(r)
    }

    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    /// Read the next tensor, requiring the given name and shape.
    pub fn next_expected(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        if self.remaining == 0 {
            return Err(self.format(FormatErrorKind::Corrupt(format!(
                "tensor '{name}' missing: container ended early"
            ))));
        }
        self.remaining -= 1;
        let nlen = self.u16("name length")? as usize;
        let raw = self.take(nlen, "tensor name")?;
        let found_name = std::str::from_utf8(raw)
            .map_err(|_| self.format(FormatErrorKind::Corrupt("non-UTF8 tensor name".into())))?;
        if found_name != name {
            return Err(self.format(FormatErrorKind::Corrupt(format!(
                "expected tensor '{name}', found '{found_name}'"
            ))));
        }
        let rank = self.take(1, "rank")?[0] as usize;
        let mut found_shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            found_shape.push(self.u32("dimension")? as usize);
        }
        if found_shape != shape {
            return Err(self.format(FormatErrorKind::ShapeMismatch {
                tensor: name.to_string(),
                expected: shape.to_vec(),
                found: found_shape,
            }));
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4, "tensor data")?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    /// Consume the trailing provenance block and verify the end of file.
    pub fn finish(mut self) -> Result<Option<String>> {
        if self.remaining != 0 {
            return Err(self.format(FormatErrorKind::Corrupt(format!(
                "{} unread tensors remain",
                self.remaining
            ))));
        }
        if self.pos == self.bytes.len() {
            return Ok(None);
        }
        let mark = self.take(4, "provenance marker")?;
        if mark != META_MARK {
            return Err(self.format(FormatErrorKind::Corrupt(
                "unexpected bytes after tensor data".into(),
            )));
        }
        let len = self.u32("provenance length")? as usize;
        let raw = self.take(len, "provenance json")?;
        let json = std::str::from_utf8(raw)
            .map_err(|_| self.format(FormatErrorKind::Corrupt("non-UTF8 provenance".into())))?
            .to_string();
        if self.pos != self.bytes.len() {
            return Err(self.format(FormatErrorKind::Corrupt(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            ))));
        }
        Ok(Some(json))
    }

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

    fn u16(&mut self, context: &str) -> Result<u16> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    const MAGIC: [u8; 4] = *b"TST1";

    #[test]
    fn writes_and_reads_back() {
        let mut w = ContainerWriter::new(MAGIC);
        w.push("a", &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        w.push("b", &[3], &[5.0, 6.0, 7.0]);
        let bytes = w.finish(Some("{\"k\":1}"));

        let p = PathBuf::from("mem");
        let mut r = ContainerReader::new(&bytes, MAGIC, &p).unwrap();
        assert_eq!(r.next_expected("a", &[2, 2]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.next_expected("b", &[3]).unwrap(), vec![5.0, 6.0, 7.0]);
        assert_eq!(r.finish().unwrap().as_deref(), Some("{\"k\":1}"));
    }

    #[test]
    fn corrupted_dimension_names_the_tensor() {
        let mut w = ContainerWriter::new(MAGIC);
        w.push("weights", &[2, 2], &[0.0; 4]);
        let mut bytes = w.finish(None);
        // dims live after magic(4)+version(4)+count(4)+nlen(2)+name(7)+rank(1)
        let dim_offset = 4 + 4 + 4 + 2 + 7 + 1;
        bytes[dim_offset] = 9;
        let p = PathBuf::from("mem");
        let mut r = ContainerReader::new(&bytes, MAGIC, &p).unwrap();
        let err = r.next_expected("weights", &[2, 2]).unwrap_err();
        match err {
            Error::Format {
                kind: FormatErrorKind::ShapeMismatch { tensor, .. },
                ..
            } => assert_eq!(tensor, "weights"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let w = ContainerWriter::new(MAGIC);
        let bytes = w.finish(None);
        let p = PathBuf::from("mem");
        assert!(matches!(
            ContainerReader::new(&bytes, *b"FLW1", &p),
            Err(Error::Format {
                kind: FormatErrorKind::BadMagic { .. },
                ..
            })
        ));
    }
}
