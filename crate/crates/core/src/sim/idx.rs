//! Reader for IDX-format image files (the container used by the MNIST
//! distribution): big-endian magic 0x00000803, dims, then raw u8 pixels.

use crate::error::{Error, FormatErrorKind, Result};
use std::path::Path;

/// Load binary foreground masks from an IDX u8 image file. Images must be
/// square with the expected side length; pixels above `threshold` count as
/// foreground.
pub fn read_idx_masks(path: &str, threshold: u8, expected_side: usize) -> Result<Vec<Vec<bool>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_masks(&bytes, threshold, expected_side, Path::new(path))
}

pub(crate) fn parse_idx_masks(
    bytes: &[u8],
    threshold: u8,
    expected_side: usize,
    path: &Path,
) -> Result<Vec<Vec<bool>>> {
    let fail = |kind: FormatErrorKind| Error::Format {
        path: path.to_path_buf(),
        kind,
    };
    if bytes.len() < 16 {
        return Err(fail(FormatErrorKind::Truncated {
            context: "idx header".into(),
        }));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail(FormatErrorKind::BadMagic {
            expected: [0, 0, 8, 3],
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        }));
    }
    if bytes[2] != 0x08 || bytes[3] != 3 {
        return Err(fail(FormatErrorKind::Corrupt(format!(
            "expected u8 rank-3 idx data, found dtype 0x{:02x} rank {}",
            bytes[2], bytes[3]
        ))));
    }
    let be_u32 = |o: usize| u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let n = be_u32(4) as usize;
    let rows = be_u32(8) as usize;
    let cols = be_u32(12) as usize;
    if rows != expected_side || cols != expected_side {
        return Err(Error::Dimension(format!(
            "idx images are {rows}x{cols}, expected {expected_side}x{expected_side}"
        )));
    }
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(fail(FormatErrorKind::Truncated {
            context: format!("idx pixel data ({} of {} bytes)", bytes.len(), need),
        }));
    }
    let per = rows * cols;
    Ok((0..n)
        .map(|i| {
            bytes[16 + i * per..16 + (i + 1) * per]
                .iter()
                .map(|&p| p > threshold)
                .collect()
        })
        .collect())
}
