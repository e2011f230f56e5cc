//! SVL1 dataset files: a minimal binary container for point clouds
//! with optional class labels.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! bytes 0..4    magic "SVL1"
//! bytes 4..8    u32 n      (number of rows)
//! bytes 8..12   u32 d      (coordinates per row)
//! bytes 12..16  u32 C      (number of classes; 0 = unlabeled)
//! if C > 0:     n × u32    labels, each < C
//! then:         n·d × f32  row-major coordinates
//! ```
//!
//! Total length is exactly `16 + (C>0 ? 4n : 0) + 4nd` bytes; readers
//! reject anything shorter or longer. Coordinates are stored in single
//! precision; a write→read→write cycle reproduces the payload
//! bit-exactly.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SVL1";

/// An SVL1 file's contents, coordinates widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Array2<f64>,
    /// Present exactly when the file is labeled (`C > 0`).
    pub labels: Option<Vec<u32>>,
    /// Number of classes; 0 means unlabeled.
    pub num_classes: u32,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), reason)
}

/// Serializes rows (and labels, when `num_classes > 0`) into the SVL1
/// byte layout.
pub fn encode_svl(
    points: ArrayView2<'_, f64>,
    labels: Option<&[u32]>,
    num_classes: u32,
) -> Result<Vec<u8>> {
    let n = points.nrows();
    let d = points.ncols();
    if n == 0 || d == 0 {
        return Err(Error::Spec(format!(
            "dataset must have at least one row and one column (got {n} x {d})"
        )));
    }
    if n > u32::MAX as usize || d > u32::MAX as usize {
        return Err(Error::Spec("dataset dimensions exceed u32".into()));
    }
    match (labels, num_classes) {
        (None, 0) => {}
        (Some(_), 0) => {
            return Err(Error::Spec(
                "labels supplied but class count is zero".into(),
            ))
        }
        (None, _) => {
            return Err(Error::Spec(
                "class count is nonzero but no labels supplied".into(),
            ))
        }
        (Some(ls), c) => {
            if ls.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {n} rows",
                    ls.len()
                )));
            }
            if let Some(&bad) = ls.iter().find(|&&l| l >= c) {
                return Err(Error::Spec(format!(
                    "label {bad} out of range for {c} classes"
                )));
            }
        }
    }

    let label_bytes = if num_classes > 0 { 4 * n } else { 0 };
    let mut out = Vec::with_capacity(16 + label_bytes + 4 * n * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&num_classes.to_le_bytes());
    if let Some(ls) = labels {
        for &l in ls {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    for &v in points.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses SVL1 bytes; `path` is only used in error messages.
pub fn decode_svl(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.len() < 16 {
        return Err(format_err(path, "file shorter than the 16-byte header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(path, "bad magic (expected \"SVL1\")"));
    }
    let read_u32 =
        |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("width"));
    let n = read_u32(4) as usize;
    let d = read_u32(8) as usize;
    let num_classes = read_u32(12);
    if n == 0 || d == 0 {
        return Err(format_err(path, format!("empty dataset ({n} x {d})")));
    }
    let label_bytes = if num_classes > 0 { 4 * n } else { 0 };
    let want = 16 + label_bytes + 4 * n * d;
    if bytes.len() != want {
        return Err(format_err(
            path,
            format!("expected exactly {want} bytes, found {}", bytes.len()),
        ));
    }
    let labels = if num_classes > 0 {
        let mut ls = Vec::with_capacity(n);
        for i in 0..n {
            let l = read_u32(16 + 4 * i);
            if l >= num_classes {
                return Err(format_err(
                    path,
                    format!("label {l} at row {i} out of range for {num_classes} classes"),
                ));
            }
            ls.push(l);
        }
        Some(ls)
    } else {
        None
    };
    let mut flat = Vec::with_capacity(n * d);
    let base = 16 + label_bytes;
    for i in 0..n * d {
        let off = base + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("width"));
        flat.push(v as f64);
    }
    let points = Array2::from_shape_vec((n, d), flat).expect("length checked");
    Ok(Dataset {
        points,
        labels,
        num_classes,
    })
}

/// Writes an SVL1 file.
pub fn write_svl(
    path: impl AsRef<Path>,
    points: ArrayView2<'_, f64>,
    labels: Option<&[u32]>,
    num_classes: u32,
) -> Result<()> {
    let bytes = encode_svl(points, labels, num_classes)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads an SVL1 file.
pub fn read_svl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_svl(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::path::PathBuf;

    fn scratch(name: &str) -> PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("svl-test-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn unlabeled_layout_and_length() {
        let points = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let bytes = encode_svl(points.view(), None, 0).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 3 * 2);
        assert_eq!(&bytes[0..4], b"SVL1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
        assert_eq!(
            f32::from_le_bytes(bytes[16..20].try_into().unwrap()),
            1.0f32
        );
    }

    #[test]
    fn labeled_layout_and_length() {
        let points = array![[0.5], [1.5]];
        let bytes = encode_svl(points.view(), Some(&[1, 0]), 2).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 2 + 4 * 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let path = scratch("roundtrip.svl");
        let points = array![[0.1, -2.75], [1e-8, 3.25], [std::f64::consts::PI, 0.0]];
        write_svl(&path, points.view(), Some(&[0, 2, 1]), 3).unwrap();
        let first = fs::read(&path).unwrap();
        let ds = read_svl(&path).unwrap();
        assert_eq!(ds.num_classes, 3);
        assert_eq!(ds.labels.as_deref(), Some(&[0u32, 2, 1][..]));
        // Values round-trip through f32: write the parsed copy again
        // and compare bytes.
        write_svl(&path, ds.points.view(), ds.labels.as_deref(), ds.num_classes).unwrap();
        let second = fs::read(&path).unwrap();
        assert_eq!(first, second);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_malformed_files() {
        let path = Path::new("test.svl");
        assert!(decode_svl(b"SVL", path).is_err());
        assert!(decode_svl(b"XXXX0000000000000000", path).is_err());
        let points = array![[1.0]];
        let mut bytes = encode_svl(points.view(), None, 0).unwrap();
        bytes.push(0);
        let err = decode_svl(&bytes, path).unwrap_err();
        assert!(err.to_string().contains("exactly"), "{err}");
        bytes.truncate(bytes.len() - 3);
        assert!(decode_svl(&bytes, path).is_err());
    }

    #[test]
    fn rejects_label_mismatches() {
        let points = array![[1.0], [2.0]];
        assert!(encode_svl(points.view(), Some(&[0, 1]), 0).is_err());
        assert!(encode_svl(points.view(), None, 2).is_err());
        assert!(encode_svl(points.view(), Some(&[0]), 2).is_err());
        assert!(encode_svl(points.view(), Some(&[0, 2]), 2).is_err());

        // A file whose stored label exceeds its class count is rejected.
        let mut bytes = encode_svl(points.view(), Some(&[0, 1]), 2).unwrap();
        bytes[20] = 9;
        let err = decode_svl(&bytes, Path::new("bad.svl")).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn read_reports_missing_file() {
        assert!(read_svl("/nonexistent/definitely/missing.svl").is_err());
    }
}
