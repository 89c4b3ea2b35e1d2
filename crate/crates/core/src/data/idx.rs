//! IDX reader/writer (big-endian header, u8 payload).

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nd::{Real, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic at byte 0: expected {expected:#010x}, found {found:#010x}")]
    Magic { expected: u32, found: u32 },
    #[error("truncated at byte {offset}: need {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("count mismatch: {images} images (byte 4 of image file) vs {labels} labels (byte 4 of label file)")]
    CountMismatch { images: usize, labels: usize },
    #[error("{extra} unexpected trailing bytes starting at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("invalid header at byte {offset}: {reason}")]
    Header { offset: usize, reason: String },
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IdxError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(IdxError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IdxError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<(), IdxError> {
        if self.pos != self.bytes.len() {
            return Err(IdxError::TrailingBytes {
                offset: self.pos,
                extra: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

fn positive(v: u32, offset: usize, what: &str) -> Result<usize, IdxError> {
    if v == 0 {
        return Err(IdxError::Header {
            offset,
            reason: format!("{what} must be positive"),
        });
    }
    Ok(v as usize)
}

/// Parses an image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), IdxError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.u32()?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::Magic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = positive(cur.u32()?, 4, "image count")?;
    let rows = positive(cur.u32()?, 8, "row count")?;
    let cols = positive(cur.u32()?, 12, "column count")?;
    let len = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| IdxError::Header {
            offset: 4,
            reason: "payload size overflows".into(),
        })?;
    let pixels = cur.take(len)?.to_vec();
    cur.finish()?;
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.u32()?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::Magic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = positive(cur.u32()?, 4, "label count")?;
    let labels = cur.take(n)?.to_vec();
    cur.finish()?;
    Ok(labels)
}

pub fn write_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn fnv1a64(chunks: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for chunk in chunks {
        for &b in *chunk {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Builds a dataset from parsed IDX bytes; pixels are divided by 255.
pub fn dataset_from_idx<T: Real>(
    name: &str,
    image_bytes: &[u8],
    label_bytes: &[u8],
) -> Result<Dataset<T>> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    let scale = T::lit(255.0);
    let inputs = Tensor::new(
        vec![n, rows * cols],
        pixels.iter().map(|&p| T::lit(p as f64) / scale).collect(),
    )?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        name,
        format!("fnv1a64:{:016x}", fnv1a64(&[image_bytes, label_bytes])),
        inputs,
        labels,
        num_classes,
    )
}

pub fn load_idx<T: Real>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let name = images
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    dataset_from_idx(&name, &ib, &lb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_white_pixel() {
        let d: Dataset<f64> = dataset_from_idx(
            "px",
            &write_idx_images(1, 1, &[255]),
            &write_idx_labels(&[0]),
        )
        .unwrap();
        assert_eq!(d.inputs().data(), &[1.0]);
    }

    #[test]
    fn two_image_fixture() {
        // two 2x3 images, hand-written bytes
        let images: Vec<u8> = vec![
            0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, //
            0, 51, 102, 153, 204, 255, //
            255, 0, 255, 0, 255, 0,
        ];
        let labels: Vec<u8> = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0];
        let d: Dataset<f64> = dataset_from_idx("fx", &images, &labels).unwrap();
        let expected = Tensor::matrix(
            2,
            6,
            vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        assert_eq!(d.inputs(), &expected);
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.num_classes, 2);
    }

    #[test]
    fn count_mismatch_names_both() {
        let err = dataset_from_idx::<f64>(
            "x",
            &write_idx_images(1, 1, &[1, 2]),
            &write_idx_labels(&[0, 1, 1]),
        )
        .unwrap_err();
        match err {
            Error::Idx(IdxError::CountMismatch { images, labels }) => {
                assert_eq!((images, labels), (2, 3))
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_text(2, 3).contains("2 images") && err_text(2, 3).contains("3 labels"));
    }

    fn err_text(images: usize, labels: usize) -> String {
        IdxError::CountMismatch { images, labels }.to_string()
    }

    #[test]
    fn bad_magic() {
        let mut bytes = write_idx_images(1, 1, &[7]);
        bytes[3] = 0x01;
        assert_eq!(
            parse_idx_images(&bytes).unwrap_err(),
            IdxError::Magic {
                expected: IMAGES_MAGIC,
                found: 0x0000_0801
            }
        );
        assert!(matches!(
            parse_idx_labels(&write_idx_images(1, 1, &[7])),
            Err(IdxError::Magic { .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = write_idx_images(2, 2, &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(
            parse_idx_images(&bytes[..18]).unwrap_err(),
            IdxError::Truncated {
                offset: 16,
                needed: 8,
                available: 2
            }
        );
        assert_eq!(
            parse_idx_labels(&[0, 0, 8, 1, 0]).unwrap_err(),
            IdxError::Truncated {
                offset: 4,
                needed: 4,
                available: 1
            }
        );
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = write_idx_labels(&[1]);
        bytes.push(9);
        assert_eq!(
            parse_idx_labels(&bytes).unwrap_err(),
            IdxError::TrailingBytes {
                offset: 9,
                extra: 1
            }
        );
    }

    proptest! {
        // any byte string either parses or yields a classified error
        #[test]
        fn parsing_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = parse_idx_images(&bytes);
            let _ = parse_idx_labels(&bytes);
        }

        #[test]
        fn labels_round_trip(labels in proptest::collection::vec(any::<u8>(), 1..50)) {
            prop_assert_eq!(parse_idx_labels(&write_idx_labels(&labels)).unwrap(), labels);
        }
    }
}
