//! IDX files as distributed for MNIST: a big-endian magic number, one
//! big-endian `u32` per dimension, then raw unsigned bytes. Files starting
//! with the gzip magic are decompressed first.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{DataError, Dataset, Split};
use crate::linalg::Matrix;
use crate::propagation::Targets;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    let chunk = bytes.get(offset..end).ok_or(DataError::Truncated {
        offset,
        needed: 4,
        available: bytes.len().saturating_sub(offset),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], DataError> {
    bytes.get(offset..offset + len).ok_or(DataError::Truncated {
        offset,
        needed: len,
        available: bytes.len().saturating_sub(offset),
    })
}

/// Decoded image file: count, rows, columns and the raw pixel bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

/// Builds a dataset from decoded IDX contents; pixels are scaled into `[0, 1]`.
pub fn dataset_from_idx(
    images: &IdxImages,
    labels: &[u8],
    split: Split,
) -> Result<Dataset, DataError> {
    if images.count != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    if images.count == 0 || images.rows * images.cols == 0 {
        return Err(DataError::Empty);
    }
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(DataError::InvalidLabel { index, value });
    }
    let data = images
        .pixels
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let inputs = Matrix::new(images.count, images.rows * images.cols, data)
        .expect("dimensions checked above");
    let targets = Targets::Classes(labels.iter().map(|&l| usize::from(l)).collect());
    Ok(Dataset::new(inputs, targets, split).expect("counts checked above"))
}

/// Loads an MNIST image/label file pair (raw or gzip).
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset, DataError> {
    let images = parse_idx_images(&read_file(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels_path.as_ref())?)?;
    dataset_from_idx(&images, &labels, split)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) fn image_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    pub(crate) fn label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn magic_constants() {
        assert_eq!(IMAGES_MAGIC, 2051);
        assert_eq!(LABELS_MAGIC, 2049);
    }

    #[test]
    fn parses_and_scales_pixels() {
        let imgs = parse_idx_images(&image_bytes(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        let labels = parse_idx_labels(&label_bytes(&[3, 9])).unwrap();
        let ds = dataset_from_idx(&imgs, &labels, Split::Train).unwrap();
        assert_eq!(ds.inputs().row(0), &[0.0, 1.0]);
        assert_eq!(ds.inputs().row(1), &[0.2, 0.4]);
        assert_eq!(ds.targets(), &Targets::Classes(vec![3, 9]));
    }

    #[test]
    fn truncated_header_names_offset() {
        let bytes = &image_bytes(1, 1, 1, &[7])[..10];
        let err = parse_idx_images(bytes).unwrap_err();
        assert!(matches!(
            err,
            DataError::Truncated {
                offset: 8,
                needed: 4,
                available: 2
            }
        ));
        assert!(err.to_string().contains("offset 8"));
    }

    #[test]
    fn truncated_payload() {
        let bytes = image_bytes(2, 2, 2, &[0; 5]);
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(DataError::Truncated {
                offset: 16,
                needed: 8,
                available: 5
            })
        ));
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        assert!(matches!(
            parse_idx_images(&label_bytes(&[1])),
            Err(DataError::BadMagic {
                expected: IMAGES_MAGIC,
                found: LABELS_MAGIC
            })
        ));
        let imgs = parse_idx_images(&image_bytes(2, 1, 1, &[1, 2])).unwrap();
        assert!(matches!(
            dataset_from_idx(&imgs, &[1], Split::Test),
            Err(DataError::CountMismatch {
                images: 2,
                labels: 1
            })
        ));
        assert!(matches!(
            dataset_from_idx(&imgs, &[1, 12], Split::Test),
            Err(DataError::InvalidLabel {
                index: 1,
                value: 12
            })
        ));
    }

    #[test]
    fn loads_raw_and_gzip_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = image_bytes(1, 2, 2, &[0, 255, 0, 255]);
        let lab = label_bytes(&[4]);
        std::fs::write(dir.path().join("img"), &img).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&lab).unwrap();
        std::fs::write(dir.path().join("lab.gz"), gz.finish().unwrap()).unwrap();
        let ds = load_mnist_idx(
            dir.path().join("img"),
            dir.path().join("lab.gz"),
            Split::Train,
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.inputs().row(0), &[0.0, 1.0, 0.0, 1.0]);

        let missing = load_mnist_idx(
            dir.path().join("nope"),
            dir.path().join("lab.gz"),
            Split::Train,
        );
        assert!(matches!(missing, Err(DataError::Io { .. })));
    }
}
