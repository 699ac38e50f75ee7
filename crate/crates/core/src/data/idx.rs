//! Reader and writer for the big-endian IDX format used by MNIST-style datasets.
//! Gzip-compressed files are detected by their magic bytes and inflated.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw image payload as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.pixels_per_image();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Selected images as `[k × 1 × rows × cols]`, scaled to `[0, 1]`.
    pub fn to_tensor(&self, indices: &[usize]) -> Tensor {
        let data = indices
            .iter()
            .flat_map(|&i| self.image(i).iter().map(|&b| f64::from(b) / 255.0))
            .collect();
        Tensor::new(vec![indices.len(), 1, self.rows, self.cols], data).expect("sizes agree")
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(path: &Path, bytes: &[u8], words: usize) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: 4 * words,
            found: bytes.len(),
        });
    }
    Ok(bytes[..4 * words]
        .chunks_exact(4)
        .map(|w| u32::from_be_bytes([w[0], w[1], w[2], w[3]]))
        .collect())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    let found = header(path, bytes, 1)?[0];
    if found != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("magic {found:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn check_payload(path: &Path, bytes: &[u8], offset: usize, expected: usize) -> Result<()> {
    let found = bytes.len() - offset;
    if found != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: offset + expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    check_magic(path, &bytes, IMAGES_MAGIC)?;
    let h = header(path, &bytes, 4)?;
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    check_payload(path, &bytes, 16, count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

/// All images as `[n × 1 × rows × cols]` with pixels divided by 255.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let raw = read_idx_images(path)?;
    let all: Vec<usize> = (0..raw.count).collect();
    Ok(raw.to_tensor(&all))
}

/// Raw label bytes; range checks against the class count happen at dataset construction.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    check_magic(path, &bytes, LABELS_MAGIC)?;
    let count = header(path, &bytes, 2)?[1] as usize;
    check_payload(path, &bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "labels-as-images", &encode_idx_labels(&[1, 2]));
        assert!(matches!(load_idx_images(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn constant_255_images_become_ones() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28];
        bytes.extend(std::iter::repeat_n(255u8, 2 * 28 * 28));
        let p = write(&dir, "img", &bytes);
        let t = load_idx_images(&p).unwrap();
        assert_eq!(t.shape(), &[2, 1, 28, 28]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_images_are_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = encode_idx_images(&IdxImages { count: 2, rows: 2, cols: 2, pixels: vec![7; 8] });
        bytes.pop();
        let p = write(&dir, "short", &bytes);
        assert!(matches!(load_idx_images(&p), Err(Error::Length { .. })));
        let p = write(&dir, "tiny", &[0, 0, 8]);
        assert!(matches!(load_idx_images(&p), Err(Error::Length { .. })));
    }

    #[test]
    fn label_fixture_and_empty_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l", &[0, 0, 8, 1, 0, 0, 0, 3, 3, 1, 4]);
        assert_eq!(load_idx_labels(&p).unwrap(), vec![3, 1, 4]);
        let p = write(&dir, "e", &[0, 0, 8, 1, 0, 0, 0, 0]);
        assert!(load_idx_labels(&p).unwrap().is_empty());
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&encode_idx_labels(&[9, 0, 5])).unwrap();
        let p = write(&dir, "l.gz", &enc.finish().unwrap());
        assert_eq!(load_idx_labels(&p).unwrap(), vec![9, 0, 5]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_idx_labels("/nonexistent/labels"), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn writer_then_loader_reproduces_payload(
            count in 0usize..4, rows in 1usize..5, cols in 1usize..5, seed in any::<u8>(),
        ) {
            let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let images = IdxImages { count, rows, cols, pixels };
            let labels: Vec<u8> = (0..count as u8).map(|i| i.wrapping_add(seed)).collect();
            let dir = tempfile::tempdir().unwrap();
            let ip = write(&dir, "i", &encode_idx_images(&images));
            let lp = write(&dir, "l", &encode_idx_labels(&labels));
            prop_assert_eq!(read_idx_images(&ip).unwrap(), images.clone());
            prop_assert_eq!(load_idx_labels(&lp).unwrap(), labels);
            let t = load_idx_images(&ip).unwrap();
            for (v, &b) in t.data().iter().zip(&images.pixels) {
                prop_assert_eq!(*v, f64::from(b) / 255.0);
            }
        }
    }
}
