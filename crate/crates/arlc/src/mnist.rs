//! IDX-format dataset ingestion: big-endian header (magic, dims), raw
//! payload, optional gzip wrapping detected by the 2-byte signature.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_UNSIGNED_BYTE: u8 = 0x08;

/// A parsed IDX container: element type code, dimensions, raw payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxData {
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

fn idx_element_size(dtype: u8) -> Result<usize> {
    match dtype {
        0x08 | 0x09 => Ok(1),
        0x0B => Ok(2),
        0x0C | 0x0D => Ok(4),
        0x0E => Ok(8),
        other => Err(Error::Format(format!(
            "unknown IDX element type 0x{other:02x}"
        ))),
    }
}

/// Decode an IDX byte stream: two zero bytes, element-type byte, dimension
/// count, one big-endian u32 per dimension, then the payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format(format!(
            "bad IDX magic: {:02x?}",
            &bytes[..bytes.len().min(4)]
        )));
    }
    let dtype = bytes[2];
    let elem = idx_element_size(dtype)?;
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "IDX header truncated: need {header} bytes, have {}",
            bytes.len()
        )));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 4 + 4 * d;
        let raw: [u8; 4] = bytes[off..off + 4].try_into().expect("4-byte slice");
        dims.push(u32::from_be_bytes(raw) as usize);
    }
    let expected = dims.iter().product::<usize>() * elem;
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(Error::Format(format!(
            "IDX payload size mismatch: expected {expected} bytes, got {actual}"
        )));
    }
    Ok(IdxData {
        dtype,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// Re-encode to IDX bytes; the exact inverse of [`parse_idx`].
pub fn write_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * data.dims.len() + data.payload.len());
    out.extend_from_slice(&[0, 0, data.dtype, data.dims.len() as u8]);
    for &d in &data.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&data.payload);
    out
}

/// Read a file that may be gzip-compressed (signature 0x1f 0x8b).
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut decoded = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut decoded)
            .map_err(|e| Error::io(path, e))?;
        Ok(decoded)
    } else {
        Ok(raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A loaded image-classification split: pixels scaled to [0, 1] by /255,
/// one label per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// A contiguous sub-range, useful for small smoke runs.
    pub fn slice(&self, start: usize, count: usize) -> Result<Dataset> {
        if start + count > self.len() || count == 0 {
            return Err(Error::Validation(format!(
                "slice {start}..{} of dataset with {} samples",
                start + count,
                self.len()
            )));
        }
        let sample: usize = self.images.shape()[1..].iter().product();
        let data = self.images.data()[start * sample..(start + count) * sample].to_vec();
        let mut shape = self.images.shape().to_vec();
        shape[0] = count;
        Ok(Dataset {
            images: Tensor::new(shape, data)?,
            labels: self.labels[start..start + count].to_vec(),
            split: self.split,
        })
    }

    /// Shuffled minibatches for one epoch. The permutation is a pure
    /// function of (seed, epoch); the final short batch is included.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> BatchIterator<'_> {
        assert!(batch_size >= 1, "batch size must be >= 1");
        BatchIterator {
            dataset: self,
            order: permutation(self.len(), seed, epoch),
            cursor: 0,
            batch_size,
        }
    }

    /// Unshuffled minibatches, for evaluation.
    pub fn sequential_batches(&self, batch_size: usize) -> BatchIterator<'_> {
        assert!(batch_size >= 1, "batch size must be >= 1");
        BatchIterator {
            dataset: self,
            order: (0..self.len() as u32).collect(),
            cursor: 0,
            batch_size,
        }
    }

    fn gather(&self, indices: &[u32]) -> (Tensor, Vec<usize>) {
        let sample: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let i = i as usize;
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i] as usize);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (
            Tensor::new(shape, data).expect("gather preserves sample shape"),
            labels,
        )
    }
}

/// Deterministic Fisher-Yates permutation of 0..n keyed by (seed, epoch).
pub fn permutation(n: usize, seed: u64, epoch: usize) -> Vec<u32> {
    let stream = seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut order: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    order: Vec<u32>,
    cursor: usize,
    batch_size: usize,
}

impl Iterator for BatchIterator<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.dataset.gather(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// Load an image/label IDX pair into a dataset. Pixels are unsigned bytes
/// scaled to [0, 1]; image and label counts must agree.
pub fn load_dataset(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx(&read_maybe_gzip(images_path)?)?;
    let labels = parse_idx(&read_maybe_gzip(labels_path)?)?;
    if images.dtype != IDX_UNSIGNED_BYTE || images.dims.len() != 3 {
        return Err(Error::Format(format!(
            "expected unsigned-byte rank-3 image file, got type 0x{:02x} dims {:?}",
            images.dtype, images.dims
        )));
    }
    if labels.dtype != IDX_UNSIGNED_BYTE || labels.dims.len() != 1 {
        return Err(Error::Format(format!(
            "expected unsigned-byte rank-1 label file, got type 0x{:02x} dims {:?}",
            labels.dtype, labels.dims
        )));
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::Validation(format!(
            "{n} images but {} labels",
            labels.dims[0]
        )));
    }
    if let Some(&bad) = labels.payload.iter().find(|&&l| l > 9) {
        return Err(Error::Validation(format!("label {bad} outside 0..=9")));
    }
    let data: Vec<f64> = images.payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels: labels.payload,
        split,
    })
}

/// Load the canonical split from a directory, accepting either plain or
/// .gz file names.
pub fn load_split(data_dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let pick = |stem: String| -> Result<std::path::PathBuf> {
        let plain = data_dir.join(&stem);
        if plain.exists() {
            return Ok(plain);
        }
        let gz = data_dir.join(format!("{stem}.gz"));
        if gz.exists() {
            return Ok(gz);
        }
        Err(Error::Validation(format!(
            "no {stem}[.gz] under {}",
            data_dir.display()
        )))
    };
    let images = pick(format!("{prefix}-images-idx3-ubyte"))?;
    let labels = pick(format!("{prefix}-labels-idx1-ubyte"))?;
    load_dataset(&images, &labels, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_pair(n: usize) -> (Vec<u8>, Vec<u8>) {
        let images = IdxData {
            dtype: IDX_UNSIGNED_BYTE,
            dims: vec![n, 4, 4],
            payload: (0..n * 16).map(|i| (i % 251) as u8).collect(),
        };
        let labels = IdxData {
            dtype: IDX_UNSIGNED_BYTE,
            dims: vec![n],
            payload: (0..n).map(|i| (i % 10) as u8).collect(),
        };
        (write_idx(&images), write_idx(&labels))
    }

    #[test]
    fn idx_round_trip_is_bit_exact() {
        let (bytes, _) = synthetic_pair(5);
        let parsed = parse_idx(&bytes).unwrap();
        assert_eq!(write_idx(&parsed), bytes);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(parse_idx(&[1, 2, 3, 4, 5]).is_err());
        assert!(parse_idx(&[0, 0, 0x42, 1, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected_with_counts() {
        let (mut bytes, _) = synthetic_pair(3);
        bytes.truncate(bytes.len() - 7);
        let err = parse_idx(&bytes).unwrap_err().to_string();
        assert!(err.contains("48"), "missing expected byte count: {err}");
        assert!(err.contains("41"), "missing actual byte count: {err}");
    }

    #[test]
    fn counts_must_agree() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = synthetic_pair(10);
        let labels = write_idx(&IdxData {
            dtype: IDX_UNSIGNED_BYTE,
            dims: vec![9],
            payload: vec![0; 9],
        });
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        assert!(load_dataset(&ip, &lp, Split::Train).is_err());
    }

    #[test]
    fn all_zero_images_load_as_zero_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let images = write_idx(&IdxData {
            dtype: IDX_UNSIGNED_BYTE,
            dims: vec![2, 3, 3],
            payload: vec![0; 18],
        });
        let labels = write_idx(&IdxData {
            dtype: IDX_UNSIGNED_BYTE,
            dims: vec![2],
            payload: vec![7, 3],
        });
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        let ds = load_dataset(&ip, &lp, Split::Test).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 3, 3]);
        assert!(ds.images.data().iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels, vec![7, 3]);
    }

    #[test]
    fn normalization_is_invertible() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = synthetic_pair(4);
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        let ds = load_dataset(&ip, &lp, Split::Train).unwrap();
        let original = parse_idx(&images).unwrap();
        for (v, &b) in ds.images.data().iter().zip(&original.payload) {
            assert_eq!((255.0 * v).round() as u8, b);
        }
    }

    #[test]
    fn batch_sizes_partition_the_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = synthetic_pair(10);
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        let ds = load_dataset(&ip, &lp, Split::Train).unwrap();
        let sizes: Vec<usize> = ds.batches(4, 1, 0).map(|(t, _)| t.shape()[0]).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_and_epoch_give_identical_order() {
        let a = permutation(100, 9, 3);
        let b = permutation(100, 9, 3);
        assert_eq!(a, b);
        let c = permutation(100, 9, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn permutation_is_a_bijection() {
        for epoch in 0..3 {
            let mut seen = vec![false; 57];
            for i in permutation(57, 11, epoch) {
                assert!(!seen[i as usize]);
                seen[i as usize] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn gzip_files_are_detected_and_decoded() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = synthetic_pair(2);
        let path = dir.path().join("i.gz");
        let mut enc =
            flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&images).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(read_maybe_gzip(&path).unwrap(), images);
    }
}
