use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by 3 x 32 x 32 channel-planar pixel bytes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const PIXELS: usize = CIFAR_RECORD - 1;
const CLASSES: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel `(x - mean) / std` applied after scaling pixels to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub fn apply(&self, dataset: &mut Dataset) {
        let plane = 32 * 32;
        for sample in dataset.images.data_mut().chunks_exact_mut(PIXELS) {
            for (c, chan) in sample.chunks_exact_mut(plane).enumerate() {
                for v in chan {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}

/// Parse CIFAR-10 binary records; `origin` only labels errors.
pub fn decode_cifar(bytes: &[u8], origin: &Path) -> Result<Dataset> {
    let format = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(format(format!(
            "length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if record[0] >= CLASSES {
            return Err(format(format!("record {i}: label {} out of range", record[0])));
        }
        labels.push(record[0]);
        pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], pixels)?, labels)
}

/// Encode a (N, 3, 32, 32) dataset with pixels in [0, 1]; values are
/// rounded to the nearest byte.
pub fn encode_cifar(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.sample_shape() != [3, 32, 32] {
        return Err(Error::Shape(format!(
            "CIFAR records hold 3x32x32 images, got {:?}",
            dataset.sample_shape()
        )));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for i in 0..dataset.len() {
        let label = dataset.labels[i];
        if label >= CLASSES {
            return Err(Error::Index {
                index: label as usize,
                extent: CLASSES as usize,
            });
        }
        out.push(label);
        out.extend(
            dataset
                .image(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar(&bytes, path)
}

pub fn write_cifar_file(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = encode_cifar(dataset)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_files(dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    if !dir.is_dir() {
        return Err(Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        ));
    }
    let files: Vec<PathBuf> = match split {
        Split::Test => vec![dir.join("test_batch.bin")],
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .take_while(|p| p.is_file())
            .collect(),
    };
    if files.is_empty() {
        return Err(Error::io(
            dir.join("data_batch_1.bin"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no training batches"),
        ));
    }
    Ok(files)
}

/// Load a CIFAR-10 split from `dir` (or its `cifar-10-batches-bin`
/// subdirectory): `data_batch_1.bin`.. for training, `test_batch.bin` for
/// test.
pub fn load_cifar10(dir: &Path, split: Split, norm: Option<&Normalization>) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in split_files(dir, split)? {
        let part = read_cifar_file(&path)?;
        labels.extend_from_slice(&part.labels);
        pixels.extend_from_slice(part.images.data());
    }
    let mut ds = Dataset::new(Tensor::from_vec(&[labels.len(), 3, 32, 32], pixels)?, labels)?;
    if let Some(n) = norm {
        n.apply(&mut ds);
    }
    Ok(ds)
}
