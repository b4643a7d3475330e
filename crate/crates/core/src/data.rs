use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled images held as one (N, C, H, W) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        let s = images.dims4()?;
        if s.batch != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                s.batch,
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.images.len() / self.labels.len().max(1)
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.sample_len();
        &self.images.data()[i * l..(i + 1) * l]
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        self.gather(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Shape("empty sample selection".into()));
        }
        let l = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * l);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    extent: self.len(),
                });
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_shape();
        Dataset::new(Tensor::from_vec(&[indices.len(), c, h, w], data)?, labels)
    }

    /// Consecutive batches of at most `size` samples.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = (Tensor, &[u8])> + '_ {
        let size = size.max(1);
        let l = self.sample_len();
        let [c, h, w] = self.sample_shape();
        (0..self.len()).step_by(size).map(move |start| {
            let end = (start + size).min(self.len());
            let images = Tensor::from_vec(
                &[end - start, c, h, w],
                self.images.data()[start * l..end * l].to_vec(),
            )
            .expect("consistent batch");
            (images, &self.labels[start..end])
        })
    }
}
