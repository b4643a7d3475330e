//! Dense row-major `f32` tensors and the per-channel reductions built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense N-dimensional array of `f32` values stored in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Extents of an NCHW feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape4 {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.batch, self.channels, self.height, self.width]
    }
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor needs at least one extent".into()));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::Shape(format!(
            "extent {pos} of {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Tensor of the given shape with every element equal to `fill`.
    pub fn new(shape: &[usize], fill: f32) -> Result<Self> {
        let len = check_extents(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len = check_extents(shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret the tensor as NCHW.
    pub fn dims4(&self) -> Result<Shape4> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok(Shape4::new(n, c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a 4-d NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_extents(shape)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copy of channel `k` of an NCHW tensor, shaped (N, 1, H, W).
    pub fn channel_slice(&self, k: usize) -> Result<Tensor> {
        let s = self.dims4()?;
        if k >= s.channels {
            return Err(Error::Index {
                index: k,
                extent: s.channels,
            });
        }
        let plane = s.plane();
        let mut out = Vec::with_capacity(s.batch * plane);
        for n in 0..s.batch {
            let start = (n * s.channels + k) * plane;
            out.extend_from_slice(&self.data[start..start + plane]);
        }
        Tensor::from_vec(&[s.batch, 1, s.height, s.width], out)
    }

    /// Concatenate (N, C_i, H, W) tensors along the channel axis.
    pub fn stack_channels(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to stack".into()))?
            .dims4()?;
        let mut channels = 0;
        for p in parts {
            let s = p.dims4()?;
            if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape, parts[0].shape
                )));
            }
            channels += s.channels;
        }
        let plane = first.plane();
        let mut out = Vec::with_capacity(first.batch * channels * plane);
        for n in 0..first.batch {
            for p in parts {
                let c = p.shape[1];
                let start = n * c * plane;
                out.extend_from_slice(&p.data[start..start + c * plane]);
            }
        }
        Tensor::from_vec(&[first.batch, channels, first.height, first.width], out)
    }

    /// Per-channel population mean and variance over the N, H and W axes.
    pub fn reduce_mean_var(&self) -> Result<Vec<MeanVar>> {
        Ok(self
            .channel_moments()?
            .into_iter()
            .map(|m| MeanVar {
                mean: m.mean,
                var: m.variance(),
            })
            .collect())
    }

    /// Per-channel streaming moments over the N, H and W axes.
    pub fn channel_moments(&self) -> Result<Vec<Moments>> {
        let s = self.dims4()?;
        let plane = s.plane();
        let mut out = vec![Moments::default(); s.channels];
        for (k, m) in out.iter_mut().enumerate() {
            // Two passes per channel: exact mean first, then squared deviations.
            let mut sum = 0.0f64;
            for n in 0..s.batch {
                let start = (n * s.channels + k) * plane;
                sum += self.data[start..start + plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let count = (s.batch * plane) as u64;
            let mean = sum / count as f64;
            let mut m2 = 0.0f64;
            for n in 0..s.batch {
                let start = (n * s.channels + k) * plane;
                m2 += self.data[start..start + plane]
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            *m = Moments { count, mean, m2 };
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Mean and population variance of one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanVar {
    pub mean: f64,
    pub var: f64,
}

/// Streaming (count, mean, M2) accumulator; `merge` is the parallel combine
/// of Chan et al., associative up to rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n_a = self.count as f64;
        let n_b = other.count as f64;
        let n = n_a + n_b;
        let delta = other.mean - self.mean;
        self.mean += delta * n_b / n;
        self.m2 += other.m2 + delta * delta * n_a * n_b / n;
        self.count += other.count;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn new_fills() {
        let t = Tensor::new(&[2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::new(&[1], 3.5).unwrap();
        assert_eq!(t.data(), &[3.5]);
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(matches!(Tensor::new(&[2, 0], 1.0), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(&[], 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn slice_single_channel_is_identity() {
        let t = random_tensor(&[2, 1, 3, 3], 1);
        assert_eq!(t.channel_slice(0).unwrap(), t);
    }

    #[test]
    fn slice_out_of_range() {
        let t = random_tensor(&[1, 3, 2, 2], 2);
        assert!(matches!(
            t.channel_slice(3),
            Err(Error::Index { index: 3, extent: 3 })
        ));
    }

    #[test]
    fn slice_matches_elementwise_copy() {
        let t = random_tensor(&[2, 3, 4, 4], 3);
        let s = t.channel_slice(1).unwrap();
        assert_eq!(s.shape(), &[2, 1, 4, 4]);
        for n in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let src = t.data()[((n * 3 + 1) * 4 + y) * 4 + x];
                    let dst = s.data()[(n * 4 + y) * 4 + x];
                    assert_eq!(src, dst);
                }
            }
        }
    }

    #[test]
    fn mean_var_constant() {
        let t = Tensor::new(&[3, 2, 4, 4], 2.0).unwrap();
        for mv in t.reduce_mean_var().unwrap() {
            assert_eq!(mv.mean, 2.0);
            assert_eq!(mv.var, 0.0);
        }
    }

    #[test]
    fn mean_var_two_values() {
        let t = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mv = t.reduce_mean_var().unwrap()[0];
        assert_eq!(mv.mean, 2.0);
        assert_eq!(mv.var, 1.0);
    }

    #[test]
    fn mean_var_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.5f32, 2.0).unwrap();
        let data: Vec<f32> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        let t = Tensor::from_vec(&[10, 1, 100, 100], data).unwrap();
        let mv = t.reduce_mean_var().unwrap()[0];
        assert!((mv.mean - 0.5).abs() < 0.05, "{mv:?}");
        assert!((mv.var - 4.0).abs() < 0.2, "{mv:?}");
    }

    #[test]
    fn moments_merge_matches_single_pass() {
        let t = random_tensor(&[8, 2, 3, 3], 4);
        let whole = t.channel_moments().unwrap();
        let (a, b) = t.data().split_at(3 * 18);
        let a = Tensor::from_vec(&[3, 2, 3, 3], a.to_vec()).unwrap();
        let b = Tensor::from_vec(&[5, 2, 3, 3], b.to_vec()).unwrap();
        let mut merged = a.channel_moments().unwrap();
        for (m, o) in merged.iter_mut().zip(b.channel_moments().unwrap()) {
            m.merge(&o);
        }
        for (m, w) in merged.iter().zip(&whole) {
            assert_eq!(m.count, w.count);
            assert!((m.mean - w.mean).abs() < 1e-12);
            assert!((m.variance() - w.variance()).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn constant_shift_moves_means_only(
                seed in any::<u64>(),
                c in -10.0f32..10.0,
                n in 1usize..4, ch in 1usize..4, h in 1usize..5, w in 1usize..5,
            ) {
                let t = random_tensor(&[n, ch, h, w], seed);
                let shifted = Tensor::from_vec(
                    t.shape(), t.data().iter().map(|v| v + c).collect()).unwrap();
                let a = t.reduce_mean_var().unwrap();
                let b = shifted.reduce_mean_var().unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((y.mean - x.mean - c as f64).abs() < 1e-5);
                    prop_assert!((y.var - x.var).abs() < 1e-5);
                }
            }

            #[test]
            fn slices_restack_to_original(
                seed in any::<u64>(),
                n in 1usize..4, ch in 1usize..5, h in 1usize..5, w in 1usize..5,
            ) {
                let t = random_tensor(&[n, ch, h, w], seed);
                let parts: Vec<_> = (0..ch).map(|k| t.channel_slice(k).unwrap()).collect();
                prop_assert_eq!(Tensor::stack_channels(&parts).unwrap(), t);
            }
        }
    }
}
