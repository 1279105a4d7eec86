use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense (batch, channels, height, width) tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    /// A (batch, features, 1, 1) tensor.
    pub fn matrix(batch: usize, features: usize, data: Vec<T>) -> Result<Self> {
        Self::new([batch, features, 1, 1], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[Tensor4<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Empty("nothing to concatenate".into()))?;
        let [b, _, h, w] = first.shape;
        if parts.iter().any(|p| p.shape[0] != b || p.shape[2] != h || p.shape[3] != w) {
            return Err(Error::ShapeMismatch("concat parts differ in batch or spatial size".into()));
        }
        let channels: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(b * channels * h * w);
        for s in 0..b {
            for p in parts {
                data.extend_from_slice(p.sample(s));
            }
        }
        Self::new([b, channels, h, w], data)
    }

    /// Inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor4<T>>> {
        if sizes.iter().sum::<usize>() != self.shape[1] {
            return Err(Error::ShapeMismatch("split sizes do not cover the channels".into()));
        }
        let [b, _, h, w] = self.shape;
        let plane = h * w;
        let mut out: Vec<Vec<T>> = sizes.iter().map(|c| Vec::with_capacity(b * c * plane)).collect();
        for s in 0..b {
            let sample = self.sample(s);
            let mut offset = 0;
            for (dst, &c) in out.iter_mut().zip(sizes) {
                dst.extend_from_slice(&sample[offset * plane..(offset + c) * plane]);
                offset += c;
            }
        }
        out.into_iter()
            .zip(sizes)
            .map(|(data, &c)| Self::new([b, c, h, w], data))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor4::new([2, 1, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let b = Tensor4::new([2, 2, 2, 2], (100..116).map(|v| v as f32).collect()).unwrap();
        let c = Tensor4::concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), [2, 3, 2, 2]);
        assert_eq!(c.at(1, 0, 0, 0), 4.0);
        assert_eq!(c.at(1, 1, 0, 0), 108.0);
        let parts = c.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts, vec![a, b]);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor4::<f32>::new([1, 2, 3, 4], vec![0.0; 23]).is_err());
    }
}
