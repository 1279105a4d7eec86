//! Per-channel batch normalization over (batch, height, width).

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor4;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// What the training-mode backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    x_hat: Tensor4<T>,
    inv_std: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm has {} channels, input has {}",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Standardizes with batch statistics (population variance) and folds them
    /// into the running statistics.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
        self.check(x)?;
        let [b, c, h, w] = x.shape();
        if b < 2 {
            return Err(Error::ShapeMismatch("batchnorm needs a batch of at least 2 in train mode".into()));
        }
        let plane = h * w;
        let count = T::from_usize(b * plane).expect("count fits");
        let eps = T::from_f64_lossy(BN_EPS);
        let momentum = T::from_f64_lossy(BN_MOMENTUM);
        let data = x.data();
        let mut x_hat = Tensor4::zeros(x.shape());
        let mut y = Tensor4::zeros(x.shape());
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let planes = || (0..b).map(move |s| &data[(s * c + ch) * plane..][..plane]);
            let mean = planes().flatten().copied().sum::<T>() / count;
            let var = planes().flatten().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            for s in 0..b {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (data[i] - mean) * istd;
                    x_hat.data_mut()[i] = xh;
                    y.data_mut()[i] = self.gamma[ch] * xh + self.beta[ch];
                }
            }
            self.running_mean[ch] = momentum * self.running_mean[ch] + (T::one() - momentum) * mean;
            self.running_var[ch] = momentum * self.running_var[ch] + (T::one() - momentum) * var;
        }
        Ok((y, BatchNormCache { x_hat, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let [b, c, h, w] = x.shape();
        let plane = h * w;
        let eps = T::from_f64_lossy(BN_EPS);
        let mut y = x.clone();
        for ch in 0..c {
            let scale = self.gamma[ch] / (self.running_var[ch] + eps).sqrt();
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            for s in 0..b {
                for v in &mut y.data_mut()[(s * c + ch) * plane..][..plane] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    pub fn backward_train(&self, cache: &BatchNormCache<T>, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, BatchNormGrads<T>)> {
        if grad_out.shape() != cache.x_hat.shape() {
            return Err(Error::ShapeMismatch("batchnorm grad_out shape differs from input".into()));
        }
        let [b, c, h, w] = grad_out.shape();
        let plane = h * w;
        let n = T::from_usize(b * plane).expect("count fits");
        let g = grad_out.data();
        let xh = cache.x_hat.data();
        let mut grads = BatchNormGrads {
            gamma: vec![T::zero(); c],
            beta: vec![T::zero(); c],
        };
        let mut dx = Tensor4::zeros(grad_out.shape());
        for ch in 0..c {
            let idx = || (0..b).flat_map(move |s| (s * c + ch) * plane..(s * c + ch + 1) * plane);
            let sum_g: T = idx().map(|i| g[i]).sum();
            let sum_gx: T = idx().map(|i| g[i] * xh[i]).sum();
            grads.beta[ch] = sum_g;
            grads.gamma[ch] = sum_gx;
            // dx = gamma * inv_std / N * (N * g - sum(g) - x_hat * sum(g * x_hat))
            let k = self.gamma[ch] * cache.inv_std[ch] / n;
            for i in idx() {
                dx.data_mut()[i] = k * (n * g[i] - sum_g - xh[i] * sum_gx);
            }
        }
        Ok((dx, grads))
    }

    /// Backward through the eval-mode affine map (running statistics are constants).
    pub fn backward_eval(&self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, BatchNormGrads<T>)> {
        self.check(x)?;
        if grad_out.shape() != x.shape() {
            return Err(Error::ShapeMismatch("batchnorm grad_out shape differs from input".into()));
        }
        let [b, c, h, w] = x.shape();
        let plane = h * w;
        let eps = T::from_f64_lossy(BN_EPS);
        let mut grads = BatchNormGrads {
            gamma: vec![T::zero(); c],
            beta: vec![T::zero(); c],
        };
        let mut dx = grad_out.clone();
        for ch in 0..c {
            let istd = T::one() / (self.running_var[ch] + eps).sqrt();
            for s in 0..b {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    let g = grad_out.data()[i];
                    grads.beta[ch] += g;
                    grads.gamma[ch] += g * (x.data()[i] - self.running_mean[ch]) * istd;
                    dx.data_mut()[i] = g * self.gamma[ch] * istd;
                }
            }
        }
        Ok((dx, grads))
    }
}
