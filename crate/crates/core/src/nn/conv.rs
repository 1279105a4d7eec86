//! Same-padded, stride-1 2-D convolution (cross-correlation) via im2col + GEMM.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor4;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Target column count per GEMM; several small images are batched together.
const COLUMN_BUDGET: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    /// (out_ch, in_ch, k, k)
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) || k == 0 {
            return Err(Error::InvalidConfig(format!("kernel size must be odd, got {k}")));
        }
        Ok(ConvLayer {
            in_ch,
            out_ch,
            k,
            weight: vec![T::zero(); out_ch * in_ch * k * k],
            bias: vec![T::zero(); out_ch],
        })
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero bias.
    pub fn he_init(in_ch: usize, out_ch: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let mut layer = Self::zeros(in_ch, out_ch, k)?;
        let normal = Normal::new(0.0, (2.0 / (in_ch * k * k) as f64).sqrt()).expect("positive std");
        for w in &mut layer.weight {
            *w = T::from_f64_lossy(normal.sample(rng));
        }
        Ok(layer)
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_ch,
                x.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let [batch, _, h, w] = x.shape();
        let hw = h * w;
        let ckk = self.patch_len();
        let mut y = Tensor4::zeros([batch, self.out_ch, h, w]);
        let chunk = chunk_size(batch, hw);
        let mut cols = Vec::new();
        let mut out = Vec::new();
        for start in (0..batch).step_by(chunk) {
            let n = chunk.min(batch - start);
            let ncols = n * hw;
            im2col(x, start, n, self.k, &mut cols);
            out.clear();
            out.resize(self.out_ch * ncols, T::zero());
            T::gemm(self.out_ch, ckk, ncols, T::one(), &self.weight, ckk, 1, &cols, ncols, 1, T::zero(), &mut out, ncols, 1);
            let ydata = y.data_mut();
            for s in 0..n {
                for o in 0..self.out_ch {
                    let src = &out[o * ncols + s * hw..o * ncols + (s + 1) * hw];
                    let dst = &mut ydata[((start + s) * self.out_ch + o) * hw..][..hw];
                    let b = self.bias[o];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v + b;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Gradients with respect to the input (when `need_input_grad`), weights and bias.
    pub fn backward(&self, x: &Tensor4<T>, grad_out: &Tensor4<T>, need_input_grad: bool) -> Result<(Option<Tensor4<T>>, ConvGrads<T>)> {
        self.check_input(x)?;
        let [batch, _, h, w] = x.shape();
        if grad_out.shape() != [batch, self.out_ch, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "conv grad_out {:?} does not match output {:?}",
                grad_out.shape(),
                [batch, self.out_ch, h, w]
            )));
        }
        let hw = h * w;
        let ckk = self.patch_len();
        let mut grads = ConvGrads {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.out_ch],
        };
        let mut grad_x = need_input_grad.then(|| Tensor4::zeros(x.shape()));
        let chunk = chunk_size(batch, hw);
        let mut cols = Vec::new();
        let mut g = Vec::new();
        let mut gcols = Vec::new();
        let gdata = grad_out.data();
        for start in (0..batch).step_by(chunk) {
            let n = chunk.min(batch - start);
            let ncols = n * hw;
            // gather grad_out into (out_ch, n * hw)
            g.clear();
            g.resize(self.out_ch * ncols, T::zero());
            for s in 0..n {
                for o in 0..self.out_ch {
                    let src = &gdata[((start + s) * self.out_ch + o) * hw..][..hw];
                    g[o * ncols + s * hw..o * ncols + (s + 1) * hw].copy_from_slice(src);
                }
            }
            for (o, gb) in grads.bias.iter_mut().enumerate() {
                *gb += g[o * ncols..(o + 1) * ncols].iter().copied().sum::<T>();
            }
            im2col(x, start, n, self.k, &mut cols);
            // dW += G . cols^T
            T::gemm(self.out_ch, ncols, ckk, T::one(), &g, ncols, 1, &cols, 1, ncols, T::one(), &mut grads.weight, ckk, 1);
            if let Some(gx) = grad_x.as_mut() {
                // dcols = W^T . G
                gcols.clear();
                gcols.resize(ckk * ncols, T::zero());
                T::gemm(ckk, self.out_ch, ncols, T::one(), &self.weight, 1, ckk, &g, ncols, 1, T::zero(), &mut gcols, ncols, 1);
                col2im(&gcols, gx, start, n, self.k);
            }
        }
        Ok((grad_x, grads))
    }
}

fn chunk_size(batch: usize, hw: usize) -> usize {
    COLUMN_BUDGET.div_ceil(hw).clamp(1, batch.max(1))
}

/// Valid output-column range `[lo, hi)` for kernel offset `kc` with padding `pad`.
#[inline]
fn valid_range(len: usize, kc: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kc);
    let hi = (len + pad).saturating_sub(kc).min(len);
    (lo, hi.max(lo))
}

/// Fills `cols` with the (in_ch * k * k, n * h * w) patch matrix of samples `start..start + n`.
fn im2col<T: Scalar>(x: &Tensor4<T>, start: usize, n: usize, k: usize, cols: &mut Vec<T>) {
    let [_, c_in, h, w] = x.shape();
    let hw = h * w;
    let ncols = n * hw;
    let pad = k / 2;
    cols.clear();
    cols.resize(c_in * k * k * ncols, T::zero());
    let data = x.data();
    for ci in 0..c_in {
        for kr in 0..k {
            let (r_lo, r_hi) = valid_range(h, kr, pad);
            for kc in 0..k {
                let (c_lo, c_hi) = valid_range(w, kc, pad);
                let row = (ci * k + kr) * k + kc;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for s in 0..n {
                    let plane = &data[((start + s) * c_in + ci) * hw..][..hw];
                    for r in r_lo..r_hi {
                        let sr = r + kr - pad;
                        let src = &plane[sr * w + c_lo + kc - pad..sr * w + c_hi + kc - pad];
                        dst_row[s * hw + r * w + c_lo..s * hw + r * w + c_hi].copy_from_slice(src);
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto `grad_x`.
fn col2im<T: Scalar>(gcols: &[T], grad_x: &mut Tensor4<T>, start: usize, n: usize, k: usize) {
    let [_, c_in, h, w] = grad_x.shape();
    let hw = h * w;
    let ncols = n * hw;
    let pad = k / 2;
    let data = grad_x.data_mut();
    for ci in 0..c_in {
        for kr in 0..k {
            let (r_lo, r_hi) = valid_range(h, kr, pad);
            for kc in 0..k {
                let (c_lo, c_hi) = valid_range(w, kc, pad);
                let row = (ci * k + kr) * k + kc;
                let src_row = &gcols[row * ncols..(row + 1) * ncols];
                for s in 0..n {
                    let plane = &mut data[((start + s) * c_in + ci) * hw..][..hw];
                    for r in r_lo..r_hi {
                        let sr = r + kr - pad;
                        let dst = &mut plane[sr * w + c_lo + kc - pad..sr * w + c_hi + kc - pad];
                        let src = &src_row[s * hw + r * w + c_lo..s * hw + r * w + c_hi];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}
