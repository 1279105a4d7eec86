use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor4;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Fully connected layer, `y = W x + b` with `W` stored (out, in).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        DenseLayer {
            n_in,
            n_out,
            weight: vec![T::zero(); n_in * n_out],
            bias: vec![T::zero(); n_out],
        }
    }

    pub fn he_init(n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(n_in, n_out);
        let normal = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).expect("positive std");
        for w in &mut layer.weight {
            *w = T::from_f64_lossy(normal.sample(rng));
        }
        layer
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if x.sample_len() != self.n_in {
            return Err(Error::ShapeMismatch(format!(
                "dense layer expects {} inputs, got {}",
                self.n_in,
                x.sample_len()
            )));
        }
        Ok(())
    }

    /// Input is read as (batch, n_in) regardless of its spatial layout.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let b = x.batch();
        let mut y = Vec::with_capacity(b * self.n_out);
        for _ in 0..b {
            y.extend_from_slice(&self.bias);
        }
        T::gemm(b, self.n_in, self.n_out, T::one(), x.data(), self.n_in, 1, &self.weight, 1, self.n_in, T::one(), &mut y, self.n_out, 1);
        Tensor4::matrix(b, self.n_out, y)
    }

    pub fn backward(&self, x: &Tensor4<T>, grad_out: &Tensor4<T>, need_input_grad: bool) -> Result<(Option<Tensor4<T>>, DenseGrads<T>)> {
        self.check(x)?;
        let b = x.batch();
        if grad_out.batch() != b || grad_out.sample_len() != self.n_out {
            return Err(Error::ShapeMismatch("dense grad_out shape disagrees".into()));
        }
        let g = grad_out.data();
        let mut grads = DenseGrads {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.n_out],
        };
        for row in g.chunks_exact(self.n_out) {
            for (gb, &v) in grads.bias.iter_mut().zip(row) {
                *gb += v;
            }
        }
        // dW = G^T . X
        T::gemm(self.n_out, b, self.n_in, T::one(), g, 1, self.n_out, x.data(), self.n_in, 1, T::zero(), &mut grads.weight, self.n_in, 1);
        let dx = if need_input_grad {
            let mut dx = vec![T::zero(); b * self.n_in];
            T::gemm(b, self.n_out, self.n_in, T::one(), g, self.n_out, 1, &self.weight, self.n_in, 1, T::zero(), &mut dx, self.n_in, 1);
            Some(Tensor4::new(x.shape(), dx)?)
        } else {
            None
        };
        Ok((dx, grads))
    }
}
