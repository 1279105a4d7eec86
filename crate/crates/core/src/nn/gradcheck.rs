//! Analytic gradients against central finite differences, in f64.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::activation::{relu_backward, relu_forward};
use crate::nn::batchnorm::BatchNormLayer;
use crate::nn::conv::ConvLayer;
use crate::nn::dense::DenseLayer;
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::model::{Architecture, DropoutMask, MscnnModel};
use crate::nn::pool::{maxpool2_backward, maxpool2_forward};
use crate::nn::tensor::Tensor4;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Conv,
    Batchnorm,
    Dense,
    Pool,
    Relu,
    Softmax,
    Model,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Conv,
        Component::Batchnorm,
        Component::Dense,
        Component::Pool,
        Component::Relu,
        Component::Softmax,
        Component::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Conv => "conv",
            Component::Batchnorm => "batchnorm",
            Component::Dense => "dense",
            Component::Pool => "pool",
            Component::Relu => "relu",
            Component::Softmax => "softmax",
            Component::Model => "model",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown gradcheck component {s:?}")))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and the central difference of
/// `f` around `x`, over every coordinate.
pub fn max_error_over(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut v = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..v.len() {
        let orig = v[i];
        v[i] = orig + FD_STEP;
        let up = f(&v);
        v[i] = orig - FD_STEP;
        let down = f(&v);
        v[i] = orig;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn uniform(n: usize, r: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn tensor(shape: [usize; 4], r: &mut Rng) -> Tensor4<f64> {
    Tensor4::new(shape, uniform(shape.iter().product(), r)).expect("shape matches")
}

/// Weighted sum used as a scalar loss for layer checks.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_conv(r: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in [3, 5] {
        let layer = ConvLayer::<f64>::he_init(3, 4, k, r)?;
        let mut layer = layer;
        layer.bias = uniform(4, r);
        let x = tensor([2, 3, 8, 8], r);
        let w = tensor([2, 4, 8, 8], r);
        let (gx, g) = layer.backward(&x, &w, true)?;
        let gx = gx.expect("input gradient requested");
        let shape = x.shape();
        worst = worst.max(max_error_over(x.data(), gx.data(), |v| {
            dot(layer.forward(&Tensor4::new(shape, v.to_vec()).unwrap()).unwrap().data(), w.data())
        }));
        worst = worst.max(max_error_over(&layer.weight, &g.weight, |v| {
            let mut l = layer.clone();
            l.weight = v.to_vec();
            dot(l.forward(&x).unwrap().data(), w.data())
        }));
        worst = worst.max(max_error_over(&layer.bias, &g.bias, |v| {
            let mut l = layer.clone();
            l.bias = v.to_vec();
            dot(l.forward(&x).unwrap().data(), w.data())
        }));
    }
    Ok(worst)
}

fn check_batchnorm(r: &mut Rng) -> Result<f64> {
    let mut layer = BatchNormLayer::<f64>::new(3);
    layer.gamma = uniform(3, r);
    layer.beta = uniform(3, r);
    let x = tensor([4, 3, 4, 4], r);
    let w = tensor([4, 3, 4, 4], r);
    let shape = x.shape();
    let loss = |l: &BatchNormLayer<f64>, x: &Tensor4<f64>| dot(l.clone().forward_train(x).unwrap().0.data(), w.data());
    let (_, cache) = layer.clone().forward_train(&x)?;
    let (gx, g) = layer.backward_train(&cache, &w)?;
    let mut worst = max_error_over(x.data(), gx.data(), |v| loss(&layer, &Tensor4::new(shape, v.to_vec()).unwrap()));
    worst = worst.max(max_error_over(&layer.gamma, &g.gamma, |v| {
        let mut l = layer.clone();
        l.gamma = v.to_vec();
        loss(&l, &x)
    }));
    worst = worst.max(max_error_over(&layer.beta, &g.beta, |v| {
        let mut l = layer.clone();
        l.beta = v.to_vec();
        loss(&l, &x)
    }));
    // eval mode with non-trivial running statistics
    layer.running_mean = uniform(3, r);
    layer.running_var = uniform(3, r).iter().map(|v| v.abs() + 0.5).collect();
    let (gx, g) = layer.backward_eval(&x, &w)?;
    let eval_loss = |l: &BatchNormLayer<f64>, x: &Tensor4<f64>| dot(l.forward_eval(x).unwrap().data(), w.data());
    worst = worst.max(max_error_over(x.data(), gx.data(), |v| eval_loss(&layer, &Tensor4::new(shape, v.to_vec()).unwrap())));
    worst = worst.max(max_error_over(&layer.gamma, &g.gamma, |v| {
        let mut l = layer.clone();
        l.gamma = v.to_vec();
        eval_loss(&l, &x)
    }));
    Ok(worst)
}

fn check_dense(r: &mut Rng) -> Result<f64> {
    let mut layer = DenseLayer::<f64>::he_init(7, 5, r);
    layer.bias = uniform(5, r);
    let x = tensor([3, 7, 1, 1], r);
    let w = tensor([3, 5, 1, 1], r);
    let (gx, g) = layer.backward(&x, &w, true)?;
    let gx = gx.expect("input gradient requested");
    let shape = x.shape();
    let mut worst = max_error_over(x.data(), gx.data(), |v| {
        dot(layer.forward(&Tensor4::new(shape, v.to_vec()).unwrap()).unwrap().data(), w.data())
    });
    worst = worst.max(max_error_over(&layer.weight, &g.weight, |v| {
        let mut l = layer.clone();
        l.weight = v.to_vec();
        dot(l.forward(&x).unwrap().data(), w.data())
    }));
    worst = worst.max(max_error_over(&layer.bias, &g.bias, |v| {
        let mut l = layer.clone();
        l.bias = v.to_vec();
        dot(l.forward(&x).unwrap().data(), w.data())
    }));
    Ok(worst)
}

fn check_pool(r: &mut Rng) -> Result<f64> {
    let x = tensor([2, 3, 6, 6], r);
    let w = tensor([2, 3, 3, 3], r);
    let (_, arg) = maxpool2_forward(&x)?;
    let gx = maxpool2_backward(&w, &arg, x.shape())?;
    let shape = x.shape();
    Ok(max_error_over(x.data(), gx.data(), |v| {
        dot(maxpool2_forward(&Tensor4::new(shape, v.to_vec()).unwrap()).unwrap().0.data(), w.data())
    }))
}

fn check_relu(r: &mut Rng) -> Result<f64> {
    // keep inputs away from the kink so the finite difference is well defined
    let mut x = tensor([2, 3, 4, 4], r);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v += 0.01;
        }
    }
    let w = tensor([2, 3, 4, 4], r);
    let gx = relu_backward(&relu_forward(&x), &w);
    let shape = x.shape();
    Ok(max_error_over(x.data(), gx.data(), |v| {
        dot(relu_forward(&Tensor4::new(shape, v.to_vec()).unwrap()).data(), w.data())
    }))
}

fn check_softmax(r: &mut Rng) -> Result<f64> {
    let logits: Vec<f64> = uniform(4 * 17, r).iter().map(|v| 3.0 * v).collect();
    let labels = [0usize, 5, 16, 5];
    let (_, g) = softmax_cross_entropy(&logits, &labels, 17)?;
    Ok(max_error_over(&logits, &g, |v| softmax_cross_entropy(v, &labels, 17).unwrap().0))
}

/// The small architecture used for the composed check.
pub fn tiny_architecture() -> Architecture {
    Architecture {
        in_channels: 3,
        patch_size: 8,
        branch_kernels: vec![3, 5, 7],
        branch_channels: 4,
        block_channels: vec![6, 8],
        block_kernel: 3,
        hidden: 10,
        dropout: 0.25,
        n_classes: 17,
    }
}

/// Loss of a training-mode pass with a fixed dropout mask; the model is
/// cloned so running statistics are left untouched.
fn model_loss(m: &MscnnModel<f64>, x: &Tensor4<f64>, labels: &[usize], mask: &[f64]) -> f64 {
    let (logits, _) = m.clone().forward_train(x, DropoutMask::Fixed(mask)).expect("shapes fixed");
    softmax_cross_entropy(&logits, labels, m.arch.n_classes).expect("labels valid").0
}

fn model_gradients(m: &MscnnModel<f64>, x: &Tensor4<f64>, labels: &[usize], r: &mut Rng) -> Result<(Vec<f64>, Vec<Option<Vec<f64>>>)> {
    let (logits, cache) = m.clone().forward_train(x, DropoutMask::Sample(r))?;
    let mask = cache
        .dropout_mask()
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![1.0; x.batch() * m.arch.hidden]);
    let (_, g) = softmax_cross_entropy(&logits, labels, m.arch.n_classes)?;
    Ok((mask, m.backward(&cache, &g)?))
}

fn check_model(r: &mut Rng) -> Result<f64> {
    let mut m = MscnnModel::<f64>::new(tiny_architecture(), r.random())?;
    for blk in &mut m.blocks {
        blk.bn.gamma = uniform(blk.bn.channels(), r).iter().map(|v| 1.0 + 0.5 * v).collect();
        blk.bn.beta = uniform(blk.bn.channels(), r).iter().map(|v| 0.5 * v).collect();
    }
    let x = tensor([2, 3, 8, 8], r);
    let labels = [3usize, 11];
    let (mask, grads) = model_gradients(&m, &x, &labels, r)?;
    let mut worst = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        let g = g.as_ref().expect("nothing frozen");
        let p = m.params()[t].to_vec();
        worst = worst.max(max_error_over(&p, g, |v| {
            let mut mm = m.clone();
            mm.params_mut()[t].copy_from_slice(v);
            model_loss(&mm, &x, &labels, &mask)
        }));
    }
    Ok(worst)
}

pub fn gradient_check(component: Component, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, component as u64);
    match component {
        Component::Conv => check_conv(&mut r),
        Component::Batchnorm => check_batchnorm(&mut r),
        Component::Dense => check_dense(&mut r),
        Component::Pool => check_pool(&mut r),
        Component::Relu => check_relu(&mut r),
        Component::Softmax => check_softmax(&mut r),
        Component::Model => check_model(&mut r),
    }
}

/// Finite-difference check of `n_coords` randomly chosen trainable
/// coordinates of `model` (converted to f64) on the given batch.
pub fn spot_check_model<T: Scalar>(model: &MscnnModel<T>, x: &Tensor4<f64>, labels: &[usize], n_coords: usize, seed: u64) -> Result<f64> {
    let m = model.cast::<f64>();
    let mut r = rng::stream(seed, 0x6763);
    let (mask, grads) = model_gradients(&m, x, labels, &mut r)?;
    let trainable: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].is_some()).collect();
    if trainable.is_empty() {
        return Ok(0.0);
    }
    let mut worst = 0.0f64;
    for _ in 0..n_coords {
        let t = trainable[r.random_range(0..trainable.len())];
        let g = grads[t].as_ref().expect("trainable");
        let j = r.random_range(0..g.len());
        let mut up = m.clone();
        up.params_mut()[t][j] += FD_STEP;
        let mut down = m.clone();
        down.params_mut()[t][j] -= FD_STEP;
        let numeric = (model_loss(&up, x, labels, &mask) - model_loss(&down, x, labels, &mask)) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(g[j], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_components() {
        for c in Component::ALL {
            assert_eq!(c.name().parse::<Component>().unwrap(), c);
        }
        assert!("all".parse::<Component>().is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5).abs() < 1e-15);
    }
}
