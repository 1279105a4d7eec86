use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor4;
use crate::nn::Mode;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v <= T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// Passes the gradient where the forward input (or output) was positive.
pub fn relu_backward<T: Scalar>(activated: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let mut g = grad_out.clone();
    for (d, &a) in g.data_mut().iter_mut().zip(activated.data()) {
        if a <= T::zero() {
            *d = T::zero();
        }
    }
    g
}

/// Inverted dropout. In train mode each unit is zeroed with probability `p`
/// and survivors are scaled by `1 / (1 - p)`; the returned mask holds the
/// per-unit multiplier. Eval mode is the identity.
pub fn dropout_forward<T: Scalar>(x: &Tensor4<T>, p: f64, mode: Mode, rng: &mut Rng) -> Result<(Tensor4<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.data().len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor4<T>, mask: Option<&[T]>) -> Tensor4<T> {
    let mut g = grad_out.clone();
    if let Some(mask) = mask {
        for (d, &m) in g.data_mut().iter_mut().zip(mask) {
            *d *= m;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor4::matrix(1, 3, vec![-1.0f32, 2.0, 0.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 2.0, 0.0]);
        let g = relu_backward(&x, &Tensor4::matrix(1, 3, vec![5.0, 5.0, 5.0]).unwrap());
        assert_eq!(g.data(), &[0.0, 5.0, 0.0]);
    }

    #[test]
    fn dropout_identities() {
        let x = Tensor4::matrix(2, 50, (0..100).map(|i| i as f32).collect()).unwrap();
        let mut rng = crate::rng::rng(0);
        assert_eq!(dropout_forward(&x, 0.25, Mode::Eval, &mut rng).unwrap().0, x);
        assert_eq!(dropout_forward(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert_eq!(dropout_forward(&x, 0.0, Mode::Eval, &mut rng).unwrap().0, x);
        assert!(dropout_forward(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout_forward(&x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_scales_survivors_and_masks_gradient() {
        let x = Tensor4::matrix(1, 1000, vec![1.0f64; 1000]).unwrap();
        let mut rng = crate::rng::rng(11);
        let (y, mask) = dropout_forward(&x, 0.25, Mode::Train, &mut rng).unwrap();
        let mask = mask.unwrap();
        for &v in y.data() {
            assert!(v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12);
        }
        let g = dropout_backward(&x, Some(&mask));
        assert_eq!(g, y);
    }
}
