use crate::error::{Error, Result};
use crate::nn::tensor::Tensor4;
use crate::scalar::Scalar;

/// 2x2 max pooling with stride 2. Returns the output and, per output cell, the
/// position (0..4, row-major) of the maximum; ties keep the first.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u8>)> {
    let [b, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!("max pooling needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    let mut argmax = vec![0u8; b * c * oh * ow];
    let data = x.data();
    for plane in 0..b * c {
        let src = &data[plane * h * w..][..h * w];
        for r in 0..oh {
            for col in 0..ow {
                let base = 2 * r * w + 2 * col;
                let window = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for (i, &v) in window.iter().enumerate().skip(1) {
                    if v > window[best] {
                        best = i;
                    }
                }
                let o = (plane * oh + r) * ow + col;
                y.data_mut()[o] = window[best];
                argmax[o] = best as u8;
            }
        }
    }
    Ok((y, argmax))
}

/// Routes each upstream gradient to the recorded argmax cell.
pub fn maxpool2_backward<T: Scalar>(grad_out: &Tensor4<T>, argmax: &[u8], input_shape: [usize; 4]) -> Result<Tensor4<T>> {
    let [b, c, h, w] = input_shape;
    let (oh, ow) = (h / 2, w / 2);
    if grad_out.shape() != [b, c, oh, ow] || argmax.len() != b * c * oh * ow {
        return Err(Error::ShapeMismatch("max pool backward shapes disagree".into()));
    }
    let mut dx = Tensor4::zeros(input_shape);
    for plane in 0..b * c {
        for r in 0..oh {
            for col in 0..ow {
                let o = (plane * oh + r) * ow + col;
                let a = argmax[o] as usize;
                let i = plane * h * w + (2 * r + a / 2) * w + 2 * col + a % 2;
                dx.data_mut()[i] = grad_out.data()[o];
            }
        }
    }
    Ok(dx)
}
