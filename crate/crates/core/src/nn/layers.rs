// SPDX-License-Identifier: Apache-2.0

use super::{shape_err, Result, Scalar, Tensor};

/// Flat input index of the maximum for each pooled output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub argmax: Vec<usize>,
    pub input_shape: (usize, usize, usize, usize),
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major window order.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolRecord)> {
    let (n, c, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err("maxpool2", format!("odd spatial dims {h}x{w}; pad first"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for idx in [
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                y.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(n, c, ho, wo, y)?,
        PoolRecord {
            argmax,
            input_shape: x.shape(),
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(rec: &PoolRecord, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.len() != rec.argmax.len() {
        return shape_err("maxpool2_backward", format!("dy has {} elements, record {}", dy.len(), rec.argmax.len()));
    }
    let (n, c, h, w) = rec.input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    let d = dx.data_mut();
    for (&idx, &g) in rec.argmax.iter().zip(dy.data()) {
        d[idx] = d[idx] + g;
    }
    Ok(dx)
}

/// Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.shape();
    let mut y = Tensor::zeros(n, c, 2 * h, 2 * w);
    let src = x.data();
    let dst = y.data_mut();
    for plane in 0..n * c {
        for i in 0..2 * h {
            let srow = &src[(plane * h + i / 2) * w..][..w];
            let drow = &mut dst[(plane * 2 * h + i) * 2 * w..][..2 * w];
            for (j, d) in drow.iter_mut().enumerate() {
                *d = srow[j / 2];
            }
        }
    }
    y
}

/// Sums each 2x2 block of `dy`.
pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = dy.shape();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return shape_err("upsample2_backward", format!("odd gradient dims {h2}x{w2}"));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(n, c, h, w);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for i in 0..h2 {
            let srow = &src[(plane * h2 + i) * w2..][..w2];
            let drow = &mut dst[(plane * h + i / 2) * w..][..w];
            for (j, &g) in srow.iter().enumerate() {
                drow[j / 2] = drow[j / 2] + g;
            }
        }
    }
    Ok(dx)
}

/// Concatenates along channels, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.shape();
    let (nb, cb, hb, wb) = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return shape_err("concat_channels", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..na {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor::from_vec(na, ca + cb, ha, wa, data)
}

/// Splits `dy` back into the first `ca` channels and the rest.
pub fn split_channels<T: Scalar>(dy: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dy.shape();
    if ca > c {
        return shape_err("split_channels", format!("cannot take {ca} of {c} channels"));
    }
    let cut = ca * h * w;
    let mut a = Vec::with_capacity(n * cut);
    let mut b = Vec::with_capacity(dy.len() - n * cut);
    for s in 0..n {
        let sample = dy.sample(s);
        a.extend_from_slice(&sample[..cut]);
        b.extend_from_slice(&sample[cut..]);
    }
    Ok((Tensor::from_vec(n, ca, h, w, a)?, Tensor::from_vec(n, c - ca, h, w, b)?))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient mask `x > 0`; the subgradient at 0 is 0. Accepts the pre- or post-activation.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() })
}
