// SPDX-License-Identifier: Apache-2.0

//! Stride-1, zero-padded `same` convolution and its transpose.

use super::{shape_err, Param, Result, Scalar, Tensor};
use crate::rng::Pcg32;

/// Unfolds a `(c, h, w)` plane stack into `(c*k*k) x (h*w)` patch columns.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let row = &mut cols[((ci * k + u) * k + v) * hw..][..hw];
                let off = v as isize - p;
                let j0 = (-off).max(0) as usize;
                let j1 = (w as isize - off).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let dst = &mut row[i * w..(i + 1) * w];
                    let ii = i as isize + u as isize - p;
                    if ii < 0 || ii >= h as isize || j0 >= j1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    dst[..j0].fill(T::zero());
                    dst[j1..].fill(T::zero());
                    let s0 = (j0 as isize + off) as usize;
                    dst[j0..j1].copy_from_slice(&src[s0..s0 + (j1 - j0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back onto `(c, h, w)`.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let row = &cols[((ci * k + u) * k + v) * hw..][..hw];
                let off = v as isize - p;
                let j0 = (-off).max(0) as usize;
                let j1 = (w as isize - off).min(w as isize).max(0) as usize;
                if j0 >= j1 {
                    continue;
                }
                for i in 0..h {
                    let ii = i as isize + u as isize - p;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let s0 = (j0 as isize + off) as usize;
                    let dst = &mut plane[ii as usize * w + s0..][..j1 - j0];
                    for (d, &s) in dst.iter_mut().zip(&row[i * w + j0..i * w + j1]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Glorot-uniform kernel in `+-sqrt(6 / (fan_in + fan_out))`.
fn glorot<T: Scalar>(len: usize, fan_in: usize, fan_out: usize, rng: &mut Pcg32) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| T::of(rng.uniform(-limit, limit))).collect()
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], hw: usize) {
    for (plane, &b) in y.chunks_mut(hw).zip(bias) {
        plane.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn accumulate_bias_grad<T: Scalar>(grad: &mut [T], dy: &[T], hw: usize) {
    for (g, plane) in grad.iter_mut().zip(dy.chunks(hw)) {
        *g = *g + plane.iter().copied().sum();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    /// `(c_out, c_in, k, k)`.
    pub weight: Param<T>,
    /// `(c_out)`.
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut Pcg32) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel, got {k}");
        let len = c_out * c_in * k * k;
        Self {
            c_in,
            c_out,
            k,
            weight: Param::new(vec![c_out, c_in, k, k], glorot(len, c_in * k * k, c_out * k * k, rng), true),
            bias: Param::zeros(vec![c_out], false),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel, got {k}");
        Self {
            c_in,
            c_out,
            k,
            weight: Param::zeros(vec![c_out, c_in, k, k], true),
            bias: Param::zeros(vec![c_out], false),
        }
    }

    fn check(&self, x: &Tensor<T>, op: &'static str) -> Result<()> {
        if x.c() != self.c_in {
            return shape_err(op, format!("input has {} channels, layer expects {}", x.c(), self.c_in));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x, "conv2d")?;
        let (n, _, h, w) = x.shape();
        let hw = h * w;
        let ckk = self.c_in * self.k * self.k;
        let mut y = Tensor::zeros(n, self.c_out, h, w);
        let mut cols = if self.k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
        for s in 0..n {
            let xs = x.sample(s);
            let b: &[T] = if self.k == 1 {
                xs
            } else {
                im2col(xs, self.c_in, h, w, self.k, &mut cols);
                &cols
            };
            let ys = y.sample_mut(s);
            T::gemm(
                self.c_out, ckk, hw, T::one(),
                &self.weight.value, ckk as isize, 1,
                b, hw as isize, 1,
                T::zero(), ys, hw as isize, 1,
            );
            add_bias(ys, &self.bias.value, hw);
        }
        Ok(y)
    }

    /// Accumulates parameter gradients; returns `dx` when `want_dx`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool) -> Result<Option<Tensor<T>>> {
        self.check(x, "conv2d_backward")?;
        let (n, _, h, w) = x.shape();
        if dy.shape() != (n, self.c_out, h, w) {
            return shape_err("conv2d_backward", format!("dy {:?} for input {:?}", dy.shape(), x.shape()));
        }
        let hw = h * w;
        let ckk = self.c_in * self.k * self.k;
        let mut cols = if self.k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
        let mut dcols = vec![T::zero(); if want_dx { ckk * hw } else { 0 }];
        let mut dx = want_dx.then(|| Tensor::zeros(n, self.c_in, h, w));
        for s in 0..n {
            let xs = x.sample(s);
            let dys = dy.sample(s);
            let b: &[T] = if self.k == 1 {
                xs
            } else {
                im2col(xs, self.c_in, h, w, self.k, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            T::gemm(
                self.c_out, hw, ckk, T::one(),
                dys, hw as isize, 1,
                b, 1, hw as isize,
                T::one(), &mut self.weight.grad, ckk as isize, 1,
            );
            accumulate_bias_grad(&mut self.bias.grad, dys, hw);
            if let Some(dx) = dx.as_mut() {
                // dcols = W^T * dY
                T::gemm(
                    ckk, self.c_out, hw, T::one(),
                    &self.weight.value, 1, ckk as isize,
                    dys, hw as isize, 1,
                    T::zero(), &mut dcols, hw as isize, 1,
                );
                let dxs = dx.sample_mut(s);
                if self.k == 1 {
                    dxs.copy_from_slice(&dcols);
                } else {
                    col2im(&dcols, self.c_in, h, w, self.k, dxs);
                }
            }
        }
        Ok(dx)
    }
}

/// Transposed convolution: the exact adjoint of [`Conv2d`] for a shared kernel.
///
/// A kernel of shape `(c_in, c_out, k, k)` used here equals the kernel of a
/// `Conv2d` mapping `c_out -> c_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    /// `(c_in, c_out, k, k)`.
    pub weight: Param<T>,
    /// `(c_out)`.
    pub bias: Param<T>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut Pcg32) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel, got {k}");
        let len = c_in * c_out * k * k;
        Self {
            c_in,
            c_out,
            k,
            weight: Param::new(vec![c_in, c_out, k, k], glorot(len, c_in * k * k, c_out * k * k, rng), true),
            bias: Param::zeros(vec![c_out], false),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel, got {k}");
        Self {
            c_in,
            c_out,
            k,
            weight: Param::zeros(vec![c_in, c_out, k, k], true),
            bias: Param::zeros(vec![c_out], false),
        }
    }

    fn check(&self, x: &Tensor<T>, op: &'static str) -> Result<()> {
        if x.c() != self.c_in {
            return shape_err(op, format!("input has {} channels, layer expects {}", x.c(), self.c_in));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x, "conv_transpose2d")?;
        let (n, _, h, w) = x.shape();
        let hw = h * w;
        let okk = self.c_out * self.k * self.k;
        let mut y = Tensor::zeros(n, self.c_out, h, w);
        let mut cols = vec![T::zero(); okk * hw];
        for s in 0..n {
            // cols = W^T * X
            T::gemm(
                okk, self.c_in, hw, T::one(),
                &self.weight.value, 1, okk as isize,
                x.sample(s), hw as isize, 1,
                T::zero(), &mut cols, hw as isize, 1,
            );
            let ys = y.sample_mut(s);
            if self.k == 1 {
                ys.copy_from_slice(&cols);
            } else {
                col2im(&cols, self.c_out, h, w, self.k, ys);
            }
            add_bias(ys, &self.bias.value, hw);
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool) -> Result<Option<Tensor<T>>> {
        self.check(x, "conv_transpose2d_backward")?;
        let (n, _, h, w) = x.shape();
        if dy.shape() != (n, self.c_out, h, w) {
            return shape_err(
                "conv_transpose2d_backward",
                format!("dy {:?} for input {:?}", dy.shape(), x.shape()),
            );
        }
        let hw = h * w;
        let okk = self.c_out * self.k * self.k;
        let mut dcols = if self.k == 1 { Vec::new() } else { vec![T::zero(); okk * hw] };
        let mut dx = want_dx.then(|| Tensor::zeros(n, self.c_in, h, w));
        for s in 0..n {
            let dys = dy.sample(s);
            let b: &[T] = if self.k == 1 {
                dys
            } else {
                im2col(dys, self.c_out, h, w, self.k, &mut dcols);
                &dcols
            };
            // dW += X * dcols^T
            T::gemm(
                self.c_in, hw, okk, T::one(),
                x.sample(s), hw as isize, 1,
                b, 1, hw as isize,
                T::one(), &mut self.weight.grad, okk as isize, 1,
            );
            accumulate_bias_grad(&mut self.bias.grad, dys, hw);
            if let Some(dx) = dx.as_mut() {
                // dX = W * dcols
                T::gemm(
                    self.c_in, okk, hw, T::one(),
                    &self.weight.value, okk as isize, 1,
                    b, hw as isize, 1,
                    T::zero(), dx.sample_mut(s), hw as isize, 1,
                );
            }
        }
        Ok(dx)
    }
}
