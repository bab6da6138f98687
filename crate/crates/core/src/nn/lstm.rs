// SPDX-License-Identifier: Apache-2.0

//! Convolutional LSTM cell.
//!
//! All four gates come from one convolution over `[x; h]` whose output
//! channels are laid out `[i, f, o, g]`, each block `c_hid` wide:
//!
//! ```text
//! i, f, o = sigmoid(conv([x; h]))    g = tanh(conv([x; h]))
//! c' = f * c + i * g                 h' = o * tanh(c')
//! ```

use super::{concat_channels, shape_err, split_channels, Conv2d, Param, Result, Scalar, Tensor};
use crate::rng::Pcg32;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(n: usize, c_hid: usize, h: usize, w: usize) -> Self {
        Self {
            h: Tensor::zeros(n, c_hid, h, w),
            c: Tensor::zeros(n, c_hid, h, w),
        }
    }
}

/// Activations of one time step needed by backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmStepCache<T> {
    xh: Tensor<T>,
    gates: Tensor<T>,
    c_prev: Tensor<T>,
    tanh_c: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmCell<T> {
    pub c_in: usize,
    pub c_hid: usize,
    pub gates: Conv2d<T>,
}

#[inline]
fn sigmoid<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> ConvLstmCell<T> {
    pub fn new(c_in: usize, c_hid: usize, k: usize, rng: &mut Pcg32) -> Self {
        Self {
            c_in,
            c_hid,
            gates: Conv2d::new(c_in + c_hid, 4 * c_hid, k, rng),
        }
    }

    pub fn zeros(c_in: usize, c_hid: usize, k: usize) -> Self {
        Self {
            c_in,
            c_hid,
            gates: Conv2d::zeros(c_in + c_hid, 4 * c_hid, k),
        }
    }

    pub fn kernel(&self) -> usize {
        self.gates.k
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gates.weight, &mut self.gates.bias]
    }

    pub fn step(&self, x: &Tensor<T>, state: &LstmState<T>) -> Result<(LstmState<T>, LstmStepCache<T>)> {
        let (n, _, h, w) = x.shape();
        if state.h.shape() != (n, self.c_hid, h, w) || state.c.shape() != state.h.shape() {
            return shape_err(
                "convlstm_step",
                format!("input {:?} with state {:?}", x.shape(), state.h.shape()),
            );
        }
        let xh = concat_channels(x, &state.h)?;
        let mut gates = self.gates.forward(&xh)?;
        let plane = h * w;
        let block = self.c_hid * plane;
        let mut c_new = Tensor::zeros(n, self.c_hid, h, w);
        let mut tanh_c = Tensor::zeros(n, self.c_hid, h, w);
        let mut h_new = Tensor::zeros(n, self.c_hid, h, w);
        for s in 0..n {
            let g = gates.sample_mut(s);
            for v in &mut g[..3 * block] {
                *v = sigmoid(*v);
            }
            for v in &mut g[3 * block..] {
                *v = v.tanh();
            }
            let g = gates.sample(s);
            let cp = state.c.sample(s);
            let cn = c_new.sample_mut(s);
            for e in 0..block {
                cn[e] = g[block + e] * cp[e] + g[e] * g[3 * block + e];
            }
            let tc = tanh_c.sample_mut(s);
            for e in 0..block {
                tc[e] = cn[e].tanh();
            }
            let hn = h_new.sample_mut(s);
            for e in 0..block {
                hn[e] = g[2 * block + e] * tc[e];
            }
        }
        Ok((
            LstmState { h: h_new, c: c_new },
            LstmStepCache {
                xh,
                gates,
                c_prev: state.c.clone(),
                tanh_c,
            },
        ))
    }

    /// Backward through one step given gradients w.r.t. `h'` and `c'`.
    ///
    /// Accumulates gate-parameter gradients and returns `(dx, dh_prev, dc_prev)`.
    pub fn backward_step(
        &mut self,
        cache: &LstmStepCache<T>,
        dh: &Tensor<T>,
        dc_next: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (n, _, h, w) = cache.c_prev.shape();
        if dh.shape() != cache.c_prev.shape() || dc_next.shape() != dh.shape() {
            return shape_err("convlstm_backward", format!("dh {:?} vs state {:?}", dh.shape(), cache.c_prev.shape()));
        }
        let block = self.c_hid * h * w;
        let mut dgates = Tensor::zeros(n, 4 * self.c_hid, h, w);
        let mut dc_prev = Tensor::zeros(n, self.c_hid, h, w);
        let one = T::one();
        for s in 0..n {
            let g = cache.gates.sample(s);
            let tc = cache.tanh_c.sample(s);
            let cp = cache.c_prev.sample(s);
            let dhs = dh.sample(s);
            let dcs = dc_next.sample(s);
            let da = dgates.sample_mut(s);
            let mut dcp = vec![T::zero(); block];
            for e in 0..block {
                let (gi, gf, go, gg) = (g[e], g[block + e], g[2 * block + e], g[3 * block + e]);
                let dc = dcs[e] + dhs[e] * go * (one - tc[e] * tc[e]);
                let d_o = dhs[e] * tc[e];
                let di = dc * gg;
                let dg = dc * gi;
                let df = dc * cp[e];
                dcp[e] = dc * gf;
                da[e] = di * gi * (one - gi);
                da[block + e] = df * gf * (one - gf);
                da[2 * block + e] = d_o * go * (one - go);
                da[3 * block + e] = dg * (one - gg * gg);
            }
            dc_prev.sample_mut(s).copy_from_slice(&dcp);
        }
        let dxh = self
            .gates
            .backward(&cache.xh, &dgates, true)?
            .expect("requested dx");
        let (dx, dh_prev) = split_channels(&dxh, self.c_in)?;
        Ok((dx, dh_prev, dc_prev))
    }
}
