// SPDX-License-Identifier: Apache-2.0

//! Central-difference gradient checks in `f64`.

use super::*;
use crate::rng::Pcg32;

const H: f64 = 1e-4;

fn random(n: usize, c: usize, h: usize, w: usize, rng: &mut Pcg32) -> Tensor<f64> {
    Tensor::from_fn(n, c, h, w, |_| rng.uniform(-1.0, 1.0))
}

/// Worst relative error between `analytic` and central differences of `loss`
/// with respect to the scalars reached through `slot`.
fn worst_error<S>(
    state: &mut S,
    analytic: &[f64],
    slot: fn(&mut S, usize) -> &mut f64,
    loss: impl Fn(&S) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *slot(state, i);
        *slot(state, i) = orig + H;
        let up = loss(state);
        *slot(state, i) = orig - H;
        let down = loss(state);
        *slot(state, i) = orig;
        let num = (up - down) / (2.0 * H);
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    worst
}

struct ConvCase<L> {
    layer: L,
    x: Tensor<f64>,
}

#[test]
fn conv2d_gradients() {
    let mut rng = Pcg32::stream(11, 0, "gradcheck");
    let mut layer = Conv2d::<f64>::new(2, 3, 3, &mut rng);
    layer.bias.value.iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5));
    let x = random(2, 2, 5, 4, &mut rng);
    let r = random(2, 3, 5, 4, &mut rng);
    let dx = layer.backward(&x, &r, true).unwrap().unwrap();
    let dw = layer.weight.grad.clone();
    let db = layer.bias.grad.clone();
    let mut case = ConvCase { layer, x };
    let loss = |c: &ConvCase<Conv2d<f64>>| c.layer.forward(&c.x).unwrap().dot(&r);
    assert!(worst_error(&mut case, dx.data(), |c, i| &mut c.x.data_mut()[i], loss) < 1e-4);
    assert!(worst_error(&mut case, &dw, |c, i| &mut c.layer.weight.value[i], loss) < 1e-4);
    assert!(worst_error(&mut case, &db, |c, i| &mut c.layer.bias.value[i], loss) < 1e-4);
}

#[test]
fn conv_transpose_gradients() {
    let mut rng = Pcg32::stream(12, 0, "gradcheck");
    let mut layer = ConvTranspose2d::<f64>::new(3, 2, 5, &mut rng);
    layer.bias.value.iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5));
    let x = random(2, 3, 4, 6, &mut rng);
    let r = random(2, 2, 4, 6, &mut rng);
    let dx = layer.backward(&x, &r, true).unwrap().unwrap();
    let dw = layer.weight.grad.clone();
    let db = layer.bias.grad.clone();
    let mut case = ConvCase { layer, x };
    let loss = |c: &ConvCase<ConvTranspose2d<f64>>| c.layer.forward(&c.x).unwrap().dot(&r);
    assert!(worst_error(&mut case, dx.data(), |c, i| &mut c.x.data_mut()[i], loss) < 1e-4);
    assert!(worst_error(&mut case, &dw, |c, i| &mut c.layer.weight.value[i], loss) < 1e-4);
    assert!(worst_error(&mut case, &db, |c, i| &mut c.layer.bias.value[i], loss) < 1e-4);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // With shared weights, <conv(x), y> must equal <x, convT(y)>.
    let mut rng = Pcg32::stream(13, 0, "gradcheck");
    let conv = Conv2d::<f64>::new(3, 4, 3, &mut rng);
    let mut convt = ConvTranspose2d::<f64>::zeros(4, 3, 3);
    // conv weight (c_out=4, c_in=3, k, k); convT weight (c_in=4, c_out=3, k, k) applies the flipped map.
    convt.weight.value = conv.weight.value.clone();
    let x = random(1, 3, 6, 5, &mut rng);
    let y = random(1, 4, 6, 5, &mut rng);
    let lhs = conv.forward(&x).unwrap().dot(&y);
    let rhs = x.dot(&convt.forward(&y).unwrap());
    assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn pooling_upsample_relu_gradients() {
    let mut rng = Pcg32::stream(14, 0, "gradcheck");
    let x = random(1, 2, 4, 6, &mut rng);
    let r = random(1, 2, 4, 6, &mut rng);
    // relu(upsample(maxpool(x))) keeps shape, loss = <y, r>.
    let f = |x: &Tensor<f64>| {
        let (p, _) = maxpool2(x).unwrap();
        relu(&upsample2(&p)).dot(&r)
    };
    let (p, rec) = maxpool2(&x).unwrap();
    let u = upsample2(&p);
    let du = relu_backward(&u, &r);
    let dp = upsample2_backward(&du).unwrap();
    let dx = maxpool2_backward(&rec, &dp).unwrap();
    let mut state = x;
    assert!(worst_error(&mut state, &dx.into_data(), |x, i| &mut x.data_mut()[i], f) < 1e-4);
}

#[test]
fn mse_gradient() {
    let mut rng = Pcg32::stream(15, 0, "gradcheck");
    let p = random(2, 1, 3, 3, &mut rng);
    let t = random(2, 1, 3, 3, &mut rng);
    let (_, g) = mse_loss(&p, &t).unwrap();
    let mut state = p;
    let err = worst_error(&mut state, g.data(), |p, i| &mut p.data_mut()[i], |p| mse_loss(p, &t).unwrap().0);
    assert!(err < 1e-4);
}

struct LstmCase {
    cell: ConvLstmCell<f64>,
    xs: Vec<Tensor<f64>>,
}

const STEPS: usize = 3;

fn lstm_loss(case: &LstmCase, rh: &[Tensor<f64>], rc: &Tensor<f64>) -> f64 {
    let (n, _, h, w) = case.xs[0].shape();
    let mut state = LstmState::zeros(n, case.cell.c_hid, h, w);
    let mut total = 0.0;
    for (x, r) in case.xs.iter().zip(rh) {
        state = case.cell.step(x, &state).unwrap().0;
        total += state.h.dot(r);
    }
    total + state.c.dot(rc)
}

#[test]
fn convlstm_bptt_gradients() {
    let mut rng = Pcg32::stream(16, 0, "gradcheck");
    let mut cell = ConvLstmCell::<f64>::new(2, 2, 3, &mut rng);
    cell.gates.bias.value.iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5));
    let xs: Vec<_> = (0..STEPS).map(|_| random(1, 2, 4, 4, &mut rng)).collect();
    let rh: Vec<_> = (0..STEPS).map(|_| random(1, 2, 4, 4, &mut rng)).collect();
    let rc = random(1, 2, 4, 4, &mut rng);

    let mut state = LstmState::zeros(1, 2, 4, 4);
    let mut caches = Vec::new();
    for x in &xs {
        let (next, cache) = cell.step(x, &state).unwrap();
        caches.push(cache);
        state = next;
    }
    let mut dh_next = Tensor::zeros(1, 2, 4, 4);
    let mut dc = rc.clone();
    let mut dxs = vec![Tensor::zeros(1, 2, 4, 4); STEPS];
    for t in (0..STEPS).rev() {
        let mut dh = rh[t].clone();
        dh.add_assign(&dh_next);
        let (dx, dh_prev, dc_prev) = cell.backward_step(&caches[t], &dh, &dc).unwrap();
        dxs[t] = dx;
        dh_next = dh_prev;
        dc = dc_prev;
    }
    let dw = cell.gates.weight.grad.clone();
    let db = cell.gates.bias.grad.clone();
    let dx_flat: Vec<f64> = dxs.iter().flat_map(|t| t.data().to_vec()).collect();
    let mut case = LstmCase { cell, xs };
    let loss = |c: &LstmCase| lstm_loss(c, &rh, &rc);
    let e_w = worst_error(&mut case, &dw, |c, i| &mut c.cell.gates.weight.value[i], loss);
    let e_b = worst_error(&mut case, &db, |c, i| &mut c.cell.gates.bias.value[i], loss);
    let e_x = worst_error(
        &mut case,
        &dx_flat,
        |c, i| {
            let per = c.xs[0].len();
            &mut c.xs[i / per].data_mut()[i % per]
        },
        loss,
    );
    assert!(e_w < 1e-3 && e_b < 1e-3 && e_x < 1e-3, "{e_w:e} {e_b:e} {e_x:e}");
}

fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], c_out: usize, k: usize) -> Tensor<f64> {
    let (n, c_in, h, wd) = x.shape();
    let p = (k / 2) as isize;
    Tensor::from_fn(n, c_out, h, wd, |idx| {
        let j = idx % wd;
        let i = (idx / wd) % h;
        let o = (idx / (wd * h)) % c_out;
        let s = idx / (wd * h * c_out);
        let mut acc = b[o];
        for c in 0..c_in {
            for u in 0..k {
                for v in 0..k {
                    let (ii, jj) = (i as isize + u as isize - p, j as isize + v as isize - p);
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                        acc += w[((o * c_in + c) * k + u) * k + v] * x.at(s, c, ii as usize, jj as usize);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn conv_matches_direct_sum_on_small_shapes() {
    let mut rng = Pcg32::stream(17, 0, "gradcheck");
    for &(h, w) in &[(1, 1), (1, 2), (2, 1), (2, 4), (3, 5), (4, 2), (6, 7)] {
        for &k in &[1, 3, 5, 7] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, &mut rng);
            conv.bias.value.iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5));
            let x = random(2, 2, h, w, &mut rng);
            let y = conv.forward(&x).unwrap();
            let want = naive_conv(&x, &conv.weight.value, &conv.bias.value, 3, k);
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "h={h} w={w} k={k}: {a} vs {b}");
            }
        }
    }
}
