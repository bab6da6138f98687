// SPDX-License-Identifier: Apache-2.0

use super::{shape_err, Param, Result, Scalar, Tensor};

/// Pixelwise mean squared error and its gradient `2 (p - t) / count`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if !pred.same_shape(target) {
        return shape_err("mse_loss", format!("{:?} vs {:?}", pred.shape(), target.shape()));
    }
    if pred.is_empty() {
        return shape_err("mse_loss", "empty tensors");
    }
    let count = pred.len() as f64;
    let loss = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p.f64() - t.f64();
            d * d
        })
        .sum::<f64>()
        / count;
    let scale = T::of(2.0 / count);
    let grad = pred.zip_map(target, |p, t| scale * (p - t));
    Ok((loss, grad))
}

/// `rate * sum(w^2)` over regularized parameters. The matching gradient is
/// applied inside the optimizer.
pub fn l2_penalty<'a, T: Scalar>(params: impl IntoIterator<Item = &'a Param<T>>, rate: f64) -> f64 {
    rate * params
        .into_iter()
        .filter(|p| p.regularize)
        .flat_map(|p| p.value.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
}
