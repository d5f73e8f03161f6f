//! Central finite differences. This walks the *forward* evaluation only, so
//! it is an oracle independent of the backward pass it is used to check.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `x0`, step `h` per coordinate.
pub fn central_diff<F>(f: F, x0: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let slot = x.as_slice_mut().unwrap();
        let orig = slot[idx];
        slot[idx] = orig + h;
        let fp = f(&x);
        let slot = x.as_slice_mut().unwrap();
        slot[idx] = orig - h;
        let fm = f(&x);
        let slot = x.as_slice_mut().unwrap();
        slot[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradient tensors:
/// `max_i |a_i - b_i| / max(1e-8, max_i(|a_i|, |b_i|))`.
pub fn rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let denom = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    let num = a
        .iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    num / denom
}
