//! Small dense-vector helpers shared by the forward and backward passes.

use ndarray::{Array1, ArrayView1, ArrayViewMut1};

/// Norm clamp for L2 normalization; a zero vector maps to zero instead of NaN.
pub const NORM_EPS: f64 = 1e-8;

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

pub fn l2_norm(x: ArrayView1<f64>) -> f64 {
    x.dot(&x).sqrt()
}

/// Returns `x / max(|x|, NORM_EPS)` together with the clamped norm.
pub fn normalize(x: ArrayView1<f64>) -> (Array1<f64>, f64) {
    let n = l2_norm(x).max(NORM_EPS);
    (x.mapv(|v| v / n), n)
}

pub fn normalized(x: ArrayView1<f64>) -> Array1<f64> {
    normalize(x).0
}

/// Backward of [`normalize`]: given `y = x / n` and `dL/dy`, returns `dL/dx`.
pub fn normalize_backward(y: ArrayView1<f64>, norm: f64, dy: ArrayView1<f64>) -> Array1<f64> {
    if norm <= NORM_EPS {
        // clamped branch: y = x / eps is linear in x
        return dy.mapv(|g| g / NORM_EPS);
    }
    let proj = y.dot(&dy);
    let mut dx = dy.to_owned();
    dx.scaled_add(-proj, &y);
    dx.mapv_inplace(|g| g / norm);
    dx
}

pub fn softmax_inplace(mut x: ArrayViewMut1<f64>) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(x)))` with max subtraction.
pub fn log_sum_exp(x: ArrayView1<f64>) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}
