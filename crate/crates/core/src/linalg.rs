//! Small dense-vector helpers with fixed summation order.

/// Tolerance under which a vector is treated as already unit-norm and left
/// untouched by [`normalize_in_place`]. Keeps normalization idempotent
/// bit-for-bit.
pub const UNIT_NORM_SLACK: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `v` to unit norm. Returns the norm before scaling, or `None` when
/// the vector is zero or non-finite.
pub fn normalize_in_place(v: &mut [f64]) -> Option<f64> {
    let n = norm(v);
    if !n.is_finite() || n == 0.0 {
        return None;
    }
    if (n - 1.0).abs() > UNIT_NORM_SLACK {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    Some(n)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
