use nalgebra::Vector3;

pub type Vec3 = Vector3<f64>;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Backward of `v / |v|` for cotangent `g`.
#[inline]
pub(crate) fn normalize_vjp(v: &Vec3, g: &Vec3) -> Vec3 {
    let norm = v.norm();
    let n = v / norm;
    (g - n * n.dot(g)) / norm
}
