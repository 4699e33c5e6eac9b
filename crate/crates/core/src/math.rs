// Scalar transcendental functions. `core` has no float intrinsics for these,
// and routing everything through libm keeps results identical across
// platforms.

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub(crate) fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub(crate) fn pow(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub(crate) fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + ln_1p(exp(-x))
    } else {
        ln_1p(exp(x))
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Inverse of the logistic function.
#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    ln(p / (1.0 - p))
}
