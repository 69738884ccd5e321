//! Float math shim.
//!
//! The crate builds without `std`, where the inherent `f64` transcendental
//! methods are unavailable. Everything funnels through here so call sites
//! stay identical in both configurations: `libm` provides the fallback.

macro_rules! unary {
    ($(#[$doc:meta])* $name:ident, $std:ident, $libm:ident) => {
        $(#[$doc])*
        #[cfg(feature = "std")]
        #[inline]
        pub fn $name(x: f64) -> f64 {
            f64::$std(x)
        }

        $(#[$doc])*
        #[cfg(not(feature = "std"))]
        #[inline]
        pub fn $name(x: f64) -> f64 {
            libm::$libm(x)
        }
    };
}

macro_rules! binary {
    ($(#[$doc:meta])* $name:ident, $std:ident, $libm:ident) => {
        $(#[$doc])*
        #[cfg(feature = "std")]
        #[inline]
        pub fn $name(a: f64, b: f64) -> f64 {
            f64::$std(a, b)
        }

        $(#[$doc])*
        #[cfg(not(feature = "std"))]
        #[inline]
        pub fn $name(a: f64, b: f64) -> f64 {
            libm::$libm(a, b)
        }
    };
}

unary!(sqrt, sqrt, sqrt);
unary!(exp, exp, exp);
unary!(ln, ln, log);
unary!(ln_1p, ln_1p, log1p);
unary!(log2, log2, log2);
unary!(sin, sin, sin);
unary!(cos, cos, cos);
unary!(tan, tan, tan);
unary!(tanh, tanh, tanh);
unary!(asin, asin, asin);
unary!(floor, floor, floor);
unary!(ceil, ceil, ceil);
unary!(round, round, round);
unary!(abs, abs, fabs);
binary!(atan2, atan2, atan2);
binary!(hypot, hypot, hypot);
binary!(powf, powf, pow);

/// Wraps an angle to the half-open interval `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut r = a - two_pi * round(a / two_pi);
    if r <= -core::f64::consts::PI {
        r += two_pi;
    }
    r
}
