//! Special functions written against the generic scalar type.
//!
//! `ln_gamma` uses the Lanczos approximation (g = 7, 9 coefficients, good to
//! ~1e-13 relative for positive arguments). Because the whole expression is
//! built from lifted primitives, hyper-dual evaluation produces its exact
//! digamma/trigamma factors, which the gamma-shape and LKJ-concentration
//! sensitivities rely on.

use crate::dualnum::Real;
use crate::{Error, Result};

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for positive arguments.
pub(crate) fn ln_gamma<S: Real>(x: S) -> Result<S> {
    if x.value() <= 0.0 {
        return Err(Error::Domain { primitive: "ln_gamma", value: x.value() });
    }
    let xm1 = x - S::constant(1.0);
    let mut series = S::constant(LANCZOS_COEFFS[0]);
    for (k, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        series = series + S::constant(c).div(xm1 + S::constant(k as f64))?;
    }
    let t = xm1 + S::constant(LANCZOS_G + 0.5);
    Ok(S::constant(HALF_LN_TWO_PI) + (xm1 + S::constant(0.5)) * t.ln()? - t + series.ln()?)
}
