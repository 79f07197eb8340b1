//! Test-only finite-difference oracles: central differences with one
//! Richardson extrapolation step, independent of the forward-mode scalars.

/// Richardson-extrapolated central-difference gradient with base step `h`.
pub(crate) fn gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let d = |s: f64| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += s;
                xm[i] -= s;
                (f(&xp) - f(&xm)) / (2.0 * s)
            };
            (4.0 * d(h / 2.0) - d(h)) / 3.0
        })
        .collect()
}

/// Finite-difference Hessian: row `i` is a Richardson central difference of
/// the finite-difference gradient. Nesting two first differences keeps the
/// subtraction noise of direct second differences out of the comparison.
pub(crate) fn hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let hi = 1e-2 * x[i].abs().max(1.0);
            let d = |s: f64| -> Vec<f64> {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += s;
                xm[i] -= s;
                let gp = gradient(f, &xp, h);
                let gm = gradient(f, &xm, h);
                gp.iter().zip(gm).map(|(p, m)| (p - m) / (2.0 * s)).collect()
            };
            let fine = d(hi / 2.0);
            let coarse = d(hi);
            fine.iter().zip(coarse).map(|(f2, f1)| (4.0 * f2 - f1) / 3.0).collect()
        })
        .collect()
}
