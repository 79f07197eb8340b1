use std::time::Instant;

use lrvb::models::{simulate, MicrocreditModel, Model, ModelParameters};
use lrvb::optimize::{fit, FitOptions};

#[test]
#[ignore]
fn probe() {
    let truth = ModelParameters {
        mu: 1.0,
        tau: 0.5,
        mu_k: vec![0.9, 1.2, 0.7, 1.1, 0.8, 1.3, 1.0],
        tau_k: vec![0.4, 0.6, 0.5, 0.3, 0.7, 0.45, 0.55],
        log_sigma2_inv: vec![0.0, -0.3, 0.2, -0.1, 0.1, -0.2, 0.3],
        log_s1: -0.5,
        log_s2: -0.8,
        z_rho: 0.2,
    };
    let model = MicrocreditModel::new(simulate(&truth, &[200; 7], 42).unwrap());
    let alpha = model.default_alpha();

    // kl value eval cost
    let init = model.default_init();
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..1000 {
        acc += model.kl(&init, &alpha).unwrap();
    }
    let t_kl = t0.elapsed().as_secs_f64() / 1000.0;
    eprintln!("kl f64 eval: {:.3e} s  (acc {acc:.3})", t_kl);

    // hessian cost
    let t0 = Instant::now();
    let h = lrvb::dualnum::hessian(
        |x| {
            let a: Vec<lrvb::dualnum::HyperDual> =
                alpha.iter().map(|&v| lrvb::dualnum::HyperDual::constant(v)).collect();
            model.kl(x, &a)
        },
        &init,
    )
    .unwrap();
    let t_h = t0.elapsed().as_secs_f64();
    eprintln!("hessian (dim {}): {:.3e} s", h.nrows(), t_h);

    // full fit
    let t0 = Instant::now();
    let res = fit(&model, &alpha, None, &FitOptions::default()).unwrap();
    let t_fit = t0.elapsed().as_secs_f64();
    eprintln!(
        "fit: {:.3e} s, iterations {}, converged {}, kl {:.6}",
        t_fit, res.iterations, res.converged, res.kl_value
    );

    // log_joint eval cost (MCMC per-draw core)
    let theta = vec![0.5; model.theta_dim()];
    let t0 = Instant::now();
    let mut acc = 0.0;
    for i in 0..25000 {
        let mut th = theta.clone();
        th[0] += (i % 7) as f64 * 1e-6;
        acc += model.log_joint(&th, &alpha).unwrap();
    }
    let t_lj = t0.elapsed().as_secs_f64();
    eprintln!("25000 log_joint: {:.3e} s (acc {acc:.3})", t_lj);
    eprintln!("ratio mcmc/fit (log_joint only vs fit): {:.1}", t_lj / t_fit);
}
