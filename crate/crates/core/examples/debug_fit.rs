//! Scratch: dissect a stalling fit draw.

use fli_core::fit::{forward_fit_model, lm_fit, DecayKind, FitModelSpec, FitParams};
use fli_core::rng::{stream, uniform, StreamKind};
use fli_core::sim::{make_irf, IrfModel, TimeAxis};

fn draw_identifiable(seed: u64, k: u64) -> FitParams {
    let mut rng = stream(seed, StreamKind::Check, k, 900);
    let tau1 = uniform(&mut rng, 0.2, 0.7);
    let tau2_lo = (tau1 + 0.3).max(0.85);
    let tau2 = uniform(&mut rng, tau2_lo, 1.5);
    FitParams {
        amplitude: uniform(&mut rng, 500.0, 5000.0),
        tau1_ns: tau1,
        tau2_ns: tau2,
        a_r: uniform(&mut rng, 0.1, 0.9),
        t0_ps: uniform(&mut rng, -160.0, 0.0),
        baseline: 0.0,
    }
}

fn main() {
    let axis = TimeAxis::new(176, 40.0);
    let reference = make_irf(&IrfModel::default(), axis).unwrap();
    let spec = FitModelSpec::default();
    for k in [64u64, 5, 23, 87] {
        let truth = draw_identifiable(7, k);
        let tpsf = forward_fit_model(&truth, DecayKind::Bi, &reference).unwrap();
        let fit = lm_fit(&tpsf, &reference, &spec).unwrap();
        println!(
            "draw {k}: iters {:3} conv {:5} residual {:.3e} | tau1 {:.4}/{:.4} tau2 {:.4}/{:.4} ar {:.4}/{:.4} t0 {:+.1}/{:+.1} A {:.0}/{:.0} c {:.3}",
            fit.iterations,
            fit.converged,
            fit.residual_norm,
            fit.params.tau1_ns, truth.tau1_ns,
            fit.params.tau2_ns, truth.tau2_ns,
            fit.params.a_r, truth.a_r,
            fit.params.t0_ps, truth.t0_ps,
            fit.params.amplitude, truth.amplitude,
            fit.params.baseline,
        );
    }
}
