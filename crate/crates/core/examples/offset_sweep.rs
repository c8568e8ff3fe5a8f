//! Scratch experiment: response of the no-offset fit to arrival delays.

use fli_core::fit::{forward_fit_model, lm_fit, DecayKind, FitModelSpec, FitParams};
use fli_core::sim::{make_irf, IrfModel, TimeAxis};

fn main() {
    let axis = TimeAxis::new(176, 40.0);
    let reference = make_irf(&IrfModel::default(), axis).unwrap();
    let truth = FitParams {
        amplitude: 1500.0,
        tau1_ns: 0.5,
        tau2_ns: 1.2,
        a_r: 0.3,
        t0_ps: 0.0,
        baseline: 0.0,
    };
    println!("tau_m truth = {}", truth.tau_m());
    for delay in [-160.0, -120.0, -80.0, -40.0, 0.0, 40.0, 80.0, 120.0, 160.0] {
        let irf_d = make_irf(
            &IrfModel {
                delay_ps: delay,
                lead_ps: 600.0,
                ..IrfModel::default()
            },
            axis,
        )
        .unwrap();
        let reference = make_irf(
            &IrfModel {
                lead_ps: 600.0,
                ..IrfModel::default()
            },
            axis,
        )
        .unwrap();
        let tpsf = forward_fit_model(&truth, DecayKind::Bi, &irf_d).unwrap();
        let no_offset = FitModelSpec {
            fit_offset: false,
            ..Default::default()
        };
        let fit = lm_fit(&tpsf, &reference, &no_offset).unwrap();
        let with_offset = lm_fit(&tpsf, &reference, &FitModelSpec::default()).unwrap();
        println!(
            "delay {delay:+7.1} ps: no-offset tau_m {:.4} (t1 {:.3} t2 {:.3} ar {:.3}, res {:.2}, conv {}) | offset tau_m {:.4} t0 {:+.1}",
            fit.tau_m(),
            fit.params.tau1_ns,
            fit.params.tau2_ns,
            fit.params.a_r,
            fit.residual_norm,
            fit.converged,
            with_offset.tau_m(),
            with_offset.params.t0_ps,
        );
    }
    let _ = reference;
}
