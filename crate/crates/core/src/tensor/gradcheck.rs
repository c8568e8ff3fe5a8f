//! Central finite-difference verification of analytic gradients.
//!
//! The harness evaluates a scalar-valued function twice per perturbed
//! component (step h = 1e-6 * max(1, |x|)) and compares against the tape's
//! gradients. A fault-injection hook lets the test suite confirm that the
//! checks actually detect a wrong gradient rule.

use super::{Tape, Tensor, TensorId};
use crate::error::Result;
use crate::rng::{stream, StreamKind};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub components: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Options for a finite-difference run.
#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    /// Pretend the analytic gradient of the named check has flipped sign.
    /// Used only to verify that the suite is sensitive to broken rules.
    pub flip_sign_of: Option<String>,
    /// Check only this many components per input tensor (0 = all),
    /// chosen deterministically from the seed.
    pub subsample: usize,
}

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` must build a scalar loss from leaves created from `inputs` (in
/// order). Every component of every input is perturbed unless subsampling
/// is requested.
pub fn fd_check(
    name: &str,
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
    tolerance: f64,
    seed: u64,
    opts: &CheckOptions,
) -> Result<CheckReport> {
    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("grad populated").to_vec())
        .collect();

    let sign = if opts.flip_sign_of.as_deref() == Some(name) {
        -1.0
    } else {
        1.0
    };

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.value_scalar(loss))
    };

    // floor the relative-error denominator at a fraction of the gradient
    // scale: difference quotients of near-zero components are dominated by
    // f64 roundoff, not by the gradient rule under test
    let grad_scale = analytic
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * grad_scale).max(1e-6);

    let mut rng = stream(seed, StreamKind::Check, hash_name(name), 0);
    let mut max_rel: f64 = 0.0;
    let mut components = 0usize;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let n = inputs[k].numel();
        let picks: Vec<usize> = if opts.subsample == 0 || opts.subsample >= n {
            (0..n).collect()
        } else {
            (0..opts.subsample).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in picks {
            let x = inputs[k].data[j];
            let h = 1e-6 * x.abs().max(1.0);
            probe[k].data[j] = x + h;
            let lp = eval(&probe)?;
            probe[k].data[j] = x - h;
            let lm = eval(&probe)?;
            probe[k].data[j] = x;
            let fd = (lp - lm) / (2.0 * h);
            let a = sign * analytic[k][j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
            components += 1;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        components,
        tolerance,
    })
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Random tensor with entries uniform in [-1, 1).
pub fn random_tensor(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    let mut rng = stream(seed, StreamKind::Check, salt, 1);
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Per-operation gradient checks for a single seed.
pub fn op_checks(seed: u64, tolerance: f64, opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();

    let a = random_tensor(&[5, 4], seed, 1);
    let b = random_tensor(&[4, 3], seed, 2);
    let coeff = random_tensor(&[5, 3], seed, 3);
    reports.push(fd_check(
        "matmul",
        &[a, b],
        &move |tape, ids| {
            let c = tape.matmul(ids[0], ids[1])?;
            let r = tape.leaf(coeff.clone());
            let w = tape.mul(c, r)?;
            Ok(tape.sum_all(w))
        },
        tolerance,
        seed,
        opts,
    )?);

    let x = random_tensor(&[6], seed, 4);
    let coeff = random_tensor(&[6], seed, 5);
    reports.push(fd_check(
        "softmax",
        &[x],
        &move |tape, ids| {
            let s = tape.softmax(ids[0], 0)?;
            let r = tape.leaf(coeff.clone());
            let w = tape.mul(s, r)?;
            Ok(tape.sum_all(w))
        },
        tolerance,
        seed,
        opts,
    )?);

    let x = random_tensor(&[3, 5], seed, 6);
    let gain = random_tensor(&[5], seed, 7);
    let bias = random_tensor(&[5], seed, 8);
    let coeff = random_tensor(&[3, 5], seed, 9);
    reports.push(fd_check(
        "layer_norm",
        &[x, gain, bias],
        &move |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            let r = tape.leaf(coeff.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        },
        tolerance,
        seed,
        opts,
    )?);

    for (name, kind) in [
        ("sigmoid", 0usize),
        ("swish", 1),
        ("elu", 2),
        ("exp", 3),
    ] {
        let x = random_tensor(&[7], seed, 10 + kind as u64);
        let coeff = random_tensor(&[7], seed, 20 + kind as u64);
        reports.push(fd_check(
            name,
            &[x],
            &move |tape, ids| {
                let y = match kind {
                    0 => tape.sigmoid(ids[0]),
                    1 => tape.swish(ids[0]),
                    2 => tape.elu(ids[0]),
                    _ => tape.exp(ids[0]),
                };
                let r = tape.leaf(coeff.clone());
                let w = tape.mul(y, r)?;
                Ok(tape.sum_all(w))
            },
            tolerance,
            seed,
            opts,
        )?);
    }

    let a = random_tensor(&[4, 3], seed, 30);
    let b = random_tensor(&[3], seed, 31);
    let coeff = random_tensor(&[4, 3], seed, 32);
    reports.push(fd_check(
        "broadcast_mul_add_sub",
        &[a, b],
        &move |tape, ids| {
            let m = tape.mul(ids[0], ids[1])?;
            let s = tape.add(m, ids[0])?;
            let d = tape.sub(s, ids[1])?;
            let r = tape.leaf(coeff.clone());
            let w = tape.mul(d, r)?;
            Ok(tape.sum_all(w))
        },
        tolerance,
        seed,
        opts,
    )?);

    let a = random_tensor(&[4, 3], seed, 33);
    let coeff = random_tensor(&[1, 3], seed, 34);
    reports.push(fd_check(
        "mean_axis0_transpose",
        &[a],
        &move |tape, ids| {
            let t = tape.transpose(ids[0])?;
            let t2 = tape.transpose(t)?;
            let m = tape.mean_axis0(t2)?;
            let r = tape.leaf(coeff.clone());
            let w = tape.mul(m, r)?;
            Ok(tape.sum_all(w))
        },
        tolerance,
        seed,
        opts,
    )?);

    let a = random_tensor(&[3, 2], seed, 35);
    let b = random_tensor(&[3, 4], seed, 36);
    let coeff = random_tensor(&[3, 6], seed, 37);
    reports.push(fd_check(
        "concat_cols",
        &[a, b],
        &move |tape, ids| {
            let c = tape.concat_cols(&[ids[0], ids[1]])?;
            let r = tape.leaf(coeff.clone());
            let w = tape.mul(c, r)?;
            Ok(tape.sum_all(w))
        },
        tolerance,
        seed,
        opts,
    )?);

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_op_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            for report in op_checks(seed, 1e-5, &CheckOptions::default()).unwrap() {
                assert!(
                    report.pass(),
                    "{} failed at seed {}: max rel err {:.3e}",
                    report.name,
                    seed,
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn injected_sign_error_is_detected_and_named() {
        let opts = CheckOptions {
            flip_sign_of: Some("softmax".to_string()),
            subsample: 0,
        };
        let reports = op_checks(3, 1e-5, &opts).unwrap();
        let bad: Vec<&CheckReport> = reports.iter().filter(|r| !r.pass()).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].name, "softmax");
    }

    #[test]
    fn swish_gradient_at_one_matches_fd_tightly() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let report = fd_check(
            "swish_at_1",
            &[x],
            &|tape, ids| {
                let y = tape.swish(ids[0]);
                Ok(tape.sum_all(y))
            },
            1e-7,
            0,
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass(), "rel err {:.3e}", report.max_rel_err);
    }
}
