//! The training loop: deterministic shuffled pixel batches, chunked
//! parallel gradient accumulation with a fixed reduction order, Adam
//! updates, plateau decay and best-checkpoint tracking.

use super::adam::{adam_step, AdamState};
use super::checkpoint::{load_optimizer, save_optimizer, CheckpointPaths, OptimMeta};
use super::{PlateauSchedule, TrainConfig, TrainLog, TrainLogRow};
use crate::error::{Error, Result};
use crate::model::infer::peak_normalize;
use crate::model::io::{load_weights, save_weights};
use crate::model::weights::MFliNetWeights;
use crate::model::{blocks::forward_pixel, ModelConfig};
use crate::rng::{shuffle_indices, stream, StreamKind};
use crate::sim::{make_irf, FliDataset};
use crate::tensor::Tape;
use rayon::prelude::*;
use std::path::Path;

/// Fixed accumulation chunk: the gradient reduction order is
/// (within-chunk sequential, then chunk-by-chunk), independent of the
/// thread count, so parallel training is bit-identical to sequential.
const GRAD_CHUNK: usize = 32;

struct PixelRecord {
    tpsf: Vec<f64>,
    irf: Vec<f64>,
    truth: [f64; 3],
}

pub struct TrainOutcome {
    /// Weights at the best validation loss.
    pub best_weights: MFliNetWeights,
    /// Weights after the final epoch.
    pub final_weights: MFliNetWeights,
    pub log: TrainLog,
}

fn build_records(ds: &FliDataset, ablate_irf: bool) -> Result<Vec<PixelRecord>> {
    let truth = ds
        .truth
        .as_ref()
        .ok_or_else(|| Error::config("train.data", "dataset lacks ground-truth maps"))?;
    let reference = if ablate_irf {
        let irf = make_irf(&ds.meta.sim.irf_model(0.0), ds.axis())?;
        Some(peak_normalize(&irf.counts))
    } else {
        None
    };
    let g = ds.gates;
    Ok(ds
        .foreground_pixels()
        .into_par_iter()
        .map(|p| PixelRecord {
            tpsf: peak_normalize(&ds.tpsf[p * g..(p + 1) * g]),
            irf: match &reference {
                Some(r) => r.clone(),
                None => peak_normalize(&ds.irf[p * g..(p + 1) * g]),
            },
            truth: [truth.tau1[p], truth.tau2[p], truth.a_r[p]],
        })
        .collect())
}

/// Per-pixel loss contributions and parameter gradients over a batch.
/// Returns (flat gradient sum, per-head squared-error sums).
fn batch_gradients(
    weights: &MFliNetWeights,
    records: &[PixelRecord],
    batch: &[usize],
    loss_weights: (f64, f64, f64),
    n_params: usize,
) -> Result<(Vec<f64>, [f64; 3])> {
    let w = [loss_weights.0, loss_weights.1, loss_weights.2];
    let partials: Vec<Result<(Vec<f64>, [f64; 3])>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; n_params];
            let mut head_sums = [0.0f64; 3];
            for &i in chunk {
                let r = &records[i];
                let mut tape = Tape::new();
                let bound = weights.bind(&mut tape);
                let heads = forward_pixel(&mut tape, &bound, &r.tpsf, &r.irf)?;
                let mut loss = None;
                for (h, id) in heads.iter().enumerate() {
                    let t = tape.constant(vec![1, 1], vec![r.truth[h]])?;
                    let d = tape.sub(*id, t)?;
                    let sq = tape.mul(d, d)?;
                    head_sums[h] += tape.value_scalar(sq);
                    let scaled = tape.scale(sq, w[h]);
                    loss = Some(match loss {
                        None => scaled,
                        Some(acc) => tape.add(acc, scaled)?,
                    });
                }
                tape.backward(loss.expect("three heads"))?;
                let mut pos = 0;
                for id in &bound.params {
                    let g = tape.grad(*id).expect("param gradient");
                    for (a, gv) in acc[pos..pos + g.len()].iter_mut().zip(g) {
                        *a += gv;
                    }
                    pos += g.len();
                }
            }
            Ok((acc, head_sums))
        })
        .collect();

    let mut grad = vec![0.0; n_params];
    let mut head_sums = [0.0f64; 3];
    for partial in partials {
        let (acc, heads) = partial?;
        for (g, a) in grad.iter_mut().zip(acc) {
            *g += a;
        }
        for h in 0..3 {
            head_sums[h] += heads[h];
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    Ok((grad, head_sums))
}

/// Mean per-head squared error over a set of records.
fn eval_heads(
    weights: &MFliNetWeights,
    records: &[PixelRecord],
    ids: &[usize],
) -> Result<[f64; 3]> {
    let partials: Vec<Result<[f64; 3]>> = ids
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut sums = [0.0f64; 3];
            for &i in chunk {
                let r = &records[i];
                let mut tape = Tape::new();
                let bound = weights.bind(&mut tape);
                let heads = forward_pixel(&mut tape, &bound, &r.tpsf, &r.irf)?;
                for (h, id) in heads.iter().enumerate() {
                    let d = tape.value_scalar(*id) - r.truth[h];
                    sums[h] += d * d;
                }
            }
            Ok(sums)
        })
        .collect();
    let mut sums = [0.0f64; 3];
    for p in partials {
        let s = p?;
        for h in 0..3 {
            sums[h] += s[h];
        }
    }
    let n = ids.len().max(1) as f64;
    Ok([sums[0] / n, sums[1] / n, sums[2] / n])
}

/// Train on a dataset's foreground pixels. `resume` continues from a
/// checkpoint prefix written by an earlier run with the same configs.
pub fn train(
    ds: &FliDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ablate_irf: bool,
    checkpoint_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if ds.gates != model_cfg.gates {
        return Err(Error::Dimension(format!(
            "dataset has {} gates, model expects {}",
            ds.gates, model_cfg.gates
        )));
    }
    let records = build_records(ds, ablate_irf)?;
    let n = records.len();
    if n < 2 {
        return Err(Error::config(
            "train.data",
            "need at least two foreground pixels",
        ));
    }
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let mut split_rng = stream(cfg.seed, StreamKind::Split, 0, 0);
    let order = shuffle_indices(&mut split_rng, n);
    let val_ids: Vec<usize> = order[..n_val].to_vec();
    let train_ids: Vec<usize> = order[n_val..].to_vec();

    let mut weights = MFliNetWeights::init(model_cfg)?;
    let n_params = weights.param_count();
    let mut adam = AdamState::new(n_params);
    let mut sched = PlateauSchedule::new(cfg);
    let mut best_weights = weights.clone();
    let mut start_epoch = 0usize;
    let mut skipped_total = 0usize;

    if let Some(prefix) = resume {
        let paths = CheckpointPaths::from_prefix(prefix);
        weights = load_weights(&paths.weights, Some(model_cfg))?;
        best_weights = load_weights(&paths.best_weights, Some(model_cfg))?;
        let (state, meta) = load_optimizer(&paths.optimizer, n_params)?;
        adam = state;
        sched.lr = meta.lr;
        sched.best = meta.best_val.unwrap_or(f64::INFINITY);
        sched.stale_epochs = meta.stale_epochs;
        start_epoch = meta.epochs_completed;
        skipped_total = meta.skipped_steps_total;
    }

    let mut flat = weights.flatten_trainable();
    let mut log = TrainLog::default();

    for epoch in start_epoch..cfg.epochs {
        let t_epoch = std::time::Instant::now();
        let mut shuffle_rng = stream(cfg.seed, StreamKind::Shuffle, epoch as u64, 0);
        let perm = shuffle_indices(&mut shuffle_rng, train_ids.len());
        let mut skipped_epoch = 0usize;
        let mut train_sums = [0.0f64; 3];

        for batch_perm in perm.chunks(cfg.batch_size) {
            let batch: Vec<usize> = batch_perm.iter().map(|&i| train_ids[i]).collect();
            let (grad, head_sums) =
                batch_gradients(&weights, &records, &batch, cfg.loss_weights, n_params)?;
            for h in 0..3 {
                train_sums[h] += head_sums[h];
            }
            if adam_step(&mut flat, &grad, &mut adam, sched.lr) {
                weights.unflatten_trainable(&flat);
            } else {
                skipped_epoch += 1;
            }
        }
        skipped_total += skipped_epoch;

        let train_heads = [
            train_sums[0] / train_ids.len() as f64,
            train_sums[1] / train_ids.len() as f64,
            train_sums[2] / train_ids.len() as f64,
        ];
        let val_heads = eval_heads(&weights, &records, &val_ids)?;
        let (w1, w2, w3) = cfg.loss_weights;
        let train_total = w1 * train_heads[0] + w2 * train_heads[1] + w3 * train_heads[2];
        let val_total = w1 * val_heads[0] + w2 * val_heads[1] + w3 * val_heads[2];

        let lr_used = sched.lr;
        if val_total < sched.best {
            best_weights = weights.clone();
        }
        sched.observe(val_total);

        let mut checkpoint_name = String::new();
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let paths = CheckpointPaths::at(dir, epoch + 1);
                save_weights(&paths.weights, &weights, Some(cfg.seed))?;
                save_weights(&paths.best_weights, &best_weights, Some(cfg.seed))?;
                let meta = OptimMeta {
                    epochs_completed: epoch + 1,
                    step: adam.step,
                    lr: sched.lr,
                    best_val: if sched.best.is_finite() {
                        Some(sched.best)
                    } else {
                        None
                    },
                    stale_epochs: sched.stale_epochs,
                    skipped_steps_total: skipped_total,
                };
                save_optimizer(&paths.optimizer, &adam, &meta)?;
                // continue from exactly what was written: checkpointing
                // quantizes the live state, so resumed and non-resumed
                // runs share every subsequent step bit for bit
                weights = load_weights(&paths.weights, Some(model_cfg))?;
                best_weights = load_weights(&paths.best_weights, Some(model_cfg))?;
                let (state, _) = load_optimizer(&paths.optimizer, n_params)?;
                adam = state;
                flat = weights.flatten_trainable();
                checkpoint_name = paths
                    .weights
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
            }
        }

        log.rows.push(TrainLogRow {
            epoch,
            train_total,
            train_tau1: train_heads[0],
            train_tau2: train_heads[1],
            train_ar: train_heads[2],
            val_total,
            val_tau1: val_heads[0],
            val_tau2: val_heads[1],
            val_ar: val_heads[2],
            lr: lr_used,
            wall_s: t_epoch.elapsed().as_secs_f64(),
            skipped_steps: skipped_epoch,
            checkpoint: checkpoint_name,
        });
    }

    Ok(TrainOutcome {
        best_weights,
        final_weights: weights,
        log,
    })
}
