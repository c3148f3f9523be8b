//! Optimization loop, evaluation, and the perturbation sweep.

use crate::analysis::effective_alphas;
use crate::checkpoint::{save_checkpoint, Checkpoint, OptimizerMeta};
use crate::data::{normalize_image, ChannelStats, Dataset, PerturbMode, PerturbSpec, PERTURB_GRID};
use crate::error::{Error, Result};
use crate::model::{bind_params, init_params, tape_forward, ModelConfig, ParamSet};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::util::par_map;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
}

/// Training hyperparameters. Defaults follow the reference recipe where it
/// is stated (base learning rate 0.001, weight decay 0.3, Adam, cosine
/// schedule with warmup) at desk-scale batch and epoch counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            base_lr: 1e-3,
            warmup_epochs: 2,
            weight_decay: 0.3,
            grad_clip_norm: 1.0,
            seed: 0,
            schedule: Schedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::invalid("grad_clip_norm must be positive (0.0 is disallowed)"));
        }
        Ok(())
    }
}

/// Adam moments aligned with the parameter set's definition order, plus the
/// step count and hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub t: u64,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, weight_decay: Real) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m, v }
    }
}

/// One Adam step with decoupled weight decay. Gradients are read from each
/// parameter's grad buffer; a missing buffer counts as zero. A NaN gradient
/// aborts, naming the parameter.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: Real) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (idx, (name, p)) in params.iter_mut().enumerate() {
        let n = p.numel();
        let grad = p.grad.clone().unwrap_or_else(|| vec![0.0; n]);
        if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::non_finite(format!(
                "gradient of parameter '{name}' at element {pos}"
            )));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = p.data_mut();
        for i in 0..n {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + state.eps) + lr * state.weight_decay * data[i];
        }
    }
    Ok(())
}

/// Global L2 norm over all parameter gradients.
pub fn global_grad_norm(params: &ParamSet) -> Real {
    let mut total = 0.0f64;
    for (_, p) in params.iter() {
        if let Some(g) = &p.grad {
            for &v in g {
                total += v as f64 * v as f64;
            }
        }
    }
    total.sqrt() as Real
}

/// Scale all gradients so the global norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(params: &mut ParamSet, max_norm: Real) -> Result<Real> {
    if max_norm <= 0.0 {
        return Err(Error::invalid("grad_clip_norm must be positive (0.0 is disallowed)"));
    }
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                for v in g {
                    *v *= scale;
                }
            }
        }
    }
    Ok(norm)
}

/// Linear warmup from 0 to `base_lr` over the warmup steps, then cosine
/// decay to 0 at `total_steps`.
pub fn lr_at(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let progress = progress.clamp(0.0, 1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Vec<Real>>>,
}

/// Forward + backward for one sample on its own tape; gradients come back
/// aligned with the parameter order.
fn sample_grads(
    cfg: &ModelConfig,
    params: &ParamSet,
    image: &Tensor,
    label: usize,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, cfg, params)?;
    let fwd = tape_forward(&mut tape, image, cfg, &bound, false)?;
    let loss = tape.cross_entropy(fwd.logits, &[label])?;
    let loss_val = tape.value(loss).item() as f64;
    let logits = tape.value(fwd.logits).data();
    let correct = argmax(logits) == label;
    let store = tape.backward(loss)?;
    let grads = bound
        .leaves
        .iter()
        .map(|(_, var)| store.get(*var).map(|g| g.to_vec()))
        .collect();
    Ok(SampleResult { loss: loss_val, correct, grads })
}

fn argmax(v: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub best_val: f64,
    pub final_alphas: Vec<Real>,
    pub steps: usize,
}

fn check_geometry(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    let (c, h, w) = ds.geometry();
    if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size) {
        return Err(Error::invalid(format!(
            "dataset geometry {c}x{h}x{w} does not match model {}x{}x{}",
            cfg.channels, cfg.image_size, cfg.image_size
        )));
    }
    if ds.class_count > cfg.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model head covers {}",
            ds.class_count, cfg.num_classes
        )));
    }
    Ok(())
}

/// Train a model, logging one metrics row per epoch and keeping the
/// checkpoint with the best validation accuracy. A NaN loss aborts the run;
/// the best checkpoint written so far stays on disk.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    normalize: Option<&ChannelStats>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    check_geometry(model_cfg, train_ds)?;
    check_geometry(model_cfg, val_ds)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let train_ds = match normalize {
        Some(stats) => &crate::data::normalize_dataset(train_ds, stats)?,
        None => train_ds,
    };
    let val_ds = match normalize {
        Some(stats) => &crate::data::normalize_dataset(val_ds, stats)?,
        None => val_ds,
    };

    let mut params = init_params(model_cfg)?;
    let mut adam = AdamState::new(&params, train_cfg.weight_decay as Real);
    let steps_per_epoch = train_ds.len().div_ceil(train_cfg.batch_size);
    let total_steps = steps_per_epoch * train_cfg.epochs;
    let warmup_steps = steps_per_epoch * train_cfg.warmup_epochs;

    let metrics_path = out_dir.join("metrics.csv");
    let checkpoint_path = out_dir.join("best.rvt");
    let mut metrics = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let alpha_cols: String =
        (0..model_cfg.depth).map(|l| format!(",alpha_{l}")).collect();
    writeln!(metrics, "epoch,step,lr,train_loss,train_acc,val_acc{alpha_cols}")
        .map_err(|e| Error::io(&metrics_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut indices: Vec<usize> = (0..train_ds.len()).collect();
    let mut step = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_written = false;
    let mut last_lr = 0.0;

    for epoch in 0..train_cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        for batch in indices.chunks(train_cfg.batch_size) {
            let lr = lr_at(step, warmup_steps, total_steps, train_cfg.base_lr);
            last_lr = lr;
            let results: Vec<Result<SampleResult>> = {
                let params_ref = &params;
                par_map(batch.len(), |i| {
                    let idx = batch[i];
                    sample_grads(model_cfg, params_ref, &train_ds.image(idx), train_ds.label(idx))
                })
            };
            params.zero_grads();
            let scale = 1.0 / batch.len() as Real;
            let mut batch_loss = 0.0f64;
            for res in results {
                let sample = res?;
                if !sample.loss.is_finite() {
                    return Err(Error::non_finite(format!(
                        "training loss diverged at step {step}; last good checkpoint retained"
                    )));
                }
                batch_loss += sample.loss;
                epoch_correct += sample.correct as usize;
                for ((_, p), g) in params.iter_mut().zip(&sample.grads) {
                    if let Some(g) = g {
                        let dst = p.grad_mut();
                        for (d, &s) in dst.iter_mut().zip(g) {
                            *d += s * scale;
                        }
                    }
                }
            }
            epoch_loss += batch_loss;
            clip_gradients(&mut params, train_cfg.grad_clip_norm as Real)?;
            adam_step(&mut params, &mut adam, lr as Real)?;
            step += 1;
        }
        let train_loss = epoch_loss / train_ds.len() as f64;
        let train_acc = epoch_correct as f64 / train_ds.len() as f64;
        let val_acc = evaluate(model_cfg, &params, val_ds, None, None)?;
        let alphas = effective_alphas(model_cfg, &params)
            .unwrap_or_else(|| vec![1.0; model_cfg.depth]);
        let alpha_vals: String = alphas.iter().map(|a| format!(",{a}")).collect();
        writeln!(
            metrics,
            "{},{},{},{},{},{}{}",
            epoch, step, last_lr, train_loss, train_acc, val_acc, alpha_vals
        )
        .map_err(|e| Error::io(&metrics_path, e))?;
        if val_acc > best_val {
            best_val = val_acc;
            let ckpt = Checkpoint {
                config: model_cfg.clone(),
                params: params.clone(),
                normalize: normalize.cloned(),
                optimizer: Some((
                    OptimizerMeta {
                        t: adam.t,
                        base_lr: train_cfg.base_lr,
                        beta1: adam.beta1 as f64,
                        beta2: adam.beta2 as f64,
                        eps: adam.eps as f64,
                        weight_decay: adam.weight_decay as f64,
                    },
                    adam.m.iter().zip(params.iter()).map(|(m, (_, p))| {
                        Tensor::new(p.shape().to_vec(), m.clone()).expect("moment tensor")
                    }).collect(),
                    adam.v.iter().zip(params.iter()).map(|(v, (_, p))| {
                        Tensor::new(p.shape().to_vec(), v.clone()).expect("moment tensor")
                    }).collect(),
                )),
            };
            save_checkpoint(&checkpoint_path, &ckpt)?;
            best_written = true;
        }
    }
    if !best_written {
        return Err(Error::invalid("training produced no checkpoint"));
    }
    let final_alphas =
        effective_alphas(model_cfg, &params).unwrap_or_else(|| vec![1.0; model_cfg.depth]);
    Ok(TrainOutcome {
        metrics_path,
        checkpoint_path,
        best_val,
        final_alphas,
        steps: step,
    })
}

/// Top-1 accuracy over a dataset, optionally perturbing every image first
/// (before normalization).
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParamSet,
    ds: &Dataset,
    perturb: Option<&PerturbSpec>,
    normalize: Option<&ChannelStats>,
) -> Result<f64> {
    cfg.validate()?;
    check_geometry(cfg, ds)?;
    if ds.is_empty() {
        return Err(Error::invalid("evaluate: empty dataset"));
    }
    let results: Vec<Result<bool>> = par_map(ds.len(), |i| {
        let mut image = ds.image(i);
        if let Some(spec) = perturb {
            image = spec.apply(&image)?;
        }
        if let Some(stats) = normalize {
            image = normalize_image(&image, stats)?;
        }
        let record = crate::model::model_forward(&image, cfg, params, false)?;
        Ok(argmax(record.logits.data()) == ds.label(i))
    });
    let mut correct = 0usize;
    for r in results {
        correct += r? as usize;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// One row of the perturbation drop table.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub mode: PerturbMode,
    pub percent: u32,
    pub top1: f64,
    /// Accuracy drop vs the unperturbed baseline, in accuracy points.
    pub drop: f64,
}

/// Evaluate the {15, 30, 45, 60}% grid for one mode, with the unperturbed
/// baseline as reference.
pub fn perturb_sweep(
    cfg: &ModelConfig,
    params: &ParamSet,
    ds: &Dataset,
    mode: PerturbMode,
    normalize: Option<&ChannelStats>,
) -> Result<Vec<SweepRow>> {
    let baseline = evaluate(cfg, params, ds, None, normalize)?;
    let mut rows = Vec::with_capacity(PERTURB_GRID.len());
    for &percent in &PERTURB_GRID {
        let spec = PerturbSpec::new(mode, percent)?;
        let top1 = evaluate(cfg, params, ds, Some(&spec), normalize)?;
        rows.push(SweepRow { mode, percent, top1, drop: baseline - top1 });
    }
    Ok(rows)
}
