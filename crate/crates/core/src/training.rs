//! Loss assembly, Adam, dead-concept tracking and the training loop.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ActivationKind, Forward, Gradients, Penalty, Sae, Seeds};
use crate::numeric::Matrix;

fn default_lr() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    32
}
fn default_total() -> usize {
    200_000
}
fn default_lambda() -> f64 {
    1e-3
}
fn default_dead_window() -> usize {
    10_000
}
fn default_log_interval() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps_adam: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_total")]
    pub total_samples: usize,
    /// Sparsity weight; only read by the L1/L0-penalized activations.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    /// Samples without any activation before a concept counts as dead.
    #[serde(default = "default_dead_window")]
    pub dead_window: usize,
    /// Optimizer steps per history record.
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Record elapsed milliseconds in the history. Off by default so that
    /// history files are reproducible byte for byte.
    #[serde(default)]
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps_adam: default_eps(),
            batch_size: default_batch(),
            total_samples: default_total(),
            lambda: default_lambda(),
            seed: 0,
            dead_window: default_dead_window(),
            log_interval: default_log_interval(),
            grad_clip: None,
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::invalid("beta1 and beta2 must lie in (0, 1)"));
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::invalid("eps_adam must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.log_interval == 0 {
            return Err(Error::invalid("log_interval must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Loss value, its parts, and the seeds for the backward pass.
#[derive(Debug, Clone)]
pub struct Loss {
    pub total: f64,
    pub reconstruction: f64,
    /// `λ·S(z)`, batch-averaged.
    pub sparsity: f64,
    /// Gated auxiliary reconstruction term.
    pub auxiliary: f64,
    pub seeds: Seeds,
}

/// `mean_batch ‖x - x̂‖² + λ·S(z)`, with `S` = L1 for ReLU/gated, the L0
/// count for JumpReLU, and nothing for the top-k family, sparsemax and
/// softmax (where `lambda` is ignored).
///
/// `penalized` is the matrix the penalty reads: the codes, or the gate
/// activations for a gated SAE.
pub fn loss(
    recon: &Matrix,
    x: &Matrix,
    penalized: &Matrix,
    activation: ActivationKind,
    lambda: f64,
) -> Result<Loss> {
    if recon.shape() != x.shape() {
        return Err(Error::shape("loss", recon.shape(), x.shape()));
    }
    if penalized.rows() != x.rows() {
        return Err(Error::shape("loss", penalized.shape(), x.shape()));
    }
    let n = x.rows().max(1) as f64;
    let diff = recon.sub(x)?;
    let reconstruction = diff.frobenius_sq() / n;
    let d_recon = diff.scale(2.0 / n);

    let mut seeds = Seeds::reconstruction_only(d_recon);
    let sparsity = match activation.penalty() {
        Penalty::None => 0.0,
        Penalty::L1 => {
            let l1: f64 = penalized.as_slice().iter().map(|v| v.abs()).sum();
            // f64::signum(0.0) is 1, so zeros are handled explicitly.
            let w = lambda / n;
            seeds.d_penalized = Some(penalized.map(|v| match v.partial_cmp(&0.0) {
                Some(std::cmp::Ordering::Greater) => w,
                Some(std::cmp::Ordering::Less) => -w,
                _ => 0.0,
            }));
            lambda * l1 / n
        }
        Penalty::L0 => {
            let l0 = penalized.as_slice().iter().filter(|v| **v != 0.0).count() as f64;
            seeds.l0_weight = lambda / n;
            lambda * l0 / n
        }
    };
    Ok(Loss {
        total: reconstruction + sparsity,
        reconstruction,
        sparsity,
        auxiliary: 0.0,
        seeds,
    })
}

/// [`loss`] for a forward pass, adding the gated auxiliary reconstruction
/// `mean_batch ‖x - x̂_aux‖²` when present.
pub fn model_loss(
    fwd: &Forward,
    x: &Matrix,
    activation: ActivationKind,
    lambda: f64,
) -> Result<Loss> {
    let mut out = loss(&fwd.recon, x, fwd.penalized(), activation, lambda)?;
    if let Some(aux) = &fwd.aux_recon {
        let n = x.rows().max(1) as f64;
        let diff = aux.sub(x)?;
        out.auxiliary = diff.frobenius_sq() / n;
        out.total += out.auxiliary;
        out.seeds.d_aux_recon = Some(diff.scale(2.0 / n));
    }
    Ok(out)
}

/// Optimizer moments, step counter and per-concept activity.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub samples_seen: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    /// `samples_seen` at the last batch where each concept fired.
    pub last_active: Vec<u64>,
}

impl TrainState {
    pub fn new<S: Sae + ?Sized>(model: &S) -> Self {
        let moments = model
            .params()
            .iter()
            .map(|(_, p)| {
                let n = p.as_slice().len();
                (vec![0.0; n], vec![0.0; n])
            })
            .collect();
        Self {
            step: 0,
            samples_seen: 0,
            moments,
            last_active: vec![0; model.config().m],
        }
    }
}

/// One bias-corrected Adam update of a flat parameter buffer.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    config: &TrainConfig,
) {
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        first[i] = b1 * first[i] + (1.0 - b1) * g;
        second[i] = b2 * second[i] + (1.0 - b2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        param[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps_adam);
    }
}

/// Applies Adam to every parameter, then the model's constraints
/// (unit-norm decoder columns for MLP SAEs).
pub fn adam_step<S: Sae + ?Sized>(
    model: &mut S,
    state: &mut TrainState,
    grads: &Gradients,
    config: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let clip = match config.grad_clip {
        Some(max) => {
            let norm = grads.global_norm();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let step = state.step;
    let mut params = model.params_mut();
    if params.len() != grads.0.len() || params.len() != state.moments.len() {
        return Err(Error::invalid(format!(
            "optimizer expects {} parameter tensors, got {} gradients",
            params.len(),
            grads.0.len()
        )));
    }
    for (((name, p), (gname, g)), (m1, m2)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.moments.iter_mut())
    {
        if name != gname || p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if clip != 1.0 {
            let g = g.scale(clip);
            adam_update(p.as_mut_slice(), g.as_slice(), m1, m2, step, config);
        } else {
            adam_update(p.as_mut_slice(), g.as_slice(), m1, m2, step, config);
        }
    }
    model.post_step();
    Ok(())
}

/// Marks concepts that fire above `threshold` in this batch and returns the
/// number of concepts silent for at least `dead_window` samples.
pub fn track_dead(
    codes: &Matrix,
    state: &mut TrainState,
    threshold: f64,
    dead_window: usize,
) -> Result<usize> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid("dead threshold must be nonnegative"));
    }
    if codes.cols() != state.last_active.len() {
        return Err(Error::shape(
            "track_dead",
            codes.shape(),
            (codes.rows(), state.last_active.len()),
        ));
    }
    state.samples_seen += codes.rows() as u64;
    for row in codes.row_iter() {
        for (j, &v) in row.iter().enumerate() {
            if v.abs() > threshold {
                state.last_active[j] = state.samples_seen;
            }
        }
    }
    Ok(dead_count(state, dead_window))
}

pub fn dead_count(state: &TrainState, dead_window: usize) -> usize {
    state
        .last_active
        .iter()
        .filter(|&&t| state.samples_seen - t >= dead_window as u64)
        .count()
}

/// A deterministic supplier of training batches.
pub trait DataSource {
    /// Up to `n` rows; `None` once exhausted.
    fn next_batch(&mut self, n: usize) -> Result<Option<Matrix>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: u64,
    pub loss: f64,
    pub mean_l0: f64,
    pub dead_count: usize,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<HistoryRecord>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

pub const HISTORY_HEADER: &str = "step\tloss\tmean_L0\tdead_count\twallclock_ms";

impl History {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format_record(r));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line == HISTORY_HEADER || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::invalid(format!("history line {}: `{line}`", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            records.push(HistoryRecord {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                mean_l0: f[2].parse().map_err(|_| bad())?,
                dead_count: f[3].parse().map_err(|_| bad())?,
                wallclock_ms: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(History {
            records,
            step_losses: Vec::new(),
        })
    }
}

fn format_record(r: &HistoryRecord) -> String {
    format!(
        "{}\t{:?}\t{:?}\t{}\t{}",
        r.step, r.loss, r.mean_l0, r.dead_count, r.wallclock_ms
    )
}

/// Trains until `config.total_samples` have been consumed.
///
/// Each history record averages loss and L0 over the steps since the
/// previous record. When `log` is given, records are also streamed to it
/// as TSV lines (header first).
pub fn train<S: Sae + ?Sized>(
    model: &mut S,
    data: &mut dyn DataSource,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<History> {
    config.validate()?;
    let activation = model.config().activation;
    let mut state = TrainState::new(model);
    let mut history = History::default();
    let started = Instant::now();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{HISTORY_HEADER}").map_err(|e| Error::io("<history>", e))?;
    }

    let (mut acc_loss, mut acc_l0, mut acc_steps) = (0.0, 0.0, 0usize);
    let mut delivered = 0usize;
    while delivered < config.total_samples {
        let want = config.batch_size.min(config.total_samples - delivered);
        let x = match data.next_batch(want)? {
            Some(x) if x.rows() > 0 => x,
            _ => {
                return Err(Error::DataExhausted {
                    delivered,
                    requested: config.total_samples,
                })
            }
        };
        delivered += x.rows();

        let fwd = model.forward_train(&x)?;
        let l = model_loss(&fwd, &x, activation, config.lambda)?;
        if !l.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = model.backward(&fwd, &l.seeds)?;
        adam_step(model, &mut state, &grads, config)?;
        let dead = track_dead(&fwd.codes, &mut state, 0.0, config.dead_window)?;

        history.step_losses.push(l.total);
        acc_loss += l.total;
        acc_l0 += crate::metrics::mean_l0(&fwd.codes, 0.0);
        acc_steps += 1;
        let last = delivered >= config.total_samples;
        if (state.step as usize).is_multiple_of(config.log_interval) || last {
            let record = HistoryRecord {
                step: state.step,
                loss: acc_loss / acc_steps as f64,
                mean_l0: acc_l0 / acc_steps as f64,
                dead_count: dead,
                wallclock_ms: if config.record_wallclock {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", format_record(&record)).map_err(|e| Error::io("<history>", e))?;
            }
            history.records.push(record);
            (acc_loss, acc_l0, acc_steps) = (0.0, 0.0, 0);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
