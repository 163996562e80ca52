//! Loss, optimizer, the training loop and evaluation passes.

mod loss;
mod optim;

pub use loss::{separation_loss, LOSS_FLOOR};
pub use optim::{clip_global_norm, global_norm, optimizer_step, AdamConfig, AdamState};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, AvsExample, Corpus, Split};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::metrics::{mean_std, si_sdri, MetricReport};
use crate::model::BinModel;
use crate::nn::{load_params, save_params};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Drives the per-epoch shuffles.
    pub seed: u64,
    /// Save `checkpoint.ckpt` + `optimizer.ckpt` every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Validate every this many epochs (and after the last one).
    pub eval_every: usize,
    pub loss_floor: f64,
    /// Use only the first `n` training examples; 0 uses all.
    pub train_limit: usize,
    /// Validate on the first `n` validation examples; 0 uses all.
    pub val_limit: usize,
    /// Stop after this many optimizer steps in total; 0 means no cap.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 1,
            loss_floor: LOSS_FLOOR,
            train_limit: 0,
            val_limit: 0,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            v.push("eval_every must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0) {
            v.push(format!("lr = {} must be positive", a.lr));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            v.push("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) {
            v.push(format!("adam_eps = {} must be positive", a.eps));
        }
        if !(a.clip > 0.0) {
            v.push(format!("clip = {} must be positive", a.clip));
        }
        if !(self.loss_floor >= 0.0) {
            v.push(format!("loss_floor = {} must be nonnegative", self.loss_floor));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn to_kv(&self) -> String {
        kv::render([
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("clip", self.adam.clip.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("loss_floor", self.loss_floor.to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("val_limit", self.val_limit.to_string()),
            ("max_steps", self.max_steps.to_string()),
        ])
    }

    pub fn from_kv(map: &mut KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            epochs: map.get_or("epochs", d.epochs)?,
            batch_size: map.get_or("batch_size", d.batch_size)?,
            adam: AdamConfig {
                lr: map.get_or("lr", d.adam.lr)?,
                beta1: map.get_or("beta1", d.adam.beta1)?,
                beta2: map.get_or("beta2", d.adam.beta2)?,
                eps: map.get_or("adam_eps", d.adam.eps)?,
                clip: map.get_or("clip", d.adam.clip)?,
            },
            seed: map.get_or("seed", d.seed)?,
            checkpoint_every: map.get_or("checkpoint_every", d.checkpoint_every)?,
            eval_every: map.get_or("eval_every", d.eval_every)?,
            loss_floor: map.get_or("loss_floor", d.loss_floor)?,
            train_limit: map.get_or("train_limit", d.train_limit)?,
            val_limit: map.get_or("val_limit", d.val_limit)?,
            max_steps: map.get_or("max_steps", d.max_steps)?,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::parse(text)?;
        let cfg = Self::from_kv(&mut map)?;
        map.finish()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_si_sdri: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub wall_seconds: f64,
    /// Shuffle seed used for every epoch that ran.
    pub epoch_seeds: Vec<u64>,
    pub best_val_si_sdri: Option<f64>,
    /// Examples left out because a reference had zero power.
    pub skipped: Vec<String>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss,val_si_sdri\n");
        for r in &self.rows {
            let val = r.val_si_sdri.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.loss, val));
        }
        out
    }
}

fn limited(mut idx: Vec<usize>, limit: usize) -> Vec<usize> {
    if limit > 0 {
        idx.truncate(limit);
    }
    idx
}

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, 0x5348_5546_0000 + epoch as u64)
}

/// Loss value and store-ordered gradients for one example.
pub type ExampleGrads = (f64, Vec<Vec<f64>>);

pub fn example_gradients(model: &BinModel, ex: &AvsExample, floor: f64) -> Result<ExampleGrads> {
    let mut sess = model.session();
    let out = sess.separate(&ex.mixture, &ex.cues)?;
    let loss = separation_loss(sess.graph_mut(), out, &ex.sources, floor)?;
    let value = sess.value(loss).data()[0];
    let (grads, bound) = sess.backward(loss)?;
    Ok((value, model.store().collect_grads(&bound, &grads)))
}

fn has_silent_source(ex: &AvsExample) -> bool {
    (0..ex.sources.shape()[0]).any(|i| ex.source(i).iter().all(|&v| v == 0.0))
}

/// Trains from scratch. With `out`, checkpoints and the best-validation
/// parameters are written there.
pub fn train(model: &mut BinModel, corpus: &Corpus, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainLog> {
    let state = AdamState::new(model.store());
    run(model, corpus, cfg, state, None, out)
}

/// Continues from `checkpoint.ckpt` and `optimizer.ckpt` in `from`. The
/// continuation is bit-identical to an uninterrupted run.
pub fn resume(
    model: &mut BinModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    from: &Path,
    out: Option<&Path>,
) -> Result<TrainLog> {
    load_params(model.store_mut(), &from.join(CHECKPOINT_FILE))?;
    let (state, extra) = AdamState::load(model.store(), &from.join(OPTIMIZER_FILE))?;
    let best = extra.iter().find(|(k, _)| k == "best_val").map(|(_, v)| *v);
    run(model, corpus, cfg, state, best, out)
}

fn save_state(model: &BinModel, state: &AdamState, best: Option<f64>, dir: &Path) -> Result<()> {
    save_params(model.store(), &dir.join(CHECKPOINT_FILE))?;
    let extra: Vec<(&str, f64)> = best.map(|b| ("best_val", b)).into_iter().collect();
    state.save(model.store(), &dir.join(OPTIMIZER_FILE), &extra)
}

fn run(
    model: &mut BinModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut state: AdamState,
    mut best: Option<f64>,
    out: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let started = Instant::now();
    let train_idx = limited(corpus.indices(Split::Train), cfg.train_limit);
    if train_idx.is_empty() {
        return Err(Error::Config(vec!["training split is empty".into()]));
    }
    let per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let stop = if cfg.max_steps > 0 { cfg.max_steps.min(total) } else { total };
    let mut log = TrainLog { best_val_si_sdri: best, ..TrainLog::default() };
    let mut step = state.step as usize;

    while step < stop {
        let epoch = step / per_epoch;
        let seed = epoch_seed(cfg.seed, epoch);
        log.epoch_seeds.push(seed);
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();

        for (b, &batch) in batches.iter().enumerate().skip(step % per_epoch) {
            if step >= stop {
                break;
            }
            let results: Vec<Result<Option<ExampleGrads>>> = batch
                .par_iter()
                .map(|&i| {
                    let ex = corpus.load(i)?;
                    if has_silent_source(&ex) {
                        return Ok(None);
                    }
                    example_gradients(model, &ex, cfg.loss_floor).map(Some)
                })
                .collect();
            let mut loss_sum = 0.0;
            let mut losses = Vec::new();
            let mut grads: Option<Vec<Vec<f64>>> = None;
            for (r, &i) in results.into_iter().zip(batch) {
                let Some((l, g)) = r? else {
                    let id = corpus.entries()[i].id.clone();
                    log::warn!("skipping {id}: a reference source has zero power");
                    log.skipped.push(id);
                    continue;
                };
                loss_sum += l;
                losses.push(l);
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&g) {
                            a.iter_mut().zip(x).for_each(|(a, x)| *a += x);
                        }
                    }
                }
            }
            let Some(mut grads) = grads else {
                step += 1;
                state.step += 1;
                continue;
            };
            let n = losses.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            let loss = loss_sum / n;
            if !loss.is_finite() || !global_norm(&grads).is_finite() {
                if let Some(dir) = out {
                    let ids: Vec<&str> = batch.iter().map(|&i| corpus.entries()[i].id.as_str()).collect();
                    let dump = serde_json::json!({ "step": step, "epoch": epoch, "batch": b, "examples": ids, "losses": losses });
                    std::fs::write(dir.join(NAN_DUMP_FILE), serde_json::to_string_pretty(&dump)?)?;
                }
                return Err(Error::NonFiniteLoss { step, batch_id: b, examples: batch.to_vec() });
            }
            optimizer_step(model.store_mut(), &mut grads, &mut state, &cfg.adam)?;
            step += 1;
            log.rows.push(LogRow { step, epoch, loss, val_si_sdri: None });
            log::debug!("step {step} epoch {epoch} loss {loss:.4}");

            if let Some(dir) = out {
                if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
                    save_state(model, &state, best, dir)?;
                }
            }
        }

        let epoch_done = step.is_multiple_of(per_epoch);
        if epoch_done && ((epoch + 1).is_multiple_of(cfg.eval_every) || step >= total) {
            let val_idx = limited(corpus.indices(Split::Val), cfg.val_limit);
            if !val_idx.is_empty() {
                let (val, _) = evaluate_indices(model, corpus, &val_idx)?.si_sdri();
                log::info!("epoch {epoch}: validation SI-SDRi {val:.3} dB");
                if let Some(row) = log.rows.last_mut() {
                    row.val_si_sdri = Some(val);
                }
                if best.is_none_or(|b| val > b) {
                    best = Some(val);
                    if let Some(dir) = out {
                        save_params(model.store(), &dir.join(BEST_FILE))?;
                    }
                }
            }
        }
    }

    if let Some(dir) = out {
        save_state(model, &state, best, dir)?;
        save_params(model.store(), &dir.join(FINAL_FILE))?;
    }
    log.best_val_si_sdri = best;
    log.wall_seconds = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Scores `model` on the given manifest positions, in order.
pub fn evaluate_indices(model: &BinModel, corpus: &Corpus, indices: &[usize]) -> Result<MetricReport> {
    let scored: Vec<Result<MetricReport>> = indices
        .par_iter()
        .map(|&i| {
            let ex = corpus.load(i)?;
            let est = model.separate(&ex.mixture, &ex.cues)?;
            score(&ex, &est)
        })
        .collect();
    let mut report = MetricReport::default();
    for r in scored {
        report.scores.extend(r?.scores);
    }
    Ok(report)
}

fn score(ex: &AvsExample, est: &crate::tensor::Tensor) -> Result<MetricReport> {
    let m = ex.sources.shape()[0];
    let mut r = MetricReport::default();
    let ests: Vec<&[f64]> = (0..m).map(|i| est.row_data(i)).collect();
    let refs: Vec<&[f64]> = (0..m).map(|i| ex.source(i)).collect();
    r.push_example(&ex.id, &ests, &refs, ex.mixture.data())?;
    Ok(r)
}

/// Scores a split (optionally only its first `limit` examples).
pub fn evaluate(model: &BinModel, corpus: &Corpus, split: Split, limit: usize) -> Result<MetricReport> {
    evaluate_indices(model, corpus, &limited(corpus.indices(split), limit))
}

/// Scores the mixture itself as the estimate; the improvement is 0 by definition.
pub fn evaluate_mixture(corpus: &Corpus, split: Split, limit: usize) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for i in limited(corpus.indices(split), limit) {
        let ex = corpus.load(i)?;
        let m = ex.sources.shape()[0];
        let mix = ex.mixture.data();
        let ests = vec![mix; m];
        let refs: Vec<&[f64]> = (0..m).map(|s| ex.source(s)).collect();
        report.push_example(&ex.id, &ests, &refs, mix)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// 1-based fusion iteration.
    pub iteration: usize,
    pub si_sdri_mean: f64,
    pub si_sdri_std: f64,
}

/// Mean and spread of SI-SDRi when decoding each intermediate iteration's mask.
pub fn iteration_trace(model: &BinModel, corpus: &Corpus, split: Split, limit: usize) -> Result<Vec<TraceRow>> {
    let idx = limited(corpus.indices(split), limit);
    let per_example: Vec<Result<Vec<Vec<f64>>>> = idx
        .par_iter()
        .map(|&i| {
            let ex = corpus.load(i)?;
            let outs = model.separate_per_iteration(&ex.mixture, &ex.cues)?;
            outs.iter()
                .map(|est| {
                    (0..ex.sources.shape()[0])
                        .map(|s| si_sdri(est.row_data(s), ex.source(s), ex.mixture.data()))
                        .collect::<Result<Vec<_>>>()
                })
                .collect()
        })
        .collect();
    let r = model.config().iterations;
    let mut by_iter = vec![Vec::new(); r];
    for ex in per_example {
        for (it, vals) in ex?.into_iter().enumerate() {
            by_iter[it].extend(vals);
        }
    }
    Ok(by_iter
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (mean, std) = mean_std(v);
            TraceRow { iteration: i + 1, si_sdri_mean: mean, si_sdri_std: std }
        })
        .collect())
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,si_sdri_mean,si_sdri_std\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.si_sdri_mean, r.si_sdri_std));
    }
    out
}
