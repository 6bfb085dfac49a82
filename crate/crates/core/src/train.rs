//! Optimization recipe: Adam, inverse-square-root schedule, global-norm
//! clipping, label-smoothed cross-entropy, token-budget batching and
//! patience-based early stopping on dev BLEU.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::adapters::Strategy;
use crate::checkpoint::{self, TensorRecord};
use crate::corpus::{ParallelPair, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{bleu, chrfpp, ChrFConfig};
use crate::model::{DecodeConfig, Dropout, TransformerModel, BOS, EOS};
use crate::numerics::{finite_diff_check, ParamStore, RngStream, Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub max_tokens_per_batch: usize,
    pub checkpoint_every: usize,
    pub eval_beam: usize,
    pub patience: usize,
    /// Hard step cap; `None` trains until the patience rule fires.
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Finetune,
    Scratch,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Finetune => "finetune",
            Preset::Scratch => "scratch",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Preset::Finetune),
            "scratch" => Ok(Preset::Scratch),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected finetune|scratch)"
            ))),
        }
    }
}

impl TrainConfig {
    /// Full fine-tuning recipe.
    pub fn finetune_fft() -> Self {
        TrainConfig {
            base_lr: 6e-5,
            warmup_steps: 2000,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-8,
            clip_norm: 1.0,
            label_smoothing: 0.1,
            dropout: 0.2,
            max_tokens_per_batch: 4096,
            checkpoint_every: 1000,
            eval_beam: 5,
            patience: 10,
            max_steps: None,
        }
    }

    /// Adapter fine-tuning recipe.
    pub fn finetune_lora() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            adam_betas: (0.9, 0.999),
            label_smoothing: 0.0,
            dropout: 0.0,
            ..Self::finetune_fft()
        }
    }

    pub fn scratch() -> Self {
        TrainConfig {
            base_lr: 7e-4,
            warmup_steps: 4000,
            ..Self::finetune_fft()
        }
    }

    pub fn finetune(strategy: Strategy) -> Self {
        match strategy {
            Strategy::Fft => Self::finetune_fft(),
            Strategy::Lora | Strategy::MinLora => Self::finetune_lora(),
        }
    }

    pub fn preset(preset: Preset, strategy: Strategy) -> Self {
        match preset {
            Preset::Finetune => Self::finetune(strategy),
            Preset::Scratch => Self::scratch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} not in [0, 1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if self.checkpoint_every == 0 || self.eval_beam == 0 || self.max_tokens_per_batch == 0 {
            return bad("checkpoint_every, eval_beam and max_tokens_per_batch must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then decay with the inverse square root of the step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::Usage("learning-rate steps are numbered from 1".into()));
    }
    let (s, w) = (step as f64, cfg.warmup_steps as f64);
    Ok(if step <= cfg.warmup_steps {
        cfg.base_lr * s / w
    } else {
        cfg.base_lr * (w / s).sqrt()
    })
}

/// Token-mean label-smoothed cross-entropy of `logits: [batch, len, vocab]`
/// against `targets`, ignoring positions past each target's length.
pub fn smoothed_ce<T: Scalar>(logits: &Tensor<T>, targets: &[Vec<usize>], epsilon: f64) -> Result<f64> {
    let (batch, len) = match logits.shape() {
        [b, l, _] => (*b, *l),
        s => return Err(Error::dims("smoothed_ce", s, &[targets.len()])),
    };
    if batch != targets.len() {
        return Err(Error::dims("smoothed_ce", logits.shape(), &[targets.len()]));
    }
    let flat = padded_targets(targets, len);
    let mut tape = Tape::<T>::inference();
    let x = tape.constant(logits.clone());
    let loss = tape.smoothed_ce(x, &flat, epsilon)?;
    Ok(tape.value(loss).data()[0].to_f64())
}

fn padded_targets(targets: &[Vec<usize>], len: usize) -> Vec<Option<usize>> {
    targets
        .iter()
        .flat_map(|t| (0..len).map(move |i| t.get(i).copied()))
        .collect()
}

/// Adam moments keyed by parameter position.
#[derive(Debug, Clone, Default)]
pub struct OptimState<T> {
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

/// Names of frozen parameters that carried a gradient and were left alone.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdamReport {
    pub flagged: Vec<String>,
}

/// One bias-corrected Adam update of every trainable parameter from its stored gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<AdamReport> {
    let mut report = AdamReport::default();
    for (_, p) in params.iter() {
        if p.trainable && p.grad.is_none() {
            return Err(Error::Usage(format!("no gradient for trainable parameter `{}`", p.name)));
        }
    }
    let n = params.len();
    state.m.resize(n, None);
    state.v.resize(n, None);
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = cfg.adam_betas;
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::ONE - b1, T::ONE - b2);
    let step_size = T::from_f64(lr / c1);
    let inv_c2 = T::from_f64(1.0 / c2);
    let eps = T::from_f64(cfg.adam_eps);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = p.grad.as_ref() else { continue };
        if !p.trainable {
            report.flagged.push(p.name.clone());
            continue;
        }
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
        if m.shape() != g.shape() {
            return Err(Error::dims("adam_step", m.shape(), g.shape()));
        }
        let w = p.value.data_mut();
        for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *w -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(report)
}

/// Scales every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns the applied scale.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut Tensor<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        sq += g.data().iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if !(norm > max_norm) {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = T::from_f64(scale);
    for g in grads.iter_mut() {
        for x in g.data_mut() {
            *x *= s;
        }
    }
    scale
}

/// Clips the stored gradients of trainable parameters.
pub fn clip_param_grads<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let mut grads: Vec<&mut Tensor<T>> = params
        .iter_mut()
        .filter(|p| p.trainable)
        .filter_map(|p| p.grad.as_mut())
        .collect();
    clip_global_norm(&mut grads, max_norm)
}

/// Optimizer state lives beside the model checkpoint, never inside it.
pub fn save_optim<T: Scalar>(params: &ParamStore<T>, state: &OptimState<T>, path: &Path) -> Result<()> {
    let mut named = Vec::new();
    for (i, (_, p)) in params.iter().enumerate() {
        if let (Some(Some(m)), Some(Some(v))) = (state.m.get(i), state.v.get(i)) {
            named.push((format!("m.{}", p.name), m));
            named.push((format!("v.{}", p.name), v));
        }
    }
    let refs: Vec<(&str, &Tensor<T>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let (tensors, payload) = checkpoint::encode_payload(&refs);
    let manifest = OptimManifest {
        step: state.step,
        tensors,
    };
    checkpoint::write_container(path, checkpoint::OPTIM_MAGIC, &serde_json::to_vec(&manifest)?, &payload)
}

pub fn load_optim<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<OptimState<T>> {
    let (mbytes, payload) = checkpoint::read_container(path, checkpoint::OPTIM_MAGIC)?;
    let manifest: OptimManifest =
        serde_json::from_slice(&mbytes).map_err(|e| Error::CorruptHeader(format!("optimizer manifest: {e}")))?;
    checkpoint::verify(&manifest.tensors, &payload)?;
    let mut state = OptimState {
        step: manifest.step,
        m: vec![None; params.len()],
        v: vec![None; params.len()],
    };
    for rec in &manifest.tensors {
        let (slot, name) = rec
            .name
            .split_once('.')
            .ok_or_else(|| Error::CorruptHeader(format!("optimizer tensor `{}`", rec.name)))?;
        let id = params
            .id(name)
            .ok_or_else(|| Error::Integrity(format!("optimizer state for unknown parameter `{name}`")))?;
        let bytes = &payload[rec.byte_offset as usize..(rec.byte_offset + rec.byte_length) as usize];
        let t = checkpoint::decode_tensor(rec, bytes);
        match slot {
            "m" => state.m[id.index()] = Some(t),
            "v" => state.v[id.index()] = Some(t),
            _ => return Err(Error::CorruptHeader(format!("optimizer tensor `{}`", rec.name))),
        }
    }
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct OptimManifest {
    step: u64,
    tensors: Vec<TensorRecord>,
}

/// A tokenized training pair. `src` is complete (including EOS); `tgt` holds
/// only the content tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Example {
    pub fn from_pair(pair: &ParallelPair, src_vocab: &Vocab, tgt_vocab: &Vocab, tags: &[&str]) -> Result<Self> {
        Ok(Example {
            src: src_vocab.encode_source(&pair.src, tags)?,
            tgt: tgt_vocab.encode(&pair.tgt),
        })
    }

    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.tgt.iter().copied()).collect()
    }

    pub fn decoder_target(&self) -> Vec<usize> {
        self.tgt.iter().copied().chain(std::iter::once(EOS)).collect()
    }

    /// Padded token cost of this example inside a batch.
    fn width(&self) -> usize {
        self.src.len().max(self.tgt.len() + 1)
    }
}

/// Shuffles `examples` with `rng` and cuts batches whose padded size
/// (`count × longest`) stays within `max_tokens`. An example wider than the
/// budget forms a batch of its own.
pub fn token_batches(examples: &[Example], max_tokens: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut widest = 0;
    for i in order {
        let w = examples[i].width();
        let new_widest = widest.max(w);
        if !cur.is_empty() && new_widest * (cur.len() + 1) > max_tokens {
            batches.push(std::mem::take(&mut cur));
            widest = w;
        } else {
            widest = new_widest;
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub clip_scale: f64,
    pub tokens: usize,
}

/// Forward, backward, clip and Adam on one batch. `step` counts from 1.
pub fn train_step<T: Scalar>(
    model: &mut TransformerModel<T>,
    batch: &[&Example],
    optim: &mut OptimState<T>,
    step: usize,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<StepStats> {
    let src: Vec<Vec<usize>> = batch.iter().map(|e| e.src.clone()).collect();
    let tgt_in: Vec<Vec<usize>> = batch.iter().map(|e| e.decoder_input()).collect();
    let tgt_out: Vec<Vec<usize>> = batch.iter().map(|e| e.decoder_target()).collect();
    let len = tgt_in.iter().map(Vec::len).max().unwrap_or(0);
    let targets = padded_targets(&tgt_out, len);
    let tokens = tgt_out.iter().map(Vec::len).sum();

    let adapter_rate = model.adapters().map(|a| a.lora.dropout).unwrap_or(0.0);
    let (loss, grads) = {
        let mut drop = if cfg.dropout > 0.0 || adapter_rate > 0.0 {
            Some(Dropout {
                rate: cfg.dropout,
                adapter_rate,
                rng: &mut *rng,
            })
        } else {
            None
        };
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &src, &tgt_in, &mut drop)?;
        let loss = tape.smoothed_ce(logits, &targets, cfg.label_smoothing)?;
        let value = tape.value(loss).data()[0].to_f64();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        (value, tape.backward(loss)?)
    };
    let params = model.params_mut();
    params.set_grads(grads);
    let clip_scale = clip_param_grads(params, cfg.clip_norm);
    let lr = lr_at(step, cfg)?;
    adam_step(params, optim, lr, cfg)?;
    params.zero_grads();
    Ok(StepStats {
        loss,
        lr,
        clip_scale,
        tokens,
    })
}

/// Worst relative error between tape gradients of the smoothed loss on
/// `batch` and central differences at `samples` random trainable scalars.
pub fn gradcheck_model(
    model: &mut TransformerModel<f64>,
    batch: &[Example],
    label_smoothing: f64,
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let src: Vec<Vec<usize>> = batch.iter().map(|e| e.src.clone()).collect();
    let tgt_in: Vec<Vec<usize>> = batch.iter().map(|e| e.decoder_input()).collect();
    let tgt_out: Vec<Vec<usize>> = batch.iter().map(|e| e.decoder_target()).collect();
    let len = tgt_in.iter().map(Vec::len).max().unwrap_or(0);
    let targets = padded_targets(&tgt_out, len);
    let config = model.config().clone();
    let adapters = model.adapters().cloned();
    let forward = |store: &ParamStore<f64>| {
        let m = TransformerModel::from_parts(config.clone(), store.clone(), adapters.clone())?;
        let mut tape = Tape::new();
        let logits = m.forward(&mut tape, &src, &tgt_in, &mut None)?;
        let loss = tape.smoothed_ce(logits, &targets, label_smoothing)?;
        let value = tape.value(loss).data()[0];
        Ok((value, tape.backward(loss)?))
    };
    finite_diff_check(model.params_mut(), forward, 1e-5, samples, rng)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EarlyStopState {
    pub best_dev_score: Option<f64>,
    pub best_step: usize,
    pub evals_since_best: usize,
}

impl EarlyStopState {
    /// Records a dev score; returns true if it is a strict improvement.
    /// Ties keep the earlier checkpoint.
    pub fn update(&mut self, step: usize, score: f64) -> bool {
        match self.best_dev_score {
            Some(best) if score <= best => {
                self.evals_since_best += 1;
                false
            }
            _ => {
                self.best_dev_score = Some(score);
                self.best_step = step;
                self.evals_since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.evals_since_best >= patience
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_bleu: f64,
    pub dev_chrfpp: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tlr\ttrain_loss\tdev_bleu\tdev_chrfpp\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{:.6e}\t{:.6}\t{:.4}\t{:.4}\n",
                r.step, r.lr, r.train_loss, r.dev_bleu, r.dev_chrfpp
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// How dev hypotheses are produced and turned into text.
pub struct DevOptions<'v> {
    /// Detokenizer for scoring; ids joined by spaces when absent.
    pub vocab: Option<&'v Vocab>,
    /// Checkpoints land here as `step{N}.ckpt` and `best.ckpt` along with `train_log.tsv`.
    pub out_dir: Option<PathBuf>,
}

impl Default for DevOptions<'_> {
    fn default() -> Self {
        DevOptions {
            vocab: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the best dev evaluation.
    pub model: TransformerModel<T>,
    pub log: TrainLog,
    pub best_step: usize,
    pub best_bleu: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Decodes `dev` with the configured beam and returns `(bleu, chrfpp)`.
pub fn evaluate_dev<T: Scalar>(
    model: &TransformerModel<T>,
    dev: &[Example],
    beam: usize,
    vocab: Option<&Vocab>,
) -> Result<(f64, f64)> {
    let text = |ids: &[usize]| match vocab {
        Some(v) => v.decode(ids),
        None => ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "),
    };
    let dcfg = DecodeConfig::with_beam(beam);
    let outs = if beam == 1 {
        let srcs: Vec<Vec<usize>> = dev.iter().map(|e| e.src.clone()).collect();
        model.greedy_decode_batch(&srcs, &dcfg)?
    } else {
        dev.iter()
            .map(|ex| model.beam_search(&ex.src, &dcfg))
            .collect::<Result<Vec<_>>>()?
    };
    let hyps: Vec<String> = outs.iter().map(|o| text(o)).collect();
    let refs: Vec<String> = dev.iter().map(|e| text(&e.tgt)).collect();
    Ok((bleu(&hyps, &refs)?, chrfpp(&hyps, &refs, &ChrFConfig::default())?))
}

/// Trains until the patience rule fires or `max_steps` is reached, then
/// returns the parameters of the best dev checkpoint.
pub fn train_loop<T: Scalar>(
    mut model: TransformerModel<T>,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    rng: &mut RngStream,
    opts: &DevOptions,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::Usage("dev set is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut batch_rng = rng.fork("batches");
    let mut drop_rng = rng.fork("dropout");
    let mut optim = OptimState::default();
    let mut stop = EarlyStopState::default();
    let mut log = TrainLog::default();
    let mut best = model.params().clone();
    let mut step = 0usize;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut stopped_early = false;

    'outer: loop {
        for batch in token_batches(train, cfg.max_tokens_per_batch, &mut batch_rng) {
            step += 1;
            let refs: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
            let stats = train_step(&mut model, &refs, &mut optim, step, cfg, &mut drop_rng)?;
            loss_sum += stats.loss;
            loss_n += 1;
            let capped = cfg.max_steps.is_some_and(|m| step >= m);
            if step % cfg.checkpoint_every == 0 || capped {
                let (b, c) = evaluate_dev(&model, dev, cfg.eval_beam, opts.vocab)?;
                log.rows.push(LogRow {
                    step,
                    lr: stats.lr,
                    train_loss: loss_sum / loss_n as f64,
                    dev_bleu: b,
                    dev_chrfpp: c,
                });
                (loss_sum, loss_n) = (0.0, 0);
                let improved = stop.update(step, b);
                info!("step {step} loss {:.4} dev bleu {b:.2} chrf++ {c:.2}", log.rows.last().unwrap().train_loss);
                if improved {
                    best = model.params().clone();
                }
                if let Some(dir) = &opts.out_dir {
                    checkpoint::save(&model, &dir.join(format!("step{step}.ckpt")))?;
                    save_optim(model.params(), &optim, &dir.join(format!("step{step}.optim")))?;
                    if improved {
                        checkpoint::save(&model, &dir.join("best.ckpt"))?;
                    }
                    log.write(&dir.join("train_log.tsv"))?;
                }
                if stop.should_stop(cfg.patience) {
                    stopped_early = true;
                    break 'outer;
                }
            }
            if capped {
                break 'outer;
            }
        }
    }
    *model.params_mut() = best;
    Ok(TrainOutcome {
        model,
        log,
        best_step: stop.best_step,
        best_bleu: stop.best_dev_score.unwrap_or(0.0),
        steps: step,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::finetune_fft();
        assert!((lr_at(1, &cfg).unwrap() - 3e-8).abs() < 1e-12);
        assert!((lr_at(2000, &cfg).unwrap() - 6e-5).abs() < 1e-12);
        assert!((lr_at(8000, &cfg).unwrap() - 3e-5).abs() < 1e-12);
        assert!(matches!(lr_at(0, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn presets() {
        let l = TrainConfig::finetune_lora();
        assert_eq!((l.base_lr, l.adam_betas, l.label_smoothing, l.dropout), (1e-4, (0.9, 0.999), 0.0, 0.0));
        let s = TrainConfig::scratch();
        assert_eq!((s.base_lr, s.warmup_steps, s.adam_betas), (7e-4, 4000, (0.9, 0.98)));
        assert_eq!((s.checkpoint_every, s.eval_beam, s.patience), (1000, 5, 10));
    }

    #[test]
    fn hand_smoothed_ce() {
        let logits = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let got = smoothed_ce(&logits, &[vec![0]], 0.1).unwrap();
        let want = 0.9 * -(0.9f64.ln()) + 0.1 * -(0.9f64.ln() + 0.1f64.ln()) / 2.0;
        assert!((got - want).abs() < 1e-12);
        assert!((want - 0.2152).abs() < 1e-4);
        assert!(matches!(smoothed_ce(&logits, &[vec![]], 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn adam_first_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::scalar(0.0)).unwrap();
        store.get_mut(id).grad = Some(Tensor::scalar(1.0));
        let cfg = TrainConfig {
            adam_betas: (0.9, 0.999),
            ..TrainConfig::finetune_fft()
        };
        adam_step(&mut store, &mut OptimState::default(), 0.1, &cfg).unwrap();
        assert!((store.get(id).value.data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_frozen_and_missing() {
        let cfg = TrainConfig::finetune_fft();
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::scalar(1.0)).unwrap();
        store.get_mut(a).trainable = false;
        store.get_mut(a).grad = Some(Tensor::scalar(5.0));
        let b = store.insert("b", Tensor::scalar(1.0)).unwrap();
        store.get_mut(b).grad = Some(Tensor::scalar(0.0));
        let rep = adam_step(&mut store, &mut OptimState::default(), 0.1, &cfg).unwrap();
        assert_eq!(rep.flagged, ["a"]);
        assert_eq!(store.get(a).value.data()[0], 1.0);
        assert_eq!(store.get(b).value.data()[0], 1.0);
        store.get_mut(b).grad = None;
        assert!(matches!(
            adam_step(&mut store, &mut OptimState::default(), 0.1, &cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn clipping() {
        let mut g = Tensor::<f64>::from_f64(&[2], &[0.3, 0.4]).unwrap();
        assert_eq!(clip_global_norm(&mut [&mut g], 1.0), 1.0);
        let mut g = Tensor::<f64>::from_f64(&[2], &[0.0, 4.0]).unwrap();
        assert_eq!(clip_global_norm(&mut [&mut g], 1.0), 0.25);
        let mut z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(clip_global_norm(&mut [&mut z], 1.0), 1.0);
    }

    #[test]
    fn patience_counter() {
        let mut s = EarlyStopState::default();
        let mut evals = 0;
        for (i, score) in (0..100).map(|i| (i, 50.0 - i as f64)) {
            s.update(i, score);
            evals += 1;
            if s.should_stop(10) {
                break;
            }
        }
        assert_eq!(evals, 11);
        assert_eq!(s.best_step, 0);
        let mut t = EarlyStopState::default();
        t.update(1, 5.0);
        t.update(2, 5.0);
        assert_eq!(t.best_step, 1);
    }

    #[test]
    fn batching_respects_budget() {
        let ex: Vec<Example> = (1..30)
            .map(|n| Example {
                src: vec![4; n],
                tgt: vec![5; n],
            })
            .collect();
        let batches = token_batches(&ex, 64, &mut RngStream::new(0, 0));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..29).collect::<Vec<_>>());
        for b in &batches {
            let w = b.iter().map(|&i| ex[i].width()).max().unwrap();
            assert!(b.len() == 1 || w * b.len() <= 64);
        }
    }
}
