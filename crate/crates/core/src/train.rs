//! Teacher-forced training: the half-L1 / half-MSE composite loss, Adam
//! with exponential learning-rate decay, metrics logging, and
//! checkpointing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{
    decoder_forward, encoder_forward, register_params, ModelConfig, ModelState,
};
use crate::scalar::Real;
use crate::seq::{
    attention_bias, build_batch, causal_bias, loss_mask, make_special_tokens, UtterancePair,
};
use crate::sub_seed;
use crate::tensor::Tensor;

/// Gradients plus the three loss values produced by one forward/backward.
type StepOutcome<T> = (BTreeMap<String, Tensor<T>>, f64, f64, f64);

/// Whether losses are the literal raw sums or divided by the number of
/// scored elements. Raw sums match the defining equations; per-element
/// normalization keeps magnitudes comparable across batch compositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Normalized,
    RawSum,
}

/// Optimizer and loop settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_step: f64,
    pub decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub loss_mode: LossMode,
    /// Floor the decay exponent instead of decaying continuously.
    pub staircase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay_step: 4000.0,
            decay_rate: 0.96,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            batch_size: 8,
            max_steps: 20_000,
            seed: 0,
            checkpoint_every: 1000,
            loss_mode: LossMode::Normalized,
            staircase: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config {
                key: "decay_rate".into(),
                detail: format!("{} outside (0, 1]", self.decay_rate),
            });
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config {
                key: "betas".into(),
                detail: format!("beta1 {} / beta2 {} outside [0, 1)", self.beta1, self.beta2),
            });
        }
        if self.decay_step <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config {
                key: "train".into(),
                detail: "decay_step and batch_size must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Learning rate at a step: `lr0 * decay_rate^(step / decay_step)` with a
/// real-valued exponent (floored when staircase mode is on).
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let mut exponent = step as f64 / cfg.decay_step;
    if cfg.staircase {
        exponent = exponent.floor();
    }
    cfg.lr0 * cfg.decay_rate.powf(exponent)
}

fn count_scored<T: Real>(g: &Graph<T>, y_true: Var, mask: Option<Var>) -> f64 {
    match mask {
        None => g.value(y_true).numel() as f64,
        Some(m) => {
            let frames: f64 = g.value(m).data().iter().map(|v| v.to_f64_c()).sum();
            frames * g.value(y_true).last_dim() as f64
        }
    }
}

fn masked_diff<T: Real>(g: &mut Graph<T>, y_true: Var, y_pred: Var, mask: Option<Var>) -> Result<Var> {
    let diff = g.sub(y_pred, y_true)?;
    match mask {
        Some(m) => g.mul(diff, m),
        None => Ok(diff),
    }
}

/// Sum of absolute differences over scored elements.
pub fn loss_l1<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    y_pred: Var,
    mask: Option<Var>,
    mode: LossMode,
) -> Result<Var> {
    let diff = masked_diff(g, y_true, y_pred, mask)?;
    let a = g.abs(diff)?;
    let raw = g.sum_all(a)?;
    match mode {
        LossMode::RawSum => Ok(raw),
        LossMode::Normalized => {
            let n = count_scored(g, y_true, mask).max(1.0);
            g.mul_scalar(raw, T::from_f64_c(1.0 / n))
        }
    }
}

/// Half the sum of squared differences over scored elements.
pub fn loss_mse<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    y_pred: Var,
    mask: Option<Var>,
    mode: LossMode,
) -> Result<Var> {
    let diff = masked_diff(g, y_true, y_pred, mask)?;
    let sq = g.square(diff)?;
    let sum = g.sum_all(sq)?;
    let raw = g.mul_scalar(sum, T::from_f64_c(0.5))?;
    match mode {
        LossMode::RawSum => Ok(raw),
        LossMode::Normalized => {
            let n = count_scored(g, y_true, mask).max(1.0);
            g.mul_scalar(raw, T::from_f64_c(1.0 / n))
        }
    }
}

/// The three loss terms for one batch.
pub struct LossBundle {
    pub total: Var,
    pub l1: Var,
    pub mse: Var,
}

/// Composite objective: `0.5·L1 + 0.5·MSE`.
pub fn loss_final<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    y_pred: Var,
    mask: Option<Var>,
    mode: LossMode,
) -> Result<LossBundle> {
    let l1 = loss_l1(g, y_true, y_pred, mask, mode)?;
    let mse = loss_mse(g, y_true, y_pred, mask, mode)?;
    let half = T::from_f64_c(0.5);
    let hl1 = g.mul_scalar(l1, half)?;
    let hmse = g.mul_scalar(mse, half)?;
    let total = g.add(hl1, hmse)?;
    Ok(LossBundle { total, l1, mse })
}

/// Bias-corrected Adam update, applied in place. Checks every gradient
/// for finiteness before touching any state so a poisoned step aborts
/// cleanly.
pub fn adam_step<T: Real>(
    state: &mut ModelState<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::non_finite(format!("gradient of {name}")));
        }
    }
    let t = state.step + 1;
    let b1 = T::from_f64_c(cfg.beta1);
    let b2 = T::from_f64_c(cfg.beta2);
    let one = T::one();
    let eps = T::from_f64_c(cfg.epsilon);
    let lr_t = T::from_f64_c(lr);
    let bias1 = one - T::from_f64_c(cfg.beta1.powi(t as i32));
    let bias2 = one - T::from_f64_c(cfg.beta2.powi(t as i32));

    let names: Vec<String> = state.params.keys().cloned().collect();
    for name in names {
        let grad = grads
            .get(&name)
            .ok_or_else(|| Error::shape("adam_step", format!("no gradient for {name}")))?;
        let shape = state.params[&name].shape().to_vec();
        let m = state
            .opt_m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        for (mv, &gv) in m.data_mut().iter_mut().zip(grad.data()) {
            *mv = b1 * *mv + (one - b1) * gv;
        }
        let v = state
            .opt_v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        for (vv, &gv) in v.data_mut().iter_mut().zip(grad.data()) {
            *vv = b2 * *vv + (one - b2) * gv * gv;
        }
        let m = &state.opt_m[&name];
        let v = &state.opt_v[&name];
        let p = state.params.get_mut(&name).unwrap();
        for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mv / bias1;
            let v_hat = vv / bias2;
            *pv -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_final: f64,
    pub loss_l1: f64,
    pub loss_mse: f64,
}

/// Output locations for a training run; both are optional so library
/// callers can train purely in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainSink {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Deterministic without-replacement batch sampler: a shuffled epoch
/// queue, reshuffled whenever it runs dry.
struct EpochSampler {
    order: Vec<usize>,
    next: usize,
    rng: ChaCha8Rng,
    n: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: Vec::new(),
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.next = 0;
    }

    fn draw(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.next >= self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.next]);
            self.next += 1;
        }
        out
    }
}

fn write_metrics_header(w: &mut BufWriter<File>, path: &Path) -> Result<()> {
    w.write_all(b"step,lr,loss_final,loss_l1,loss_mse\n")
        .map_err(|e| Error::io(path, e))
}

fn mean_target_frame<T: Real>(pairs: &[UtterancePair<T>], dim: usize) -> Tensor<T> {
    let mut acc = vec![0.0f64; dim];
    let mut frames = 0usize;
    for p in pairs {
        for t in 0..p.target_frames() {
            for (a, &v) in acc.iter_mut().zip(p.target_mag.row(t)) {
                *a += v.to_f64_c();
            }
        }
        frames += p.target_frames();
    }
    if frames > 0 {
        for a in &mut acc {
            *a /= frames as f64;
        }
    }
    Tensor::new(vec![dim], acc.iter().map(|&v| T::from_f64_c(v)).collect()).expect("mean frame")
}

fn checkpoint_to<T: Real>(dir: &Path, name: &str, state: &ModelState<T>) -> Result<()> {
    checkpoint::save(state, &dir.join(name))
}

/// Teacher-forced training over utterance pairs. Every source of
/// randomness (tokens, init, dropout, batch order) derives from the run
/// seed, so a rerun at the same thread count reproduces the metrics file
/// byte for byte. A non-finite loss or gradient checkpoints the last good
/// state and halts.
pub fn train_loop<T: Real>(
    pairs: &[UtterancePair<T>],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sink: &TrainSink,
) -> Result<(ModelState<T>, Vec<StepMetrics>)> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dim = model_cfg.d_model;
    for p in pairs {
        if p.source_mag.shape()[1] != dim || p.target_mag.shape()[1] != dim {
            return Err(Error::shape(
                "train_loop",
                format!(
                    "pair {} has feature width {}, model wants {}",
                    p.text_label,
                    p.source_mag.shape()[1],
                    dim
                ),
            ));
        }
    }

    let tokens = make_special_tokens::<T>(sub_seed(train_cfg.seed, "tokens"), dim);
    let max_tgt = pairs.iter().map(|p| p.target_frames()).max().unwrap_or(0);
    let mut cfg = model_cfg.clone();
    // decode cap: corpus maximum target length plus headroom
    cfg.max_decode_len = max_tgt + 16;
    let mut state = ModelState::init(cfg, tokens, sub_seed(train_cfg.seed, "init"))?;
    state.mean_frame = mean_target_frame(pairs, dim);

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sub_seed(train_cfg.seed, "dropout"));
    let mut sampler = EpochSampler::new(pairs.len(), sub_seed(train_cfg.seed, "batches"));

    let mut metrics_file = match &sink.metrics_path {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            write_metrics_header(&mut w, p)?;
            Some((w, p.clone()))
        }
        None => None,
    };
    let mut metrics = Vec::new();

    for step in 0..train_cfg.max_steps {
        let idx = sampler.draw(train_cfg.batch_size.min(pairs.len()));
        let chosen: Vec<&UtterancePair<T>> = idx.iter().map(|&i| &pairs[i]).collect();
        let batch = build_batch(&chosen, &state.tokens)?;

        let outcome = (|| -> Result<StepOutcome<T>> {
            let mut g = Graph::new();
            let params = register_params(&mut g, &state, true);
            let enc_in = g.constant(batch.encoder_input.clone());
            let dec_in = g.constant(batch.decoder_input.clone());
            let dec_tgt = g.constant(batch.decoder_target.clone());
            let src_bias = g.constant(attention_bias::<T>(&batch.src_pad_mask));
            let tgt_bias = g.constant(attention_bias::<T>(&batch.tgt_pad_mask));
            let causal = g.constant(causal_bias::<T>(batch.decoder_input.shape()[1]));
            let lmask = g.constant(loss_mask::<T>(&batch.tgt_pad_mask));

            let memory = encoder_forward(
                &mut g,
                &params,
                enc_in,
                &[src_bias],
                &state.config,
                true,
                &mut dropout_rng,
            )?;
            let pred = decoder_forward(
                &mut g,
                &params,
                dec_in,
                memory,
                &[causal, tgt_bias],
                &[src_bias],
                &state.config,
                true,
                &mut dropout_rng,
            )?;
            let bundle = loss_final(
                &mut g,
                dec_tgt,
                pred,
                Some(lmask),
                train_cfg.loss_mode,
            )?;
            g.backward(bundle.total)?;

            let grads = params
                .iter()
                .map(|(name, &var)| {
                    let grad = g.grad(var).expect("trainable parameter has grad");
                    (name.clone(), grad)
                })
                .collect();
            Ok((
                grads,
                g.value(bundle.total).data()[0].to_f64_c(),
                g.value(bundle.l1).data()[0].to_f64_c(),
                g.value(bundle.mse).data()[0].to_f64_c(),
            ))
        })();

        let (grads, total, l1, mse) = match outcome {
            Ok(v) => v,
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(dir) = &sink.checkpoint_dir {
                    checkpoint_to(dir, "ckpt_halt.vfvc", &state)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };

        let lr = lr_at(step, train_cfg);
        if let Err(e @ Error::NonFinite { .. }) = adam_step(&mut state, &grads, lr, train_cfg) {
            if let Some(dir) = &sink.checkpoint_dir {
                checkpoint_to(dir, "ckpt_halt.vfvc", &state)?;
            }
            return Err(e);
        }

        let row = StepMetrics {
            step,
            lr,
            loss_final: total,
            loss_l1: l1,
            loss_mse: mse,
        };
        if let Some((w, p)) = &mut metrics_file {
            writeln!(w, "{},{},{},{},{}", row.step, row.lr, row.loss_final, row.loss_l1, row.loss_mse)
                .map_err(|e| Error::io(p.as_path(), e))?;
        }
        metrics.push(row);

        if train_cfg.checkpoint_every > 0 && (step + 1) % train_cfg.checkpoint_every == 0 {
            if let Some(dir) = &sink.checkpoint_dir {
                checkpoint_to(dir, &format!("ckpt_step{}.vfvc", step + 1), &state)?;
            }
        }
    }

    if let Some((mut w, p)) = metrics_file {
        w.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    if let Some(dir) = &sink.checkpoint_dir {
        checkpoint_to(dir, "ckpt_final.vfvc", &state)?;
    }
    Ok((state, metrics))
}
