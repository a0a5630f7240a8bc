//! Greedy autoregressive conversion: encode the source magnitude once,
//! grow the decoder prefix frame by frame, stop on an EOS-like frame or at
//! the decode cap, then recombine with the source phase and invert.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{read_wav, resample, write_wav, AudioBuffer};
use crate::autodiff::Graph;
use crate::checkpoint;
use crate::dsp::{deemphasis, istft, merge_mag_phase, preemphasis, split_mag_phase, stft, MagPhase};
use crate::error::{Error, Result};
use crate::model::{decoder_forward, encoder_forward, register_params, ModelState};
use crate::scalar::Real;
use crate::seq::causal_bias;
use crate::tensor::Tensor;
use crate::vad::{trim_silence, VadConfig};

/// Why decoding stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxLen,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Eos => "eos",
            StopReason::MaxLen => "max_len",
        }
    }
}

/// Outcome of one conversion.
#[derive(Debug, Clone)]
pub struct ConversionResult<T> {
    /// `(T_hat, d_model)` predicted magnitudes (EOS-like frame excluded).
    pub predicted_mag: Tensor<T>,
    /// Frames actually reconstructed after aligning with the source phase.
    pub frames_used: usize,
    pub audio: AudioBuffer<T>,
    pub stop_reason: StopReason,
}

/// Default EOS stopping distance: half the distance from the EOS token to
/// the mean training frame stored in the checkpoint.
pub fn default_eos_tau<T: Real>(state: &ModelState<T>) -> f64 {
    let d2: f64 = state
        .tokens
        .eos
        .data()
        .iter()
        .zip(state.mean_frame.data())
        .map(|(&e, &m)| {
            let d = e.to_f64_c() - m.to_f64_c();
            d * d
        })
        .sum();
    0.5 * d2.sqrt()
}

fn frame_distance<T: Real>(frame: &[T], token: &[T]) -> f64 {
    frame
        .iter()
        .zip(token)
        .map(|(&a, &b)| {
            let d = a.to_f64_c() - b.to_f64_c();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Greedy search: the decoder sequence starts as `[SOS]`; each step re-runs
/// the decoder over the whole prefix under a causal mask and appends the
/// last output frame. Stops when an emitted frame lands within `eos_tau`
/// of the EOS token (that frame is excluded) or at `max_len` frames.
pub fn greedy_decode<T: Real>(
    source_mag: &Tensor<T>,
    state: &ModelState<T>,
    max_len: usize,
    eos_tau: f64,
) -> Result<(Tensor<T>, StopReason)> {
    let d = state.config.d_model;
    if source_mag.rank() != 2 || source_mag.shape()[1] != d {
        return Err(Error::shape(
            "greedy_decode",
            format!("source {:?}, want (*, {})", source_mag.shape(), d),
        ));
    }
    let t_src = source_mag.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval mode: dropout is inert

    // Encode once.
    let memory = {
        let mut g = Graph::new();
        let params = register_params(&mut g, state, false);
        let src = g.constant(source_mag.reshaped(vec![1, t_src, d])?);
        let out = encoder_forward(&mut g, &params, src, &[], &state.config, false, &mut rng)?;
        g.value(out).clone()
    };

    let mut prefix: Vec<T> = state.tokens.sos.data().to_vec();
    let mut emitted: Vec<T> = Vec::new();
    let mut n_emitted = 0usize;
    let mut stop = StopReason::MaxLen;

    while n_emitted < max_len {
        let p_len = 1 + n_emitted;
        let mut g = Graph::new();
        let params = register_params(&mut g, state, false);
        let mem = g.constant(memory.clone());
        let tgt = g.constant(Tensor::new(vec![1, p_len, d], prefix.clone())?);
        let causal = g.constant(causal_bias::<T>(p_len));
        let out = decoder_forward(
            &mut g,
            &params,
            tgt,
            mem,
            &[causal],
            &[],
            &state.config,
            false,
            &mut rng,
        )?;
        let out = g.value(out);
        let frame = &out.data()[(p_len - 1) * d..p_len * d];

        if frame_distance(frame, state.tokens.eos.data()) < eos_tau {
            stop = StopReason::Eos;
            break;
        }
        emitted.extend_from_slice(frame);
        prefix.extend_from_slice(frame);
        n_emitted += 1;
    }

    Ok((Tensor::new(vec![n_emitted, d], emitted)?, stop))
}

/// Rebuilds a waveform from predicted magnitudes and the source phase:
/// negative predictions clamp to zero, both sides truncate to the shorter
/// frame count, the stored top bin is restored, and the inverse STFT
/// output is de-emphasized.
pub fn reconstruct<T: Real + rustfft::FftNum>(
    pred_mag: &Tensor<T>,
    source: &MagPhase<T>,
    sample_rate: u32,
) -> Result<AudioBuffer<T>> {
    let d = source.config.mag_bins();
    if pred_mag.rank() != 2 || pred_mag.shape()[1] != d {
        return Err(Error::shape(
            "reconstruct",
            format!("prediction {:?}, want (*, {})", pred_mag.shape(), d),
        ));
    }
    let frames_used = pred_mag.shape()[0].min(source.frames());
    if frames_used == 0 {
        return Err(Error::EmptyAudio);
    }
    let clamped = Tensor::new(
        vec![frames_used, d],
        pred_mag.data()[..frames_used * d]
            .iter()
            .map(|&v| v.max(T::zero()))
            .collect(),
    )?;
    let phase = source.phase.truncated(frames_used);
    let merged = merge_mag_phase(&clamped, &phase, &source.config)?;
    let audio = istft(&merged, sample_rate)?;
    Ok(deemphasis(&audio, source.config.preemphasis_coeff))
}

/// Everything `convert_file` needs besides the checkpoint.
#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub stft: crate::dsp::StftConfig,
    pub vad: VadConfig,
    pub target_rate: u32,
    /// Stopping distance; `None` uses [`default_eos_tau`].
    pub eos_tau: Option<f64>,
    /// Decode cap; `None` uses the checkpoint's stored cap.
    pub max_len: Option<usize>,
    /// JSON-lines conversion log, appended per call.
    pub log_path: Option<PathBuf>,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            stft: crate::dsp::StftConfig::default(),
            vad: VadConfig::default(),
            target_rate: 16_000,
            eos_tau: None,
            max_len: None,
            log_path: None,
        }
    }
}

/// Full file-to-file conversion against an already-loaded state.
pub fn convert_with_state<T: Real + rustfft::FftNum>(
    in_wav: &Path,
    out_wav: &Path,
    state: &ModelState<T>,
    opts: &ConvertOptions,
) -> Result<ConversionResult<T>> {
    let started = Instant::now();
    let raw: AudioBuffer<T> = read_wav(in_wav).map_err(|e| e.in_stage("read"))?;
    let resampled = resample(&raw, opts.target_rate).map_err(|e| e.in_stage("resample"))?;
    let trimmed = trim_silence(&resampled, &opts.vad);
    let emphasized = preemphasis(&trimmed, opts.stft.preemphasis_coeff);
    let spectrum = stft(&emphasized, &opts.stft).map_err(|e| e.in_stage("stft"))?;
    let source = split_mag_phase(&spectrum);

    let max_len = opts.max_len.unwrap_or(state.config.max_decode_len);
    let eos_tau = opts.eos_tau.unwrap_or_else(|| default_eos_tau(state));
    let (predicted_mag, stop_reason) =
        greedy_decode(&source.magnitude, state, max_len, eos_tau).map_err(|e| e.in_stage("decode"))?;

    let audio = reconstruct(&predicted_mag, &source, opts.target_rate)
        .map_err(|e| e.in_stage("reconstruct"))?;
    write_wav(&audio, out_wav).map_err(|e| e.in_stage("write"))?;

    let frames_used = predicted_mag.shape()[0].min(source.frames());
    let result = ConversionResult {
        predicted_mag,
        frames_used,
        audio,
        stop_reason,
    };
    if let Some(log) = &opts.log_path {
        append_log(log, in_wav, &result, started.elapsed().as_secs_f64())?;
    }
    Ok(result)
}

/// Loads a checkpoint and converts one file (the lower path of the
/// pipeline: read → resample → VAD → pre-emphasis → STFT → split → greedy
/// decode → phase merge → inverse STFT → write).
pub fn convert_file<T: Real + rustfft::FftNum>(
    in_wav: &Path,
    out_wav: &Path,
    checkpoint_path: &Path,
    opts: &ConvertOptions,
) -> Result<ConversionResult<T>> {
    let state: ModelState<T> = checkpoint::load(checkpoint_path).map_err(|e| e.in_stage("checkpoint"))?;
    convert_with_state(in_wav, out_wav, &state, opts)
}

fn append_log<T: Real>(
    log: &Path,
    input: &Path,
    result: &ConversionResult<T>,
    seconds: f64,
) -> Result<()> {
    let line = serde_json::json!({
        "input": input.to_string_lossy(),
        "frames_pred": result.predicted_mag.shape()[0],
        "frames_used": result.frames_used,
        "stop_reason": result.stop_reason.as_str(),
        "seconds_elapsed": seconds,
    });
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log)
        .map_err(|e| Error::io(log, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(log, e))
}
