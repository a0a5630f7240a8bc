//! Sequence preparation: SOS/EOS tokens, zero-padded batches with
//! additive attention masks, pairing of source/target utterances, and a
//! deterministic synthetic corpus for desk-scale runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{read_wav, resample, AudioBuffer};
use crate::dsp::{preemphasis, split_mag_phase, stft, PhaseSpectrum, StftConfig};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sub_seed;
use crate::tensor::Tensor;
use crate::vad::{trim_silence, VadConfig};

/// Additive mask value. Large and negative so softmax drives masked
/// positions to zero weight.
pub const MASK_BIAS: f64 = -1e9;

/// Continuous start/end tokens: feature-width vectors drawn i.i.d. uniform
/// on `[0, 1)` once per experiment and persisted with the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecialTokens<T> {
    pub sos: Tensor<T>,
    pub eos: Tensor<T>,
    pub rng_seed: u64,
}

/// Draws the SOS then EOS vectors from a stream seeded by `seed`. `dim`
/// is the magnitude feature width (`nfft/2`).
pub fn make_special_tokens<T: Real>(seed: u64, dim: usize) -> SpecialTokens<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sos = Tensor::uniform(vec![dim], T::zero(), T::one(), &mut rng);
    let eos = Tensor::uniform(vec![dim], T::zero(), T::one(), &mut rng);
    SpecialTokens {
        sos,
        eos,
        rng_seed: seed,
    }
}

/// A source/target utterance pair sharing a text label. The source phase
/// (with its dropped top bin) is kept for reconstruction.
#[derive(Debug, Clone)]
pub struct UtterancePair<T> {
    pub source_id: String,
    pub target_id: String,
    pub text_label: String,
    /// `(T_src, mag_bins)`
    pub source_mag: Tensor<T>,
    /// `(T_tgt, mag_bins)`
    pub target_mag: Tensor<T>,
    pub source_phase: PhaseSpectrum<T>,
}

impl<T: Real> UtterancePair<T> {
    pub fn source_frames(&self) -> usize {
        self.source_mag.shape()[0]
    }

    pub fn target_frames(&self) -> usize {
        self.target_mag.shape()[0]
    }
}

/// Boolean matrix used for padding masks; `true` marks a padded position.
#[derive(Debug, Clone, PartialEq)]
pub struct BoolMat {
    pub rows: usize,
    pub cols: usize,
    data: Vec<bool>,
}

impl BoolMat {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// Zero-padded, tokenized training batch.
///
/// `decoder_input` is the target shifted right behind SOS; `decoder_target`
/// is the target with EOS appended. Padded positions are exactly zero and
/// the pad masks are true exactly where the effective length is exceeded
/// (the EOS slot counts as content).
#[derive(Debug, Clone)]
pub struct PaddedBatch<T> {
    pub encoder_input: Tensor<T>,
    pub decoder_input: Tensor<T>,
    pub decoder_target: Tensor<T>,
    pub src_lengths: Vec<usize>,
    pub tgt_lengths: Vec<usize>,
    pub src_pad_mask: BoolMat,
    pub tgt_pad_mask: BoolMat,
}

/// Assembles a batch padded to the within-batch maxima.
pub fn build_batch<T: Real>(
    pairs: &[&UtterancePair<T>],
    tokens: &SpecialTokens<T>,
) -> Result<PaddedBatch<T>> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dim = tokens.sos.numel();
    for p in pairs {
        if p.source_mag.rank() != 2 || p.source_mag.shape()[1] != dim {
            return Err(Error::shape(
                "build_batch",
                format!("source {:?}, want (*, {})", p.source_mag.shape(), dim),
            ));
        }
        if p.target_mag.rank() != 2 || p.target_mag.shape()[1] != dim {
            return Err(Error::shape(
                "build_batch",
                format!("target {:?}, want (*, {})", p.target_mag.shape(), dim),
            ));
        }
    }
    let batch = pairs.len();
    let src_lengths: Vec<usize> = pairs.iter().map(|p| p.source_frames()).collect();
    let tgt_lengths: Vec<usize> = pairs.iter().map(|p| p.target_frames()).collect();
    let t_src = *src_lengths.iter().max().unwrap();
    let t_tgt = *tgt_lengths.iter().max().unwrap();

    let mut enc = Tensor::zeros(vec![batch, t_src, dim]);
    let mut dec_in = Tensor::zeros(vec![batch, t_tgt + 1, dim]);
    let mut dec_tgt = Tensor::zeros(vec![batch, t_tgt + 1, dim]);
    let mut src_mask = vec![true; batch * t_src];
    let mut tgt_mask = vec![true; batch * (t_tgt + 1)];

    for (b, p) in pairs.iter().enumerate() {
        let s_len = src_lengths[b];
        let t_len = tgt_lengths[b];
        let enc_base = b * t_src * dim;
        enc.data_mut()[enc_base..enc_base + s_len * dim]
            .copy_from_slice(&p.source_mag.data()[..s_len * dim]);
        for t in 0..s_len {
            src_mask[b * t_src + t] = false;
        }

        let di_base = b * (t_tgt + 1) * dim;
        dec_in.data_mut()[di_base..di_base + dim].copy_from_slice(tokens.sos.data());
        dec_in.data_mut()[di_base + dim..di_base + (t_len + 1) * dim]
            .copy_from_slice(&p.target_mag.data()[..t_len * dim]);

        dec_tgt.data_mut()[di_base..di_base + t_len * dim]
            .copy_from_slice(&p.target_mag.data()[..t_len * dim]);
        dec_tgt.data_mut()[di_base + t_len * dim..di_base + (t_len + 1) * dim]
            .copy_from_slice(tokens.eos.data());

        for t in 0..=t_len {
            tgt_mask[b * (t_tgt + 1) + t] = false;
        }
    }

    Ok(PaddedBatch {
        encoder_input: enc,
        decoder_input: dec_in,
        decoder_target: dec_tgt,
        src_lengths,
        tgt_lengths,
        src_pad_mask: BoolMat::new(batch, t_src, src_mask),
        tgt_pad_mask: BoolMat::new(batch, t_tgt + 1, tgt_mask),
    })
}

/// Additive attention bias from a pad mask: `MASK_BIAS` at padded key
/// positions, zero elsewhere. Shaped `(B, 1, 1, T)` so it broadcasts over
/// heads and query positions.
pub fn attention_bias<T: Real>(pad_mask: &BoolMat) -> Tensor<T> {
    let bias = T::from_f64_c(MASK_BIAS);
    Tensor::from_fn(vec![pad_mask.rows, 1, 1, pad_mask.cols], |i| {
        if pad_mask.data()[i] {
            bias
        } else {
            T::zero()
        }
    })
}

/// Additive causal bias `(1, 1, T, T)`: strictly upper-triangular entries
/// are `MASK_BIAS`, so step `t` sees keys `0..=t` only. Combine with a pad
/// bias by addition.
pub fn causal_bias<T: Real>(t_len: usize) -> Tensor<T> {
    let bias = T::from_f64_c(MASK_BIAS);
    Tensor::from_fn(vec![1, 1, t_len, t_len], |i| {
        let q = (i / t_len) % t_len;
        let k = i % t_len;
        if k > q {
            bias
        } else {
            T::zero()
        }
    })
}

/// 0/1 loss weights `(B, T, 1)` from a pad mask: 1 where scored.
pub fn loss_mask<T: Real>(pad_mask: &BoolMat) -> Tensor<T> {
    Tensor::from_fn(vec![pad_mask.rows, pad_mask.cols, 1], |i| {
        if pad_mask.data()[i] {
            T::zero()
        } else {
            T::one()
        }
    })
}

/// Generator settings for the synthetic corpus: per label a fixed
/// harmonic-plus-envelope pattern, rendered at `f0_src` for the source and
/// `f0_tgt` for the target, then run through the real analysis pipeline.
#[derive(Debug, Clone)]
pub struct ToyCorpusConfig {
    pub n_pairs: usize,
    pub rate: u32,
    pub duration_range: (f64, f64),
    pub f0_src: f64,
    pub f0_tgt: f64,
    pub seed: u64,
    pub stft: StftConfig,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_pairs: 4,
            rate: 16_000,
            duration_range: (0.25, 0.45),
            f0_src: 150.0,
            f0_tgt: 300.0,
            seed: 0,
            stft: StftConfig::default(),
        }
    }
}

const TOY_LABELS: [&str; 11] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "zero", "oh",
];

struct LabelPattern {
    harmonic_amps: Vec<f64>,
    harmonic_phases: Vec<f64>,
    wobble_hz: f64,
    wobble_phase: f64,
}

fn label_pattern(seed: u64, label: &str) -> LabelPattern {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("toy-label:{label}")));
    let n_harm = 3;
    let harmonic_amps = (0..n_harm)
        .map(|k| 0.3f64.powi(k) * rng.gen_range(0.85..1.15))
        .collect();
    let harmonic_phases = (0..n_harm)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    LabelPattern {
        harmonic_amps,
        harmonic_phases,
        wobble_hz: rng.gen_range(2.0..4.0),
        wobble_phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

/// Renders one pseudo-word: decaying harmonics under an attack/release
/// envelope with a slow per-label wobble, peak amplitude about 0.5.
fn render_toy<T: Real>(pattern: &LabelPattern, f0: f64, duration: f64, rate: u32) -> AudioBuffer<T> {
    let n = (duration * rate as f64).round() as usize;
    let attack = (0.1 * n as f64).max(1.0);
    let release = (0.15 * n as f64).max(1.0);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / rate as f64;
        let mut v = 0.0;
        for (k, (&amp, &ph)) in pattern
            .harmonic_amps
            .iter()
            .zip(&pattern.harmonic_phases)
            .enumerate()
        {
            let freq = f0 * (k + 1) as f64;
            if freq < 0.4 * rate as f64 {
                v += amp * (std::f64::consts::TAU * freq * t + ph).sin();
            }
        }
        let up = (i as f64 / attack).min(1.0);
        let down = ((n - 1 - i) as f64 / release).min(1.0);
        let wobble =
            1.0 + 0.2 * (std::f64::consts::TAU * pattern.wobble_hz * t + pattern.wobble_phase).sin();
        samples.push(T::from_f64_c(0.4 * v * up * down * wobble));
    }
    AudioBuffer::new(samples, rate)
}

/// Runs one waveform through the analysis chain used for real audio.
fn analyze<T: Real + rustfft::FftNum>(
    buf: &AudioBuffer<T>,
    stft_cfg: &StftConfig,
    vad_cfg: &VadConfig,
) -> Result<crate::dsp::MagPhase<T>> {
    let trimmed = trim_silence(buf, vad_cfg);
    let emphasized = preemphasis(&trimmed, stft_cfg.preemphasis_coeff);
    let spectrum = stft(&emphasized, stft_cfg)?;
    Ok(split_mag_phase(&spectrum))
}

/// Deterministic synthetic corpus: same label means same envelope, source
/// and target differ only in fundamental frequency.
pub fn make_toy_corpus<T: Real + rustfft::FftNum>(cfg: &ToyCorpusConfig) -> Result<Vec<UtterancePair<T>>> {
    let nyq = 0.5 * cfg.rate as f64;
    if cfg.f0_src >= nyq || cfg.f0_tgt >= nyq {
        return Err(Error::Config {
            key: "toy.f0".into(),
            detail: format!("f0 {} / {} above Nyquist {}", cfg.f0_src, cfg.f0_tgt, nyq),
        });
    }
    let vad_cfg = VadConfig::default();
    let mut dur_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "toy-durations"));
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let label = TOY_LABELS[i % TOY_LABELS.len()];
        let pattern = label_pattern(cfg.seed, label);
        let duration = dur_rng.gen_range(cfg.duration_range.0..=cfg.duration_range.1);
        let src_wave: AudioBuffer<T> = render_toy(&pattern, cfg.f0_src, duration, cfg.rate);
        let tgt_wave: AudioBuffer<T> = render_toy(&pattern, cfg.f0_tgt, duration, cfg.rate);
        let src = analyze(&src_wave, &cfg.stft, &vad_cfg)?;
        let tgt = analyze(&tgt_wave, &cfg.stft, &vad_cfg)?;
        pairs.push(UtterancePair {
            source_id: format!("toy-src-{}hz", cfg.f0_src as u32),
            target_id: format!("toy-tgt-{}hz", cfg.f0_tgt as u32),
            text_label: label.to_string(),
            source_mag: src.magnitude,
            target_mag: tgt.magnitude,
            source_phase: src.phase,
        });
    }
    Ok(pairs)
}

/// Per-pair ingestion failure, kept for the prep report.
#[derive(Debug, Clone)]
pub struct SkippedPair {
    pub line: usize,
    pub reason: String,
}

/// Summary of a corpus ingestion run.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub processed: usize,
    pub skipped: Vec<SkippedPair>,
    pub max_src_frames: usize,
    pub max_tgt_frames: usize,
}

/// One manifest pair at the complex-spectrum level, before the polar
/// split. What the feature cache stores.
#[derive(Debug, Clone)]
pub struct SpectraPair<T> {
    pub text_label: String,
    pub source_id: String,
    pub target_id: String,
    pub source: crate::dsp::ComplexSpectrum<T>,
    pub target: crate::dsp::ComplexSpectrum<T>,
}

/// Splits a cached spectra pair into the training-ready form.
pub fn pair_from_spectra<T: Real>(sp: &SpectraPair<T>) -> UtterancePair<T> {
    let src = split_mag_phase(&sp.source);
    let tgt = split_mag_phase(&sp.target);
    UtterancePair {
        source_id: sp.source_id.clone(),
        target_id: sp.target_id.clone(),
        text_label: sp.text_label.clone(),
        source_mag: src.magnitude,
        target_mag: tgt.magnitude,
        source_phase: src.phase,
    }
}

/// Manifest ingestion down to complex spectra: resample → VAD →
/// pre-emphasis → STFT per file. Missing or broken files skip the pair
/// and land in the report; a manifest with no data lines is an error.
pub fn ingest_corpus_spectra<T: Real + rustfft::FftNum>(
    root: &Path,
    manifest: &Path,
    stft_cfg: &StftConfig,
    vad_cfg: &VadConfig,
    target_rate: u32,
) -> Result<(Vec<SpectraPair<T>>, IngestReport)> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut pairs = Vec::new();
    let mut report = IngestReport::default();
    let mut data_lines = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        data_lines += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            report.skipped.push(SkippedPair {
                line: line_no,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
            continue;
        }
        let label = fields[0].to_string();
        let src_path = resolve(root, fields[1]);
        let tgt_path = resolve(root, fields[2]);
        match ingest_pair::<T>(&label, &src_path, &tgt_path, stft_cfg, vad_cfg, target_rate) {
            Ok(pair) => {
                let src_frames = pair.source.frames;
                let tgt_frames = pair.target.frames;
                report.max_src_frames = report.max_src_frames.max(src_frames);
                report.max_tgt_frames = report.max_tgt_frames.max(tgt_frames);
                report.processed += 1;
                pairs.push(pair);
            }
            Err(e) => report.skipped.push(SkippedPair {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }

    if data_lines == 0 {
        return Err(Error::Manifest {
            path: manifest.into(),
            detail: "no pairs listed".into(),
        });
    }
    Ok((pairs, report))
}

/// Reads a tab-separated manifest (`label<TAB>source_wav<TAB>target_wav`,
/// `#` comments) and runs every pair through the full analysis chain
/// including the magnitude/phase split.
pub fn ingest_corpus<T: Real + rustfft::FftNum>(
    root: &Path,
    manifest: &Path,
    stft_cfg: &StftConfig,
    vad_cfg: &VadConfig,
    target_rate: u32,
) -> Result<(Vec<UtterancePair<T>>, IngestReport)> {
    let (spectra, report) = ingest_corpus_spectra(root, manifest, stft_cfg, vad_cfg, target_rate)?;
    Ok((spectra.iter().map(pair_from_spectra).collect(), report))
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

fn ingest_pair<T: Real + rustfft::FftNum>(
    label: &str,
    src_path: &Path,
    tgt_path: &Path,
    stft_cfg: &StftConfig,
    vad_cfg: &VadConfig,
    target_rate: u32,
) -> Result<SpectraPair<T>> {
    let src_wav: AudioBuffer<T> = read_wav(src_path)?;
    let tgt_wav: AudioBuffer<T> = read_wav(tgt_path)?;
    let source = analyze_to_spectrum(&src_wav, stft_cfg, vad_cfg, target_rate)?;
    let target = analyze_to_spectrum(&tgt_wav, stft_cfg, vad_cfg, target_rate)?;
    Ok(SpectraPair {
        source_id: stem(src_path),
        target_id: stem(tgt_path),
        text_label: label.to_string(),
        source,
        target,
    })
}

/// Resample → trim → pre-emphasize → STFT one waveform.
pub fn analyze_to_spectrum<T: Real + rustfft::FftNum>(
    wav: &AudioBuffer<T>,
    stft_cfg: &StftConfig,
    vad_cfg: &VadConfig,
    target_rate: u32,
) -> Result<crate::dsp::ComplexSpectrum<T>> {
    let resampled = resample(wav, target_rate)?;
    let trimmed = trim_silence(&resampled, vad_cfg);
    let emphasized = preemphasis(&trimmed, stft_cfg.preemphasis_coeff);
    stft(&emphasized, stft_cfg)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.to_string_lossy().into_owned())
}
