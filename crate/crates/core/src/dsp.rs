//! Spectral analysis chain: pre-emphasis, framing, windowing, STFT,
//! magnitude/phase factorization, inverse STFT, and the top-bin trim that
//! makes the magnitude width a power of two.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Window shape applied per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
    Hamming,
}

impl Window {
    pub fn name(self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Hamming => "hamming",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" | "hanning" => Ok(Window::Hann),
            "hamming" => Ok(Window::Hamming),
            other => Err(Error::Config {
                key: "window".into(),
                detail: format!("unknown window {other}"),
            }),
        }
    }

    /// Periodic window of length `n` (periodic so that 50%-overlap
    /// squared-window sums are constant in the interior).
    pub fn samples<T: Real>(self, n: usize) -> Vec<T> {
        let two_pi = std::f64::consts::PI * 2.0;
        (0..n)
            .map(|i| {
                let c = (two_pi * i as f64 / n as f64).cos();
                let w = match self {
                    Window::Hann => 0.5 - 0.5 * c,
                    Window::Hamming => 0.54 - 0.46 * c,
                };
                T::from_f64_c(w)
            })
            .collect()
    }
}

/// Analysis parameters. The reconstruction guarantee relies on 50% overlap,
/// so `hop = nfft / 2` is required.
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    pub nfft: usize,
    pub hop: usize,
    pub window: Window,
    pub preemphasis_coeff: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            nfft: 512,
            hop: 256,
            window: Window::Hann,
            preemphasis_coeff: 0.97,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.nfft.is_power_of_two() || self.nfft < 4 {
            return Err(Error::StftConfig {
                detail: format!("nfft {} must be a power of two", self.nfft),
            });
        }
        if self.hop == 0 || self.hop > self.nfft {
            return Err(Error::StftConfig {
                detail: format!("hop {} must be in 1..=nfft", self.hop),
            });
        }
        if self.hop * 2 != self.nfft {
            return Err(Error::StftConfig {
                detail: format!(
                    "hop {} must be nfft/2 = {} for 50% overlap",
                    self.hop,
                    self.nfft / 2
                ),
            });
        }
        if !(0.0..1.0).contains(&self.preemphasis_coeff) {
            return Err(Error::StftConfig {
                detail: format!("preemphasis coeff {} outside [0, 1)", self.preemphasis_coeff),
            });
        }
        Ok(())
    }

    /// One-sided bin count, `nfft/2 + 1`.
    pub fn freq_bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Magnitude rows after the top bin is trimmed off, `nfft/2`.
    pub fn mag_bins(&self) -> usize {
        self.nfft / 2
    }
}

/// One-sided complex STFT, shape `(freq_bins, frames)` stored frame-major
/// (each frame's bins contiguous).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum<T> {
    pub bins: Vec<Complex<T>>,
    pub freq_bins: usize,
    pub frames: usize,
    pub config: StftConfig,
}

impl<T: Real> ComplexSpectrum<T> {
    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        &self.bins[t * self.freq_bins..(t + 1) * self.freq_bins]
    }
}

/// Unit-modulus phase rows (all `freq_bins`) plus the raw complex top bin
/// removed from the magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpectrum<T> {
    /// `(freq_bins, frames)` frame-major, |entry| = 1 (1+0i where the
    /// source bin was exactly zero).
    pub unit: Vec<Complex<T>>,
    /// The removed top bin per frame, restored at reconstruction.
    pub dropped_bin: Vec<Complex<T>>,
    pub freq_bins: usize,
    pub frames: usize,
}

impl<T: Real> PhaseSpectrum<T> {
    /// Copy of the first `frames` frames.
    pub fn truncated(&self, frames: usize) -> PhaseSpectrum<T> {
        let frames = frames.min(self.frames);
        PhaseSpectrum {
            unit: self.unit[..frames * self.freq_bins].to_vec(),
            dropped_bin: self.dropped_bin[..frames].to_vec(),
            freq_bins: self.freq_bins,
            frames,
        }
    }
}

/// Polar factorization of a [`ComplexSpectrum`]: nonnegative magnitude with
/// the top bin trimmed, and full-resolution phase.
#[derive(Debug, Clone, PartialEq)]
pub struct MagPhase<T> {
    /// `(frames, mag_bins)` tensor; row `t` holds frame `t`'s magnitudes.
    pub magnitude: Tensor<T>,
    pub phase: PhaseSpectrum<T>,
    pub config: StftConfig,
}

impl<T: Real> MagPhase<T> {
    pub fn frames(&self) -> usize {
        self.phase.frames
    }
}

/// First-order high-pass: `y[0] = x[0]`, `y[n] = x[n] - coeff·x[n-1]`.
pub fn preemphasis<T: Real>(buf: &AudioBuffer<T>, coeff: f64) -> AudioBuffer<T> {
    let c = T::from_f64_c(coeff);
    let x = buf.samples();
    let mut y = Vec::with_capacity(x.len());
    let mut prev = T::zero();
    for (n, &v) in x.iter().enumerate() {
        y.push(if n == 0 { v } else { v - c * prev });
        prev = v;
    }
    AudioBuffer::new(y, buf.sample_rate())
}

/// Exact inverse of [`preemphasis`]: `y[n] = x[n] + coeff·y[n-1]`.
pub fn deemphasis<T: Real>(buf: &AudioBuffer<T>, coeff: f64) -> AudioBuffer<T> {
    let c = T::from_f64_c(coeff);
    let mut y: Vec<T> = Vec::with_capacity(buf.len());
    let mut prev = T::zero();
    for &v in buf.samples() {
        let out = v + c * prev;
        y.push(out);
        prev = out;
    }
    AudioBuffer::new(y, buf.sample_rate())
}

fn plan_fft<T: FftNum>(n: usize, inverse: bool) -> Arc<dyn Fft<T>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

/// Windowed, hopped one-sided DFT. Frame `t` covers samples
/// `[t·hop, t·hop + nfft)`; trailing samples that do not fill a frame are
/// dropped (no centering, no padding).
pub fn stft<T: Real + FftNum>(buf: &AudioBuffer<T>, cfg: &StftConfig) -> Result<ComplexSpectrum<T>> {
    cfg.validate()?;
    let x = buf.samples();
    if x.len() < cfg.nfft {
        return Err(Error::InputTooShort {
            len: x.len(),
            nfft: cfg.nfft,
        });
    }
    let frames = 1 + (x.len() - cfg.nfft) / cfg.hop;
    let freq_bins = cfg.freq_bins();
    let window: Vec<T> = cfg.window.samples(cfg.nfft);
    let fft = plan_fft::<T>(cfg.nfft, false);

    let mut bins = Vec::with_capacity(frames * freq_bins);
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); cfg.nfft];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (s, (&xv, &wv)) in scratch
            .iter_mut()
            .zip(x[start..start + cfg.nfft].iter().zip(&window))
        {
            *s = Complex::new(xv * wv, T::zero());
        }
        fft.process(&mut scratch);
        bins.extend_from_slice(&scratch[..freq_bins]);
    }
    Ok(ComplexSpectrum {
        bins,
        freq_bins,
        frames,
        config: cfg.clone(),
    })
}

/// Overlap-add inverse with synthesis-window normalization: each inverse
/// frame is windowed again, summed at its hop offset, and the total is
/// divided by the summed squared window. Output length is
/// `(frames-1)·hop + nfft`.
pub fn istft<T: Real + FftNum>(spec: &ComplexSpectrum<T>, sample_rate: u32) -> Result<AudioBuffer<T>> {
    let cfg = &spec.config;
    cfg.validate()?;
    let nfft = cfg.nfft;
    let hop = cfg.hop;
    let freq_bins = spec.freq_bins;
    if freq_bins != cfg.freq_bins() {
        return Err(Error::StftConfig {
            detail: format!("spectrum has {} bins, config wants {}", freq_bins, cfg.freq_bins()),
        });
    }
    let frames = spec.frames;
    let out_len = if frames == 0 { 0 } else { (frames - 1) * hop + nfft };
    let window: Vec<T> = cfg.window.samples(nfft);

    let mut acc = vec![T::zero(); out_len];
    let mut wsum = vec![T::zero(); out_len];
    let ifft = plan_fft::<T>(nfft, true);
    let scale = T::from_f64_c(1.0 / nfft as f64);
    let mut full = vec![Complex::new(T::zero(), T::zero()); nfft];
    for t in 0..frames {
        let frame = spec.frame(t);
        full[..freq_bins].copy_from_slice(frame);
        for k in 1..nfft / 2 {
            full[nfft - k] = frame[k].conj();
        }
        ifft.process(&mut full);
        let start = t * hop;
        for (i, (&w, c)) in window.iter().zip(full.iter()).enumerate() {
            acc[start + i] += w * c.re * scale;
            wsum[start + i] += w * w;
        }
    }

    // Interior window-power must be bounded away from zero for the
    // overlap-add normalization to be well defined.
    let eps = T::from_f64_c(1e-8);
    if out_len > nfft {
        let interior = &wsum[nfft / 2..out_len - nfft / 2];
        if interior.iter().any(|&w| w < eps) {
            return Err(Error::StftConfig {
                detail: "window/hop pair has zero overlap-add weight in the interior".into(),
            });
        }
    }
    for (a, &w) in acc.iter_mut().zip(&wsum) {
        if w > eps {
            *a /= w;
        } else {
            *a = T::zero();
        }
    }
    Ok(AudioBuffer::new(acc, sample_rate))
}

/// Polar split. The top bin (index `nfft/2`) is moved to `dropped_bin` and
/// excluded from the magnitude so the feature width is a power of two;
/// phase keeps all bins and is `1+0i` wherever the source bin is zero.
pub fn split_mag_phase<T: Real>(spec: &ComplexSpectrum<T>) -> MagPhase<T> {
    let freq_bins = spec.freq_bins;
    let mag_bins = freq_bins - 1;
    let frames = spec.frames;
    let mut magnitude = Vec::with_capacity(frames * mag_bins);
    let mut unit = Vec::with_capacity(frames * freq_bins);
    let mut dropped = Vec::with_capacity(frames);
    for t in 0..frames {
        let frame = spec.frame(t);
        for (k, &c) in frame.iter().enumerate() {
            let m = (c.re * c.re + c.im * c.im).sqrt();
            if m > T::zero() {
                unit.push(Complex::new(c.re / m, c.im / m));
            } else {
                unit.push(Complex::new(T::one(), T::zero()));
            }
            if k < mag_bins {
                magnitude.push(m);
            }
        }
        dropped.push(frame[mag_bins]);
    }
    MagPhase {
        magnitude: Tensor::new(vec![frames, mag_bins], magnitude).expect("magnitude shape"),
        phase: PhaseSpectrum {
            unit,
            dropped_bin: dropped,
            freq_bins,
            frames,
        },
        config: spec.config.clone(),
    }
}

/// Recombines a magnitude matrix with a phase: `bins[k] = mag[k]·phase[k]`
/// for the trimmed rows and the stored top bin verbatim. Magnitude and
/// phase must already be aligned to the same frame count.
pub fn merge_mag_phase<T: Real>(
    magnitude: &Tensor<T>,
    phase: &PhaseSpectrum<T>,
    cfg: &StftConfig,
) -> Result<ComplexSpectrum<T>> {
    let frames = phase.frames;
    let mag_bins = phase.freq_bins - 1;
    if magnitude.shape() != [frames, mag_bins] {
        return Err(Error::FrameAlignment {
            mag_frames: magnitude.shape().first().copied().unwrap_or(0),
            phase_frames: frames,
        });
    }
    let mut bins = Vec::with_capacity(frames * phase.freq_bins);
    let mv = magnitude.data();
    for t in 0..frames {
        for k in 0..mag_bins {
            let m = mv[t * mag_bins + k];
            let p = phase.unit[t * phase.freq_bins + k];
            bins.push(Complex::new(p.re * m, p.im * m));
        }
        bins.push(phase.dropped_bin[t]);
    }
    Ok(ComplexSpectrum {
        bins,
        freq_bins: phase.freq_bins,
        frames,
        config: cfg.clone(),
    })
}

const CACHE_MAGIC: &[u8; 4] = b"VFSP";
const CACHE_VERSION: u32 = 1;

/// Writes the feature-cache format: magic `VFSP`, version, bin/frame
/// counts, then interleaved little-endian float32 (re, im) frame by frame.
pub fn write_cache<T: Real>(spec: &ComplexSpectrum<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CACHE_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&CACHE_VERSION.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&(spec.freq_bins as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&(spec.frames as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    for c in &spec.bins {
        w.write_all(&c.re.to_f32_c().to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.write_all(&c.im.to_f32_c().to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a feature-cache file back. The analysis config is not stored in
/// the file, so the caller supplies it; the bin count must agree.
pub fn read_cache<T: Real>(path: &Path, cfg: &StftConfig) -> Result<ComplexSpectrum<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[0..4] != CACHE_MAGIC {
        return Err(Error::Cache {
            path: path.into(),
            detail: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Cache {
            path: path.into(),
            detail: format!("unsupported version {version}"),
        });
    }
    let freq_bins = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    if freq_bins != cfg.freq_bins() {
        return Err(Error::Cache {
            path: path.into(),
            detail: format!("{} bins in file, config wants {}", freq_bins, cfg.freq_bins()),
        });
    }
    let mut data = vec![0u8; frames * freq_bins * 8];
    r.read_exact(&mut data).map_err(|e| Error::io(path, e))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Cache {
            path: path.into(),
            detail: "trailing bytes after spectrum data".into(),
        });
    }
    let mut bins = Vec::with_capacity(frames * freq_bins);
    for chunk in data.chunks_exact(8) {
        let re = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let im = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        bins.push(Complex::new(T::from_f64_c(re as f64), T::from_f64_c(im as f64)));
    }
    Ok(ComplexSpectrum {
        bins,
        freq_bins,
        frames,
        config: cfg.clone(),
    })
}

/// Signal-to-noise ratio in dB of `test` against `reference`, skipping
/// `skip` samples at each edge. Returns +inf when the residual is zero
/// (the silence convention).
pub fn snr_db<T: Real>(reference: &[T], test: &[T], skip: usize) -> f64 {
    let n = reference.len().min(test.len());
    if n <= 2 * skip {
        return f64::INFINITY;
    }
    let mut sig = 0.0f64;
    let mut err = 0.0f64;
    for i in skip..n - skip {
        let r = reference[i].to_f64_c();
        let t = test[i].to_f64_c();
        sig += r * r;
        err += (r - t) * (r - t);
    }
    if err == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (sig / err).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg512() -> StftConfig {
        StftConfig::default()
    }

    fn random_buffer(len: usize, seed: u64) -> AudioBuffer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.gen_range(-0.9..0.9)).collect(), 16_000)
    }

    /// Naive O(n²) one-sided DFT of one windowed frame, the independent
    /// oracle for the FFT path.
    fn naive_dft_frame(x: &[f64], window: &[f64]) -> Vec<Complex<f64>> {
        let n = x.len();
        let mut out = Vec::with_capacity(n / 2 + 1);
        for k in 0..=n / 2 {
            let mut acc = Complex::new(0.0, 0.0);
            for (i, (&xv, &wv)) in x.iter().zip(window).enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                acc += Complex::new(ang.cos(), ang.sin()) * (xv * wv);
            }
            out.push(acc);
        }
        out
    }

    #[test]
    fn preemphasis_coeff_zero_is_identity() {
        let b = random_buffer(100, 1);
        let y = preemphasis(&b, 0.0);
        assert_eq!(y.samples(), b.samples());
    }

    #[test]
    fn preemphasis_constant_closed_form() {
        let b = AudioBuffer::new(vec![0.5f64; 6], 16_000);
        let y = preemphasis(&b, 0.97);
        assert!((y.samples()[0] - 0.5).abs() < 1e-12);
        for &v in &y.samples()[1..] {
            assert!((v - 0.5 * 0.03).abs() < 1e-12);
        }
    }

    #[test]
    fn deemphasis_impulse_is_geometric_series() {
        let mut x = vec![0.0f64; 8];
        x[0] = 1.0;
        let y = deemphasis(&AudioBuffer::new(x, 16_000), 0.5);
        for (n, &v) in y.samples().iter().enumerate() {
            assert!((v - 0.5f64.powi(n as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn emphasis_round_trip() {
        let b = random_buffer(500, 2);
        let y = deemphasis(&preemphasis(&b, 0.97), 0.97);
        for (a, b) in y.samples().iter().zip(b.samples()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stft_zero_buffer_is_zero_spectrum() {
        let b = AudioBuffer::new(vec![0.0f64; 2048], 16_000);
        let s = stft(&b, &cfg512()).unwrap();
        assert!(s.bins.iter().all(|c| c.re == 0.0 && c.im == 0.0));
    }

    #[test]
    fn stft_rejects_short_input() {
        let b = AudioBuffer::new(vec![0.0f64; 100], 16_000);
        assert!(matches!(
            stft(&b, &cfg512()),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn stft_frame_count_arithmetic() {
        let b = AudioBuffer::new(vec![0.0f64; 512 + 3 * 256 + 10], 16_000);
        let s = stft(&b, &cfg512()).unwrap();
        assert_eq!(s.frames, 4);
        assert_eq!(s.freq_bins, 257);
    }

    #[test]
    fn stft_matches_naive_dft_oracle() {
        let cfg = cfg512();
        let b = random_buffer(512 + 256 * 3, 7);
        let s = stft(&b, &cfg).unwrap();
        let window: Vec<f64> = cfg.window.samples(cfg.nfft);
        for t in 0..s.frames {
            let frame = &b.samples()[t * cfg.hop..t * cfg.hop + cfg.nfft];
            let oracle = naive_dft_frame(frame, &window);
            for (a, o) in s.frame(t).iter().zip(&oracle) {
                assert!((a.re - o.re).abs() < 1e-6, "re frame {t}");
                assert!((a.im - o.im).abs() < 1e-6, "im frame {t}");
            }
        }
    }

    #[test]
    fn sine_peak_lands_on_expected_bin() {
        // 1 kHz at 16 kHz with nfft 512 -> bin 32.
        let rate = 16_000u32;
        let n = 16_000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / rate as f64).sin() * 0.5)
            .collect();
        let s = stft(&AudioBuffer::new(x, rate), &cfg512()).unwrap();
        for t in 0..s.frames {
            let frame = s.frame(t);
            let peak = (0..s.freq_bins)
                .max_by(|&a, &b| frame[a].norm().partial_cmp(&frame[b].norm()).unwrap())
                .unwrap();
            assert_eq!(peak, 32, "frame {t}");
        }
    }

    #[test]
    fn istft_round_trip_interior_snr() {
        let cfg = cfg512();
        let b = random_buffer(16_000, 3);
        let s = stft(&b, &cfg).unwrap();
        let y = istft(&s, 16_000).unwrap();
        let snr = snr_db(b.samples(), y.samples(), cfg.nfft / 2);
        assert!(snr >= 40.0, "snr {snr}");
    }

    #[test]
    fn istft_zero_spectrum_is_silence() {
        let cfg = cfg512();
        let s = ComplexSpectrum {
            bins: vec![Complex::new(0.0f64, 0.0); 257 * 5],
            freq_bins: 257,
            frames: 5,
            config: cfg,
        };
        let y = istft(&s, 16_000).unwrap();
        assert_eq!(y.len(), 4 * 256 + 512);
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn istft_is_linear() {
        let cfg = cfg512();
        let b1 = random_buffer(4096, 4);
        let b2 = random_buffer(4096, 5);
        let s1 = stft(&b1, &cfg).unwrap();
        let s2 = stft(&b2, &cfg).unwrap();
        let (a, b) = (0.7, -1.3);
        let mixed = ComplexSpectrum {
            bins: s1
                .bins
                .iter()
                .zip(&s2.bins)
                .map(|(x, y)| x * a + y * b)
                .collect(),
            freq_bins: s1.freq_bins,
            frames: s1.frames,
            config: s1.config.clone(),
        };
        let y_mixed = istft(&mixed, 16_000).unwrap();
        let y1 = istft(&s1, 16_000).unwrap();
        let y2 = istft(&s2, 16_000).unwrap();
        for i in 0..y_mixed.len() {
            let expect = a * y1.samples()[i] + b * y2.samples()[i];
            assert!((y_mixed.samples()[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn split_polar_form_examples() {
        let cfg = cfg512();
        let mut bins = vec![Complex::new(0.0f64, 0.0); 257];
        bins[0] = Complex::new(3.0, 4.0);
        bins[2] = Complex::new(0.0, 2.0);
        let s = ComplexSpectrum {
            bins,
            freq_bins: 257,
            frames: 1,
            config: cfg,
        };
        let mp = split_mag_phase(&s);
        assert!((mp.magnitude.data()[0] - 5.0).abs() < 1e-12);
        assert!((mp.phase.unit[0].re - 0.6).abs() < 1e-12);
        assert!((mp.phase.unit[0].im - 0.8).abs() < 1e-12);
        // zero bin: magnitude 0, phase 1+0i
        assert_eq!(mp.magnitude.data()[1], 0.0);
        assert_eq!(mp.phase.unit[1], Complex::new(1.0, 0.0));
        // magnitude 2 with phase i -> bin 2i
        assert!((mp.magnitude.data()[2] - 2.0).abs() < 1e-12);
        assert!((mp.phase.unit[2].im - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_merge_round_trip() {
        let cfg = cfg512();
        let b = random_buffer(4096, 9);
        let s = stft(&b, &cfg).unwrap();
        let mp = split_mag_phase(&s);
        assert!(mp.magnitude.data().iter().all(|&m| m >= 0.0));
        for c in &mp.phase.unit {
            assert!((c.norm() - 1.0).abs() < 1e-6);
        }
        let back = merge_mag_phase(&mp.magnitude, &mp.phase, &cfg).unwrap();
        for (a, o) in back.bins.iter().zip(&s.bins) {
            assert!((a.re - o.re).abs() < 1e-6);
            assert!((a.im - o.im).abs() < 1e-6);
        }
    }

    #[test]
    fn merge_all_ones_and_alignment_error() {
        let cfg = cfg512();
        let phase = PhaseSpectrum {
            unit: vec![Complex::new(1.0f64, 0.0); 257 * 2],
            dropped_bin: vec![Complex::new(0.0, 0.0); 2],
            freq_bins: 257,
            frames: 2,
        };
        let mag = Tensor::full(vec![2, 256], 1.0f64);
        let merged = merge_mag_phase(&mag, &phase, &cfg).unwrap();
        assert_eq!(merged.frame(0)[0], Complex::new(1.0, 0.0));
        assert_eq!(merged.frame(0)[256], Complex::new(0.0, 0.0));

        let bad = Tensor::full(vec![3, 256], 1.0f64);
        assert!(matches!(
            merge_mag_phase(&bad, &phase, &cfg),
            Err(Error::FrameAlignment { .. })
        ));
    }

    #[test]
    fn parseval_energy_accounting() {
        // One-sided accounting doubles interior bins.
        let cfg = cfg512();
        let b = random_buffer(512, 12);
        let s = stft(&b, &cfg).unwrap();
        let window: Vec<f64> = cfg.window.samples(cfg.nfft);
        let frame_energy: f64 = b
            .samples()
            .iter()
            .zip(&window)
            .map(|(&x, &w)| (x * w) * (x * w))
            .sum();
        let mut spec_energy = 0.0;
        for (k, c) in s.frame(0).iter().enumerate() {
            let e = c.norm_sqr();
            spec_energy += if k == 0 || k == 256 { e } else { 2.0 * e };
        }
        spec_energy /= 512.0;
        assert!((frame_energy - spec_energy).abs() < 1e-6);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt.vfsp");
        let cfg = cfg512();
        let b = random_buffer(2048, 20);
        let s32 = stft(&b.cast::<f32>(), &cfg).unwrap();
        write_cache(&s32, &path).unwrap();
        let back: ComplexSpectrum<f32> = read_cache(&path, &cfg).unwrap();
        assert_eq!(back.frames, s32.frames);
        assert_eq!(back.bins, s32.bins);
    }

    #[test]
    fn cache_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vfsp");
        std::fs::write(&path, b"NOPE000000000000").unwrap();
        let r: Result<ComplexSpectrum<f32>> = read_cache(&path, &cfg512());
        assert!(matches!(r, Err(Error::Cache { .. })));
    }

    #[test]
    fn config_validation_rejects_bad_overlap() {
        let cfg = StftConfig {
            nfft: 512,
            hop: 128,
            ..StftConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
