//! Mono PCM WAV reading/writing and band-limited resampling.
//!
//! Only 16-bit little-endian PCM mono is supported; that covers the digit
//! corpora this pipeline targets and keeps the codec surface minimal.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Mono waveform with its sample rate. Samples are normalized amplitudes
/// in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> AudioBuffer<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Contiguous sub-span copy.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn cast<U: Real>(&self) -> AudioBuffer<U> {
        AudioBuffer {
            samples: self
                .samples
                .iter()
                .map(|v| U::from_f64_c(v.to_f64_c()))
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

const PCM_SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM mono RIFF/WAVE file. Samples are scaled to
/// `[-1, 1)` by dividing by 32768; unknown chunks are skipped.
pub fn read_wav<T: Real>(path: &Path) -> Result<AudioBuffer<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut riff = [0u8; 12];
    r.read_exact(&mut riff)
        .map_err(|_| malformed(path, "file shorter than RIFF header"))?;
    if &riff[0..4] != b"RIFF" || &riff[8..12] != b"WAVE" {
        return Err(malformed(path, "missing RIFF/WAVE magic"));
    }

    let mut sample_rate = 0u32;
    let mut fmt_seen = false;
    loop {
        let mut chunk_head = [0u8; 8];
        if r.read_exact(&mut chunk_head).is_err() {
            return Err(malformed(path, "no data chunk"));
        }
        let id = &chunk_head[0..4];
        let size = u32::from_le_bytes(chunk_head[4..8].try_into().unwrap()) as usize;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed(path, "fmt chunk too small"));
                }
                let mut fmt = vec![0u8; size + (size & 1)];
                r.read_exact(&mut fmt)
                    .map_err(|_| malformed(path, "truncated fmt chunk"))?;
                let audio_format = u16::from_le_bytes(fmt[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(fmt[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(fmt[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(fmt[14..16].try_into().unwrap());
                if audio_format != 1 {
                    return Err(unsupported(path, format!("audio format {audio_format}, want PCM")));
                }
                if channels != 1 {
                    return Err(unsupported(path, format!("{channels} channels, want mono")));
                }
                if bits != 16 {
                    return Err(unsupported(path, format!("{bits} bits per sample, want 16")));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(malformed(path, "data chunk before fmt chunk"));
                }
                if !size.is_multiple_of(2) {
                    return Err(malformed(path, "odd data chunk size for 16-bit samples"));
                }
                let mut data = vec![0u8; size];
                r.read_exact(&mut data)
                    .map_err(|_| malformed(path, "truncated data chunk"))?;
                let samples = data
                    .chunks_exact(2)
                    .map(|b| {
                        let v = i16::from_le_bytes([b[0], b[1]]);
                        T::from_f64_c(v as f64 / PCM_SCALE)
                    })
                    .collect();
                return Ok(AudioBuffer::new(samples, sample_rate));
            }
            _ => {
                // skip unknown chunk (word aligned)
                let mut skip = vec![0u8; size + (size & 1)];
                r.read_exact(&mut skip)
                    .map_err(|_| malformed(path, "truncated chunk"))?;
            }
        }
    }
}

fn malformed(path: &Path, detail: &str) -> Error {
    Error::WavFormat {
        path: path.into(),
        detail: detail.into(),
    }
}

fn unsupported(path: &Path, detail: String) -> Error {
    Error::WavUnsupported {
        path: path.into(),
        detail,
    }
}

/// Writes a 16-bit PCM mono WAV. Samples are clamped to
/// `[-1, 1 - 2^-15]` before quantization.
pub fn write_wav<T: Real>(buf: &AudioBuffer<T>, path: &Path) -> Result<()> {
    for &s in buf.samples() {
        if !s.is_finite() {
            return Err(Error::non_finite("write_wav"));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let data_len = (buf.len() * 2) as u32;
    let sample_rate = buf.sample_rate();

    w.write_all(b"RIFF").map_err(|e| Error::io(path, e))?;
    w.write_all(&(36 + data_len).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(b"WAVE").map_err(|e| Error::io(path, e))?;
    w.write_all(b"fmt ").map_err(|e| Error::io(path, e))?;
    w.write_all(&16u32.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    w.write_all(&1u16.to_le_bytes()).map_err(|e| Error::io(path, e))?; // PCM
    w.write_all(&1u16.to_le_bytes()).map_err(|e| Error::io(path, e))?; // mono
    w.write_all(&sample_rate.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&(sample_rate * 2).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&2u16.to_le_bytes()).map_err(|e| Error::io(path, e))?; // block align
    w.write_all(&16u16.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    w.write_all(b"data").map_err(|e| Error::io(path, e))?;
    w.write_all(&data_len.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    for &s in buf.samples() {
        let clamped = s.to_f64_c().clamp(-1.0, 1.0 - 1.0 / PCM_SCALE);
        let q = (clamped * PCM_SCALE).round() as i32;
        let q = q.clamp(i16::MIN as i32, i16::MAX as i32) as i16;
        w.write_all(&q.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Zeroth-order modified Bessel function, for the Kaiser window.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_sq = (x / 2.0) * (x / 2.0);
    for k in 1..32 {
        term *= half_sq / (k as f64 * k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}

/// Band-limited rational resampling with a Kaiser-windowed sinc filter,
/// cutoff at 0.9 of the smaller Nyquist. Output length is
/// `round(len * target / source)`; filter phases are normalized to unit DC
/// gain so constant signals pass through unchanged away from the edges.
pub fn resample<T: Real>(buf: &AudioBuffer<T>, target_rate: u32) -> Result<AudioBuffer<T>> {
    if target_rate == 0 {
        return Err(Error::InvalidRate { rate: target_rate });
    }
    let src_rate = buf.sample_rate();
    if src_rate == 0 {
        return Err(Error::InvalidRate { rate: src_rate });
    }
    if target_rate == src_rate {
        return Ok(buf.clone());
    }

    let g = gcd(src_rate, target_rate);
    let up = (target_rate / g) as usize; // L
    let down = (src_rate / g) as usize; // M

    // Cutoff in cycles per input sample; 0.9 of the tighter Nyquist.
    let cutoff = 0.45 * (1.0f64).min(target_rate as f64 / src_rate as f64);
    let half_width: isize = 32;
    let beta = 8.6;
    let i0_beta = bessel_i0(beta);

    // One filter per fractional phase, each normalized to sum 1.
    let mut phases: Vec<Vec<f64>> = Vec::with_capacity(up);
    for phase in 0..up {
        let frac = phase as f64 * down as f64 / up as f64;
        let frac = frac - frac.floor();
        let mut taps = Vec::with_capacity((2 * half_width) as usize + 1);
        let mut sum = 0.0;
        for j in -half_width..=half_width {
            let t = j as f64 - frac;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * t).sin() / (std::f64::consts::PI * t)
            };
            let w = t / half_width as f64;
            let kaiser = if w.abs() <= 1.0 {
                bessel_i0(beta * (1.0 - w * w).sqrt()) / i0_beta
            } else {
                0.0
            };
            let tap = sinc * kaiser;
            sum += tap;
            taps.push(tap);
        }
        for tap in &mut taps {
            *tap /= sum;
        }
        phases.push(taps);
    }

    let in_len = buf.len();
    let out_len = ((in_len as f64) * target_rate as f64 / src_rate as f64).round() as usize;
    let x = buf.samples();
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        // Input-time position of output sample n is n·M/L.
        let num = n * down;
        let base = (num / up) as isize;
        let phase = num % up;
        let taps = &phases[phase];
        let mut acc = 0.0f64;
        for (ti, &tap) in taps.iter().enumerate() {
            let k = base + (ti as isize - half_width);
            if k >= 0 && (k as usize) < in_len {
                acc += x[k as usize].to_f64_c() * tap;
            }
        }
        out.push(T::from_f64_c(acc));
    }
    Ok(AudioBuffer::new(out, target_rate))
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, rate: u32, secs: f64, amp: f64) -> AudioBuffer<f64> {
        let n = (rate as f64 * secs) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
    }

    /// FFT-peak oracle on a whole buffer using a naive DFT over a
    /// power-of-two prefix.
    fn dominant_freq_hz(buf: &AudioBuffer<f64>) -> f64 {
        let n = 4096.min(buf.len());
        let mut best = (0usize, 0.0f64);
        for k in 1..n / 2 {
            let mut re = 0.0;
            let mut im = 0.0;
            for i in 0..n {
                let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += buf.samples()[i] * ang.cos();
                im += buf.samples()[i] * ang.sin();
            }
            let e = re * re + im * im;
            if e > best.1 {
                best = (k, e);
            }
        }
        best.0 as f64 * buf.sample_rate() as f64 / n as f64
    }

    #[test]
    fn single_sample_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 2).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&32767i16.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();

        let buf: AudioBuffer<f64> = read_wav(&path).unwrap();
        assert_eq!(buf.sample_rate(), 16_000);
        assert_eq!(buf.samples(), &[32767.0 / 32768.0]);
    }

    #[test]
    fn zero_samples_round_trip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_wav(&AudioBuffer::new(vec![0.0f64, 0.0], 16_000), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0, 0]);
        let buf: AudioBuffer<f64> = read_wav(&path).unwrap();
        assert_eq!(buf.samples(), &[0.0, 0.0]);
    }

    #[test]
    fn clipping_sample_writes_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        write_wav(&AudioBuffer::new(vec![2.0f64], 16_000), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let v = i16::from_le_bytes(bytes[bytes.len() - 2..].try_into().unwrap());
        assert_eq!(v, 32767);
    }

    #[test]
    fn round_trip_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let buf = AudioBuffer::new(
            (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            16_000,
        );
        write_wav(&buf, &path).unwrap();
        let back: AudioBuffer<f64> = read_wav(&path).unwrap();
        let bound = 1.0 / 32768.0;
        for (a, b) in back.samples().iter().zip(buf.samples()) {
            assert!((a - b).abs() <= bound);
        }
    }

    #[test]
    fn write_read_write_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.wav");
        let p2 = dir.path().join("b.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let buf = AudioBuffer::new(
            (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            20_000,
        );
        write_wav(&buf, &p1).unwrap();
        let back: AudioBuffer<f64> = read_wav(&p1).unwrap();
        write_wav(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn read_rejects_garbage_and_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"this is not a wav file at all...").unwrap();
        assert!(matches!(
            read_wav::<f64>(&bad),
            Err(Error::WavFormat { .. })
        ));

        let stereo = dir.path().join("st.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&40u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&stereo, bytes).unwrap();
        assert!(matches!(
            read_wav::<f64>(&stereo),
            Err(Error::WavUnsupported { .. })
        ));
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let buf = sine(440.0, 16_000, 0.1, 0.5);
        let out = resample(&buf, 16_000).unwrap();
        assert_eq!(out, buf);
    }

    #[test]
    fn resample_preserves_tone_frequency() {
        let buf = sine(1000.0, 20_000, 0.5, 0.5);
        let out = resample(&buf, 16_000).unwrap();
        assert_eq!(out.sample_rate(), 16_000);
        // duration preserved within one sample period
        let dur_in = buf.duration_secs();
        let dur_out = out.duration_secs();
        assert!((dur_in - dur_out).abs() <= 1.0 / 16_000.0);
        let f = dominant_freq_hz(&out);
        let bin_hz = 16_000.0 / 4096.0;
        assert!((f - 1000.0).abs() <= bin_hz, "peak at {f} Hz");
    }

    #[test]
    fn resample_preserves_dc_away_from_edges() {
        let buf = AudioBuffer::new(vec![0.5f64; 2000], 20_000);
        let out = resample(&buf, 16_000).unwrap();
        assert_eq!(out.len(), 1600);
        for &v in &out.samples()[50..out.len() - 50] {
            assert!((v - 0.5).abs() <= 1e-3, "dc drifted to {v}");
        }
    }

    #[test]
    fn resample_upsamples_too() {
        let buf = sine(500.0, 16_000, 0.25, 0.4);
        let out = resample(&buf, 20_000).unwrap();
        assert_eq!(out.len(), 5000);
        let f = dominant_freq_hz(&out);
        let bin_hz = 20_000.0 / 4096.0;
        assert!((f - 500.0).abs() <= bin_hz, "peak at {f} Hz");
    }
}
