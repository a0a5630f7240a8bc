//! Energy-threshold voice-activity trimming of leading and trailing
//! silence. Interior pauses are preserved; only the front and back are
//! removed.

use crate::audio::AudioBuffer;
use crate::scalar::Real;

/// Trimming parameters. The threshold is relative (dB below the peak
/// frame RMS) since corpus gain varies; hangover frames keep plosive
/// onsets from being clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub threshold_db: f64,
    pub hangover_frames: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            threshold_db: -40.0,
            hangover_frames: 3,
        }
    }
}

/// Returns the sub-span of `buf` from the first to the last frame whose
/// RMS is within `threshold_db` of the loudest frame, extended by the
/// hangover on both sides. A buffer with no frame above the threshold
/// (e.g. all zeros) is returned unchanged.
pub fn trim_silence<T: Real>(buf: &AudioBuffer<T>, cfg: &VadConfig) -> AudioBuffer<T> {
    let rate = buf.sample_rate() as f64;
    let frame_len = ((cfg.frame_ms / 1000.0 * rate).round() as usize).max(1);
    let hop_len = ((cfg.hop_ms / 1000.0 * rate).round() as usize).max(1);
    let x = buf.samples();
    if x.len() < frame_len {
        return buf.clone();
    }
    let n_frames = 1 + (x.len() - frame_len) / hop_len;

    let mut rms = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let frame = &x[t * hop_len..t * hop_len + frame_len];
        let energy: f64 = frame.iter().map(|&v| v.to_f64_c().powi(2)).sum();
        rms.push((energy / frame_len as f64).sqrt());
    }
    let peak = rms.iter().copied().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return buf.clone();
    }

    let threshold = peak * 10f64.powf(cfg.threshold_db / 20.0);
    let first = rms.iter().position(|&r| r >= threshold);
    let last = rms.iter().rposition(|&r| r >= threshold);
    let (first, last) = match (first, last) {
        (Some(f), Some(l)) => (f, l),
        _ => return buf.clone(),
    };

    let start_frame = first.saturating_sub(cfg.hangover_frames);
    let end_frame = last + cfg.hangover_frames;
    let a = start_frame * hop_len;
    let b = (end_frame * hop_len + frame_len).min(x.len());
    buf.slice(a, b)
}
