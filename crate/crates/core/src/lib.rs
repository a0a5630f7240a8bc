//! Vocoder-free voice conversion on raw STFT magnitudes.
//!
//! A transformer encoder-decoder maps source-speaker magnitude spectra to
//! target-speaker magnitudes; waveforms are recovered by recombining the
//! predicted magnitude with the source phase and inverting the STFT. No Mel
//! filter bank, no vocoder.
//!
//! Everything numeric is generic over the scalar type ([`Real`]): training
//! runs at `f32`, the gradient-check harness and the DSP oracles run at
//! `f64`. Concrete aliases for the common instantiations live at the crate
//! root.

pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod seq;
pub mod tensor;
pub mod train;
pub mod vad;

mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Audio buffer at training precision.
pub type Audio32 = audio::AudioBuffer<f32>;
/// Tensor at training precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Tensor at gradient-check precision.
pub type Tensor64 = tensor::Tensor<f64>;
/// Model state at training precision.
pub type Model32 = model::ModelState<f32>;

/// Derives a named sub-seed from the single run seed (FNV-1a over the
/// label bytes mixed into the seed). Keeps token generation, parameter
/// init, dropout, and batch sampling on independent deterministic streams.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}
