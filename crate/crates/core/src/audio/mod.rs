//! PCM audio to 128-channel log filterbank features.
//!
//! Pipeline: 16-bit PCM → mono `[-1, 1]` → 25 ms Hann frames with a 12 ms hop
//! → zero-padded FFT power → 128 HTK-mel triangles (0 Hz to Nyquist) →
//! `log(e + 1e-10)` → per-utterance channel normalization → an all-zero
//! summary row prepended. No pre-emphasis is applied.

pub mod features;
pub mod mel;
pub mod wav;

pub use features::{decode_features, encode_features, read_features, write_features};
pub use mel::{
    features_from_samples, frame_count, frame_signal, log_mel, normalize_and_prepend_dummy, MelMatrix, N_MELS,
};
pub use wav::{load_wav, parse_wav, write_wav, Audio};

use std::path::Path;

use crate::error::Result;

/// Loads a WAV file and produces normalized features with the dummy row.
pub fn featurize_wav(path: impl AsRef<Path>) -> Result<MelMatrix> {
    let audio = load_wav(path)?;
    features_from_samples(&audio.samples, audio.sample_rate)
}
