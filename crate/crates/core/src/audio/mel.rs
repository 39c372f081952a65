//! Framing, HTK mel filterbank and log compression.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_MELS: usize = 128;
pub const FRAME_MS: f64 = 25.0;
pub const HOP_MS: f64 = 12.0;
pub const LOG_FLOOR: f64 = 1e-10;

/// Filterbank features for one utterance, `[frames × 128]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelMatrix {
    pub frames: Tensor,
    pub sample_rate: u32,
    /// Set once the all-zero summary row has been prepended.
    pub has_dummy: bool,
}

impl MelMatrix {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn window_len(sample_rate: u32) -> usize {
    (sample_rate as f64 * FRAME_MS / 1000.0).round() as usize
}

pub fn hop_len(sample_rate: u32) -> usize {
    (sample_rate as f64 * HOP_MS / 1000.0).round() as usize
}

/// Number of full frames for a signal of `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Option<usize> {
    (len >= win).then(|| 1 + (len - win) / hop)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Splits the signal into 25 ms Hann-windowed frames with a 12 ms hop.
/// The trailing partial frame is dropped.
pub fn frame_signal(samples: &[f64], sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    let win = window_len(sample_rate);
    let hop = hop_len(sample_rate).max(1);
    let count = frame_count(samples.len(), win, hop)
        .ok_or(Error::TooShort { len: samples.len(), needed: win })?;
    let window = hann(win);
    Ok((0..count)
        .map(|f| {
            let start = f * hop;
            samples[start..start + win].iter().zip(&window).map(|(s, w)| s * w).collect()
        })
        .collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning 0 Hz to Nyquist,
/// `[n_mels × (n_fft/2 + 1)]`, unnormalized (peak weight 1).
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * sample_rate as f64 / n_fft as f64;
                    if f >= lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f <= hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Log mel energies `log(energy + 1e-10)` for already-windowed frames.
/// The FFT size is the next power of two at or above the frame length.
pub fn log_mel(frames: &[Vec<f64>], sample_rate: u32) -> Result<MelMatrix> {
    let win = frames.first().map(Vec::len).ok_or_else(|| Error::validation("log_mel: no frames"))?;
    let n_fft = win.next_power_of_two();
    let bank = mel_filterbank(N_MELS, n_fft, sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let bins = n_fft / 2 + 1;
    let mut out = Vec::with_capacity(frames.len() * N_MELS);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bins];
    for frame in frames {
        if frame.len() != win {
            return Err(Error::dim("log_mel: frames differ in length"));
        }
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (c, &s) in buf.iter_mut().zip(frame) {
            c.re = s;
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filter in &bank {
            let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push((e + LOG_FLOOR).ln());
        }
    }
    Ok(MelMatrix {
        frames: Tensor::new(vec![frames.len(), N_MELS], out)?,
        sample_rate,
        has_dummy: false,
    })
}

/// Per-channel mean/variance normalization over the utterance, then one
/// all-zero row at position 0.
pub fn normalize_and_prepend_dummy(mel: &MelMatrix) -> Result<MelMatrix> {
    if mel.has_dummy {
        return Err(Error::Contract("mel matrix already has a dummy row".into()));
    }
    let (t, c) = mel.frames.matrix_dims()?;
    let mut out = vec![0.0; (t + 1) * c];
    for ch in 0..c {
        let mean = (0..t).map(|r| mel.frames.at(r, ch)).sum::<f64>() / t as f64;
        let var = (0..t).map(|r| (mel.frames.at(r, ch) - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for r in 0..t {
            out[(r + 1) * c + ch] = (mel.frames.at(r, ch) - mean) * inv;
        }
    }
    Ok(MelMatrix {
        frames: Tensor::new(vec![t + 1, c], out)?,
        sample_rate: mel.sample_rate,
        has_dummy: true,
    })
}

/// Full pipeline from samples to the model's mel input.
pub fn features_from_samples(samples: &[f64], sample_rate: u32) -> Result<MelMatrix> {
    let frames = frame_signal(samples, sample_rate)?;
    normalize_and_prepend_dummy(&log_mel(&frames, sample_rate)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    proptest::proptest! {
        #[test]
        fn frame_count_matches_offset_enumeration(len in 0usize..40_000, sr in proptest::sample::select(vec![8000u32, 16000, 22050])) {
            let win = window_len(sr);
            let hop = hop_len(sr);
            let enumerated = (0..).map(|i| i * hop).take_while(|s| s + win <= len).count();
            match frame_signal(&vec![0.0; len], sr) {
                Ok(frames) => proptest::prop_assert_eq!(frames.len(), enumerated),
                Err(_) => proptest::prop_assert_eq!(enumerated, 0),
            }
        }
    }

    #[test]
    fn frame_boundaries() {
        assert_eq!(frame_signal(&vec![0.1; 400], 16000).unwrap().len(), 1);
        assert!(matches!(
            frame_signal(&vec![0.1; 399], 16000),
            Err(Error::TooShort { len: 399, needed: 400 })
        ));
        // enumerate start offsets 0, 192, 384, … while start + 400 ≤ 16000
        let starts = (0..).map(|i| i * 192).take_while(|s| s + 400 <= 16000).count();
        assert_eq!(starts, 82);
        assert_eq!(frame_signal(&vec![0.0; 16000], 16000).unwrap().len(), 82);
    }

    #[test]
    fn silent_frame_hits_log_floor() {
        let m = log_mel(&[vec![0.0; 400]], 16000).unwrap();
        assert_eq!(m.frames.shape(), &[1, 128]);
        assert!(m.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn always_128_channels() {
        for sr in [8000, 16000, 22050, 44100] {
            let samples: Vec<f64> = (0..sr as usize / 2).map(|i| (i as f64 * 0.01).sin()).collect();
            let frames = frame_signal(&samples, sr).unwrap();
            assert_eq!(log_mel(&frames, sr).unwrap().frames.cols(), 128);
        }
    }

    #[test]
    fn tone_peaks_at_bracketing_filter() {
        let sr = 16000;
        let tone: Vec<f64> = (0..400).map(|i| (2.0 * PI * 1000.0 * i as f64 / sr as f64).sin()).collect();
        let frame: Vec<f64> = tone.iter().zip(hann(400)).map(|(a, b)| a * b).collect();
        let m = log_mel(&[frame], sr).unwrap();
        let peak = m.frames.argmax_rows()[0];

        // independent centers: 130 points evenly spaced in HTK mel from 0 to Nyquist
        let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let centers: Vec<f64> = (1..=128)
            .map(|i| 700.0 * (10f64.powf(top * i as f64 / 129.0 / 2595.0) - 1.0))
            .collect();
        let below = centers.iter().rposition(|&c| c <= 1000.0).unwrap();
        assert!(centers[below + 1] > 1000.0);
        assert!(peak == below || peak == below + 1, "peak {peak}, bracket {below}");
    }

    #[test]
    fn dummy_and_normalization() {
        let samples: Vec<f64> = (0..8000).map(|i| (i as f64 * 0.07).sin() * 0.3 + (i as f64 * 0.003).cos() * 0.1).collect();
        let raw = log_mel(&frame_signal(&samples, 16000).unwrap(), 16000).unwrap();
        let m = normalize_and_prepend_dummy(&raw).unwrap();
        assert_eq!(m.len(), raw.len() + 1);
        assert!(m.frames.row(0).iter().all(|&v| v == 0.0));
        for ch in 0..128 {
            let mean = (1..m.len()).map(|r| m.frames.at(r, ch)).sum::<f64>() / raw.len() as f64;
            assert!(mean.abs() < 1e-5);
        }
        assert!(matches!(normalize_and_prepend_dummy(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic() {
        let s: Vec<f64> = (0..5000).map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.5).collect();
        assert_eq!(features_from_samples(&s, 16000).unwrap(), features_from_samples(&s, 16000).unwrap());
    }

    #[test]
    fn fft_power_matches_direct_dft() {
        // a single filter evaluated through the FFT path against a direct DFT
        let sr = 16000;
        let frame: Vec<f64> = (0..400).map(|i| ((i * 13) % 29) as f64 / 29.0 - 0.5).collect();
        let m = log_mel(std::slice::from_ref(&frame), sr).unwrap();
        let n_fft = 512;
        let power: Vec<f64> = (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let bank = mel_filterbank(128, n_fft, sr);
        for (i, f) in bank.iter().enumerate() {
            let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
            assert!(((e + LOG_FLOOR).ln() - m.frames.at(0, i)).abs() < 1e-8);
        }
    }
}
