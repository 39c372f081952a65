//! Minimal RIFF/WAVE reader and writer for 16-bit PCM.

use std::io::{ErrorKind, Write};
use std::path::Path;

use crate::error::{Error, Result};

const PCM: u16 = 1;
const EXTENSIBLE: u16 = 0xFFFE;

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Reads a 16-bit PCM WAV file, averaging channels down to mono and scaling
/// samples by `1/32768`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Audio> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn truncated(what: &str) -> Error {
    Error::io("<wav bytes>", std::io::Error::new(ErrorKind::UnexpectedEof, format!("truncated {what}")))
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn parse_wav(bytes: &[u8]) -> Result<Audio> {
    if bytes.len() < 12 {
        return Err(truncated("RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format("RIFF header", "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let name = String::from_utf8_lossy(id).into_owned();
        if body + size > bytes.len() {
            return Err(truncated(&format!("'{name}' chunk")));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("'fmt ' chunk", format!("size {size} is below 16")));
                }
                let mut format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format == EXTENSIBLE && size >= 26 {
                    format = u16_at(bytes, body + 24);
                }
                if format != PCM || bits != 16 {
                    return Err(Error::format(
                        "'fmt ' chunk",
                        format!("unsupported encoding (format tag {format}, {bits} bits); need 16-bit PCM"),
                    ));
                }
                if channels == 0 || rate == 0 {
                    return Err(Error::format("'fmt ' chunk", "zero channels or sample rate"));
                }
                fmt = Some((channels, rate));
            }
            b"data" => {
                let (channels, sample_rate) =
                    fmt.ok_or_else(|| Error::format("'data' chunk", "appears before 'fmt ' chunk"))?;
                let frame = 2 * channels as usize;
                let data = &bytes[body..body + size];
                if !data.len().is_multiple_of(frame) {
                    return Err(truncated("'data' chunk sample frame"));
                }
                let samples = data
                    .chunks_exact(frame)
                    .map(|f| {
                        let sum: f64 = f.chunks_exact(2).map(|s| i16::from_le_bytes([s[0], s[1]]) as f64).sum();
                        sum / channels as f64 / 32768.0
                    })
                    .collect();
                return Ok(Audio { samples, sample_rate });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    if fmt.is_none() {
        Err(Error::format("'fmt ' chunk", "missing"))
    } else {
        Err(Error::format("'data' chunk", "missing"))
    }
}

/// Encodes interleaved 16-bit PCM.
pub fn encode_wav(samples: &[i16], channels: u16, sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * channels as u32 * 2).to_le_bytes());
    out.extend_from_slice(&(channels * 2).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[i16], channels: u16, sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_wav(samples, channels, sample_rate)).map_err(|e| Error::io(path, e))
}
