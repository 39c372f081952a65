//! Binary feature cache: `"MEL1"`, `u32` rows, `u32` cols (128), then
//! row-major little-endian `f32` values.

use std::path::Path;

use crate::audio::mel::{MelMatrix, N_MELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MEL1";

pub fn encode_features(frames: &Tensor) -> Result<Vec<u8>> {
    let (rows, cols) = frames.matrix_dims()?;
    if cols != N_MELS {
        return Err(Error::dim(format!("feature matrix has {cols} columns, expected {N_MELS}")));
    }
    let mut out = Vec::with_capacity(12 + 4 * frames.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], source: &str) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::format(source, "missing MEL1 header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if cols != N_MELS || rows == 0 {
        return Err(Error::format(source, format!("bad dimensions {rows}×{cols}")));
    }
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(Error::format(
            source,
            format!("payload is {} bytes, header implies {}", body.len(), rows * cols * 4),
        ));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn write_features(path: impl AsRef<Path>, mel: &MelMatrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(&mel.frames)?).map_err(|e| Error::io(path, e))
}

/// Reads a cached feature file. Cached features are always stored after
/// normalization with the dummy row in place.
pub fn read_features(path: impl AsRef<Path>) -> Result<MelMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let frames = decode_features(&bytes, &path.display().to_string())?;
    if !frames.is_finite() {
        return Err(Error::format(path.display().to_string(), "non-finite feature values"));
    }
    Ok(MelMatrix { frames, sample_rate: 0, has_dummy: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dummy_row_survives_round_trip() {
        let mut data = vec![0.0; 3 * 128];
        for (i, v) in data.iter_mut().enumerate().skip(128) {
            *v = (i as f64 * 0.37).sin();
        }
        let t = Tensor::new([3, 128], data).unwrap();
        let back = decode_features(&encode_features(&t).unwrap(), "test").unwrap();
        assert!(back.row(0).iter().all(|&v| v == 0.0 && v.is_sign_positive()));
        assert!(back.max_abs_diff(&t) < 1e-6);
        // f32 payload re-encodes identically
        assert_eq!(encode_features(&back).unwrap(), encode_features(&t).unwrap());
    }

    #[test]
    fn header_checks() {
        assert!(decode_features(b"MEL0\0\0\0\0\0\0\0\0", "x").is_err());
        let mut b = encode_features(&Tensor::zeros([2, 128])).unwrap();
        b.pop();
        assert!(matches!(decode_features(&b, "x"), Err(Error::Format { .. })));
        assert!(encode_features(&Tensor::zeros([2, 64])).is_err());
    }
}
