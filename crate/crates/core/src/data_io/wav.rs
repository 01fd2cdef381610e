//! 16 kHz mono 16-bit PCM WAV I/O. Anything else is rejected; there is no
//! resampling or channel mixing.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{KwsError, Result};
use crate::frontend::{AudioClip, SAMPLE_RATE_HZ};

fn wav_err(path: &Path, message: impl ToString) -> KwsError {
    KwsError::Wav {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

pub fn wav_spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE_HZ,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec != wav_spec() {
        return Err(wav_err(
            path,
            format!(
                "unsupported encoding: {} channel(s), {} Hz, {}-bit {:?}; expected mono 16 kHz 16-bit PCM",
                spec.channels, spec.sample_rate, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    AudioClip::new(samples).map_err(|e| wav_err(path, e))
}

/// Quantizes to 16 bits with rounding; samples are clamped to [-1, 1].
pub fn quantize(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| KwsError::io(parent, e))?;
    }
    let mut writer = WavWriter::create(path, wav_spec()).map_err(|e| wav_err(path, e))?;
    for &s in clip.samples() {
        writer
            .write_sample(quantize(s))
            .map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip =
            AudioClip::new((0..500).map(|i| (i as f64 * 0.03).sin() * 0.8).collect()).unwrap();
        write_wav(&path, &clip).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), clip.len());
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }

    #[test]
    fn rejects_other_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = WavSpec {
            channels: 2,
            ..wav_spec()
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for _ in 0..20 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(KwsError::Wav { .. })));

        let path = dir.path().join("8k.wav");
        let spec = WavSpec {
            sample_rate: 8000,
            ..wav_spec()
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&path).is_err());
    }
}
