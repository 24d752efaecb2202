use std::io::Cursor;
use std::path::Path;

use super::SAMPLE_RATE;
use crate::error::{Error, Result};

/// Decodes a RIFF/WAVE PCM16 mono 16 kHz buffer into samples in [-1, 1).
pub fn parse_wav(bytes: &[u8]) -> Result<Vec<f32>> {
    let reader =
        hound::WavReader::new(Cursor::new(bytes)).map_err(|e| Error::Wav(e.to_string()))?;
    decode(reader)
}

pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(Error::at_path(path))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Wav(msg) => Error::Wav(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn decode<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<Vec<f32>> {
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "expected 16-bit integer PCM, got {:?} with {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Wav(format!(
            "expected mono, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Wav(format!(
            "expected {SAMPLE_RATE} Hz, got {} Hz",
            spec.sample_rate
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| v as f32 / 32768.0)
                .map_err(|e| Error::Wav(e.to_string()))
        })
        .collect()
}

/// Encodes samples as PCM16 mono 16 kHz, clamping to the int16 range.
pub fn encode_wav(samples: &[f32]) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(|e| Error::Wav(e.to_string()))?;
        for &s in samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v).map_err(|e| Error::Wav(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::Wav(e.to_string()))?;
    }
    Ok(buf.into_inner())
}
