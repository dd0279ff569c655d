use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

/// Reads 8/16/24/32-bit PCM or 32-bit float WAV; channels are averaged.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::Format {
            path: path.as_ref().to_path_buf(),
            reason: "no samples".into(),
        });
    }
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|f| f.iter().sum::<f32>() / f.len() as f32)
            .collect()
    };
    AudioClip::new(mono, spec.sample_rate)
}

/// Writes mono 16-bit PCM. Samples on the `k / 32768` grid survive a
/// write/read cycle exactly.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in clip.samples() {
        let q = (s as f64 * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64);
        w.write_sample(q as i16)?;
    }
    w.finalize()?;
    Ok(())
}
