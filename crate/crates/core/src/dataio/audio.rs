use std::path::Path;

use audioadapter::Adapter;
use audioadapter_buffers::direct::SequentialSliceOfVecs;
use ndarray::Array2;
use rubato::{Fft, FixedSync, Resampler};

use super::Waveform;
use crate::error::{Error, Result};

/// Reads a PCM WAV file, normalizing to `[-1, 1]` and resampling to
/// `expected_sr` when the container rate differs.
pub fn load_waveform(path: &Path, expected_sr: u32) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(channels == 1 || channels == 2) {
        return Err(Error::Validation(format!(
            "{}: {channels}-channel audio is not supported",
            path.display()
        )));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
    };
    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(Error::Validation(format!("{}: zero-length audio", path.display())));
    }
    let mut per_channel = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, &v) in frame.iter().enumerate() {
            per_channel[c].push(v);
        }
    }
    if spec.sample_rate == expected_sr {
        return build(per_channel, expected_sr);
    }
    let resampled = resample_channels(&per_channel, spec.sample_rate, expected_sr)?;
    Ok(build(resampled, expected_sr)?.with_resampled_from(spec.sample_rate))
}

fn build(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Waveform> {
    let len = channels[0].len();
    let rows = channels.len();
    let data: Vec<f64> = channels.into_iter().flatten().collect();
    Waveform::new(Array2::from_shape_vec((rows, len), data).expect("rectangular"), sample_rate)
}

/// Band-limited rate conversion of equal-length channels.
pub fn resample_channels(channels: &[Vec<f64>], from: u32, to: u32) -> Result<Vec<Vec<f64>>> {
    if from == to {
        return Ok(channels.to_vec());
    }
    let frames = channels.first().map_or(0, Vec::len);
    let mut resampler = Fft::<f64>::new(from as usize, to as usize, 1024, channels.len(), FixedSync::Both)
        .map_err(|e| Error::Validation(format!("cannot resample {from} Hz -> {to} Hz: {e}")))?;
    let input = SequentialSliceOfVecs::new(channels, channels.len(), frames)
        .map_err(|e| Error::Validation(format!("resampler input: {e}")))?;
    let output = resampler
        .process_all(&input, frames, None)
        .map_err(|e| Error::Validation(format!("resampling failed: {e}")))?;
    let out_frames = ((frames as u64 * to as u64 + from as u64 / 2) / from as u64).max(1) as usize;
    Ok((0..channels.len())
        .map(|c| {
            (0..out_frames)
                .map(|f| {
                    if f < output.frames() {
                        output.read_sample(c, f).unwrap_or(0.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

/// Writes 16-bit linear PCM, clipping to `[-1, 1]`; the file is replaced atomically.
pub fn write_waveform(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: wave.channels() as u16,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    let mut writer = hound::WavWriter::new(&mut cursor, spec)?;
    let samples = wave.samples();
    for t in 0..wave.len() {
        for c in 0..wave.channels() {
            let v = (samples[[c, t]].clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v)?;
        }
    }
    writer.finalize()?;
    crate::persist::write_atomic(path, &cursor.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, sr: u32, len: usize) -> Vec<f64> {
        (0..len)
            .map(|t| 0.5 * (2.0 * std::f64::consts::PI * freq * t as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn matching_rate_is_not_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::mono(tone(440.0, 16000, 1600), 16000).unwrap();
        write_waveform(&path, &w).unwrap();
        let back = load_waveform(&path, 16000).unwrap();
        assert_eq!(back.len(), 1600);
        assert_eq!(back.resampled_from(), None);
        let err = (&back.samples().row(0) - &w.samples().row(0)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err <= 1.0 / 32767.0, "{err}");
    }

    #[test]
    fn higher_rate_is_resampled_and_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let w = Waveform::mono(tone(440.0, 48000, 48000), 48000).unwrap();
        write_waveform(&path, &w).unwrap();
        let back = load_waveform(&path, 16000).unwrap();
        assert_eq!(back.sample_rate(), 16000);
        assert_eq!(back.resampled_from(), Some(48000));
        assert_eq!(back.len(), 16000);
        // Away from the edges the tone survives conversion.
        let reference = tone(440.0, 16000, 16000);
        let mid = 4000..12000;
        let err: f64 = mid
            .clone()
            .map(|t| (back.samples()[[0, t]] - reference[t]).powi(2))
            .sum::<f64>()
            / mid.len() as f64;
        assert!(err.sqrt() < 0.02, "rms error {}", err.sqrt());
    }

    #[test]
    fn single_sample_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        write_waveform(&path, &Waveform::mono(vec![0.25], 16000).unwrap()).unwrap();
        let back = load_waveform(&path, 16000).unwrap();
        assert_eq!(back.len(), 1);
    }

    #[test]
    fn zero_length_and_corrupt_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        hound::WavWriter::create(&empty, spec).unwrap().finalize().unwrap();
        assert!(matches!(load_waveform(&empty, 16000), Err(Error::Validation(_))));

        let corrupt = dir.path().join("corrupt.wav");
        std::fs::write(&corrupt, b"RIFF....not a wav").unwrap();
        assert!(load_waveform(&corrupt, 16000).is_err());
        assert!(matches!(load_waveform(&dir.path().join("missing.wav"), 16000), Err(Error::Io { .. })));
    }
}
