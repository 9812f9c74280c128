use std::path::{Path, PathBuf};

use super::fixtures::BinauralPair;
use super::{load_conditioning, load_waveform, save_conditioning, write_waveform};
use crate::error::{Error, Result};

pub const PAIRED_LAYOUT: &str =
    "<root>/mono/<id>.wav (mono), <root>/binaural/<id>.wav (stereo), <root>/conditioning/<id>.txt or .bin";

fn layout_error(root: &Path, what: String) -> Error {
    Error::Validation(format!("{}: {what}; expected layout {PAIRED_LAYOUT}", root.display()))
}

fn conditioning_path(root: &Path, id: &str) -> Option<PathBuf> {
    ["txt", "bin"]
        .iter()
        .map(|ext| root.join("conditioning").join(format!("{id}.{ext}")))
        .find(|p| p.exists())
}

/// Reads every `<id>` present under `mono/` with its binaural target and
/// conditioning track, sorted by id.
pub fn load_paired_corpus(root: &Path, sample_rate: u32) -> Result<Vec<BinauralPair>> {
    for sub in ["mono", "binaural", "conditioning"] {
        if !root.join(sub).is_dir() {
            return Err(layout_error(root, format!("missing directory {sub}/")));
        }
    }
    let mono_dir = root.join("mono");
    let mut ids: Vec<String> = std::fs::read_dir(&mono_dir)
        .map_err(|e| Error::io(&mono_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(layout_error(root, "no .wav files in mono/".into()));
    }
    ids.iter()
        .map(|id| {
            let mono = load_waveform(&mono_dir.join(format!("{id}.wav")), sample_rate)?;
            let stereo = load_waveform(&root.join("binaural").join(format!("{id}.wav")), sample_rate)?;
            let cpath = conditioning_path(root, id)
                .ok_or_else(|| layout_error(root, format!("no conditioning track for {id}")))?;
            let conditioning = load_conditioning(&cpath, Some(sample_rate))?;
            if !mono.is_mono() || stereo.channels() != 2 {
                return Err(layout_error(root, format!("{id}: mono/ must be 1 channel, binaural/ 2 channels")));
            }
            if stereo.len() != mono.len() || conditioning.len() < mono.len() {
                return Err(Error::Validation(format!(
                    "{id}: mono has {} samples, binaural {}, conditioning {}",
                    mono.len(),
                    stereo.len(),
                    conditioning.len()
                )));
            }
            Ok(BinauralPair {
                mono,
                conditioning,
                stereo,
            })
        })
        .collect()
}

/// Writes pairs in the layout read by [`load_paired_corpus`], ids `pair_0000`...
pub fn write_paired_corpus(root: &Path, pairs: &[BinauralPair]) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        let id = format!("pair_{i:04}");
        write_waveform(&root.join("mono").join(format!("{id}.wav")), &p.mono)?;
        write_waveform(&root.join("binaural").join(format!("{id}.wav")), &p.stereo)?;
        save_conditioning(&root.join("conditioning").join(format!("{id}.bin")), &p.conditioning)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::fixtures::synth_binaural_pairs;

    #[test]
    fn round_trip_and_layout_errors() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synth_binaural_pairs(2, 2, 800, 16000).unwrap();
        write_paired_corpus(dir.path(), &pairs).unwrap();
        let back = load_paired_corpus(dir.path(), 16000).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].conditioning, pairs[0].conditioning);
        let d = (&back[1].stereo.samples().view() - &pairs[1].stereo.samples().view())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d < 1.0 / 32767.0, "{d}");

        std::fs::remove_dir_all(dir.path().join("conditioning")).unwrap();
        let msg = load_paired_corpus(dir.path(), 16000).unwrap_err().to_string();
        assert!(msg.contains("conditioning/") && msg.contains("expected layout"), "{msg}");
    }
}
