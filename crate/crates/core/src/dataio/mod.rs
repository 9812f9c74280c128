//! Protocols, audio, conditioning tracks, segmentation and synthetic fixtures.

mod audio;
mod conditioning;
pub mod fixtures;
mod paired;
mod protocol;
mod segment;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

pub use audio::{load_waveform, resample_channels, write_waveform};
pub use conditioning::{
    load_conditioning, sample_conditioning, save_conditioning, ConditioningSample, ConditioningTrack, Ear,
    DEFAULT_EAR_OFFSET, N_FEATURES,
};
pub use paired::{load_paired_corpus, write_paired_corpus, PAIRED_LAYOUT};
pub use protocol::{parse_protocol, parse_protocol_str, Label, Subset, TrialEntry, TrialProtocol};
pub use segment::{merge_segments, segment_utterance, SegmentBatch, SEGMENT_LEN};

/// One- or two-channel audio, stored `[channels, length]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Array2<f64>,
    sample_rate: u32,
    resampled_from: Option<u32>,
}

impl Waveform {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        let (channels, len) = samples.dim();
        if !(channels == 1 || channels == 2) {
            return Err(Error::Validation(format!("waveform must have 1 or 2 channels, got {channels}")));
        }
        if len == 0 {
            return Err(Error::Validation("waveform has zero length".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite sample at flat index {bad}")));
        }
        Ok(Self {
            samples,
            sample_rate,
            resampled_from: None,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let len = samples.len();
        Self::new(
            Array2::from_shape_vec((1, len), samples).expect("1 x len"),
            sample_rate,
        )
    }

    pub fn stereo(left: Vec<f64>, right: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::Validation(format!(
                "stereo channels differ in length ({} vs {})",
                left.len(),
                right.len()
            )));
        }
        let len = left.len();
        let mut data = left;
        data.extend(right);
        Self::new(Array2::from_shape_vec((2, len), data).expect("2 x len"), sample_rate)
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_mono(&self) -> bool {
        self.channels() == 1
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Original container rate when the audio was resampled on load.
    pub fn resampled_from(&self) -> Option<u32> {
        self.resampled_from
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn channel(&self, index: usize) -> ArrayView1<'_, f64> {
        self.samples.row(index)
    }

    /// Average of all channels.
    pub fn downmix(&self) -> Array1<f64> {
        self.samples.mean_axis(Axis(0)).expect("non-empty")
    }

    pub(crate) fn with_resampled_from(mut self, rate: u32) -> Self {
        self.resampled_from = Some(rate);
        self
    }
}

/// Utterance audio looked up by id.
pub trait AudioStore {
    fn load(&self, utterance_id: &str) -> Result<Waveform>;
}

/// Directory of `{id}.wav` files; multi-channel files are downmixed to mono.
#[derive(Debug, Clone)]
pub struct WavDir {
    pub root: std::path::PathBuf,
    pub sample_rate: u32,
}

impl AudioStore for WavDir {
    fn load(&self, utterance_id: &str) -> Result<Waveform> {
        let path = self.root.join(format!("{utterance_id}.wav"));
        let wave = load_waveform(&path, self.sample_rate)?;
        if wave.is_mono() {
            Ok(wave)
        } else {
            Waveform::mono(wave.downmix().to_vec(), wave.sample_rate())
        }
    }
}

impl AudioStore for fixtures::FixtureCorpus {
    fn load(&self, utterance_id: &str) -> Result<Waveform> {
        self.waveform(utterance_id)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("utterance {utterance_id} not in fixture corpus")))
    }
}
