use ndarray::{concatenate, s, Array2, Axis};

use super::Waveform;
use crate::error::{Error, Result};

/// Fixed segment length used for conversion and detection.
pub const SEGMENT_LEN: usize = 64600;

/// Fixed-length mono windows cut from one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    /// `[n_segments, segment_len]`.
    pub segments: Array2<f64>,
    pub source_utterance_id: String,
    pub original_length: usize,
}

impl SegmentBatch {
    pub fn len(&self) -> usize {
        self.segments.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_len(&self) -> usize {
        self.segments.ncols()
    }
}

/// Splits a mono utterance into `seg_len` windows. The tail window is
/// completed by cyclically repeating the utterance from its first sample.
pub fn segment_utterance(id: &str, wave: &Waveform, seg_len: usize) -> Result<SegmentBatch> {
    if !wave.is_mono() {
        return Err(Error::Validation(format!(
            "segmentation expects mono audio, got {} channels",
            wave.channels()
        )));
    }
    if seg_len == 0 {
        return Err(Error::Validation("segment length must be positive".into()));
    }
    let x = wave.channel(0);
    let len = x.len();
    let n = len.div_ceil(seg_len);
    let segments = Array2::from_shape_fn((n, seg_len), |(k, j)| x[(k * seg_len + j) % len]);
    Ok(SegmentBatch {
        segments,
        source_utterance_id: id.to_string(),
        original_length: len,
    })
}

/// Concatenates converted stereo segments (`[2, seg_len]` each) and truncates
/// to `original_length`.
pub fn merge_segments(converted: &[Array2<f64>], original_length: usize, sample_rate: u32) -> Result<Waveform> {
    let first = converted
        .first()
        .ok_or_else(|| Error::Validation("no segments to merge".into()))?;
    for (i, seg) in converted.iter().enumerate() {
        if seg.nrows() != 2 {
            return Err(Error::Validation(format!(
                "segment {i} has {} channels, expected 2",
                seg.nrows()
            )));
        }
        if seg.ncols() != first.ncols() {
            return Err(Error::Validation(format!(
                "segment {i} has length {}, expected {}",
                seg.ncols(),
                first.ncols()
            )));
        }
    }
    let total = first.ncols() * converted.len();
    if original_length == 0 || original_length > total {
        return Err(Error::Validation(format!(
            "original length {original_length} not within merged length {total}"
        )));
    }
    let views: Vec<_> = converted.iter().map(|s| s.view()).collect();
    let merged = concatenate(Axis(1), &views).expect("validated shapes");
    Waveform::new(merged.slice(s![.., ..original_length]).to_owned(), sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(len: usize) -> Waveform {
        Waveform::mono((0..len).map(|i| i as f64).collect(), 16000).unwrap()
    }

    #[test]
    fn exact_fit_and_exact_multiple() {
        assert_eq!(segment_utterance("u", &ramp(64600), SEGMENT_LEN).unwrap().len(), 1);
        let b = segment_utterance("u", &ramp(129_200), SEGMENT_LEN).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.segments[[1, 0]], 64600.0);
        assert_eq!(b.segments[[1, 64599]], 129_199.0);
    }

    #[test]
    fn tail_is_cyclically_padded() {
        let b = segment_utterance("u", &ramp(70_000), SEGMENT_LEN).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.original_length, 70_000);
        // Independent index arithmetic: 1-based samples 64601..=70000 then 1..=59200.
        let mut expected: Vec<f64> = (64_601..=70_000).map(|i| (i - 1) as f64).collect();
        expected.extend((1..=59_200).map(|i| (i - 1) as f64));
        assert_eq!(expected.len(), SEGMENT_LEN);
        assert_eq!(b.segments.row(1).to_vec(), expected);
    }

    #[test]
    fn short_utterance_repeats_until_full() {
        let b = segment_utterance("u", &ramp(3), 8).unwrap();
        assert_eq!(b.segments.row(0).to_vec(), vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn stereo_input_rejected() {
        let w = Waveform::stereo(vec![0.0; 4], vec![0.0; 4], 16000).unwrap();
        assert!(segment_utterance("u", &w, 4).is_err());
    }

    #[test]
    fn merge_contracts() {
        let seg = Array2::from_shape_fn((2, 5), |(c, t)| (c * 10 + t) as f64);
        let single = merge_segments(std::slice::from_ref(&seg), 5, 16000).unwrap();
        assert_eq!(single.samples(), &seg);

        let long = Array2::<f64>::zeros((2, SEGMENT_LEN));
        let merged = merge_segments(&[long.clone(), long], 70_000, 16000).unwrap();
        assert_eq!((merged.channels(), merged.len()), (2, 70_000));

        assert!(merge_segments(&[], 5, 16000).is_err());
        let mono = Array2::<f64>::zeros((1, 5));
        assert!(matches!(merge_segments(&[mono], 5, 16000), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn identity_conversion_round_trips(len in 1usize..300, seg in 1usize..64) {
            let x: Vec<f64> = (0..len).map(|i| ((i * 7919) % 1013) as f64 / 1013.0 - 0.5).collect();
            let w = Waveform::mono(x, 16000).unwrap();
            let batch = segment_utterance("u", &w, seg).unwrap();
            prop_assert!(batch.segments.ncols() == seg);
            let converted: Vec<Array2<f64>> = batch
                .segments
                .outer_iter()
                .map(|row| {
                    let r = row.insert_axis(Axis(0));
                    concatenate(Axis(0), &[r, r]).unwrap()
                })
                .collect();
            let merged = merge_segments(&converted, batch.original_length, 16000).unwrap();
            prop_assert_eq!(merged.channel(0), w.channel(0));
            prop_assert_eq!(merged.channel(1), w.channel(0));
        }
    }
}
