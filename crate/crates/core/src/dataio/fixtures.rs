//! Deterministic synthetic corpora for desk-scale runs.
//!
//! Bonafide trials are band-limited harmonic tones. Spoofed trials reuse the
//! tone of their partner bonafide trial (same fundamental, same harmonic
//! weights) with attack-specific spectral notches and frame-wise phase jitter.
//! Conditioning tracks follow a source walking a 1.5 m circle around a fixed
//! listener, and a simple physical renderer supplies reference stereo for
//! converter pretraining.

use std::f64::consts::{PI, TAU};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conditioning::distance;
use super::{ConditioningTrack, Ear, Label, Subset, TrialEntry, TrialProtocol, Waveform, N_FEATURES};
use crate::error::{Error, Result};

pub const WALK_RADIUS: f64 = 1.5;
pub const SPEED_OF_SOUND: f64 = 343.0;
/// Ear half-spacing of the reference renderer; deliberately not the
/// converter's default so the learned warp has something to correct.
pub const REFERENCE_EAR_OFFSET: f64 = 0.095;
const ATTACKS: [&str; 3] = ["A01", "A02", "A03"];
const JITTER_FRAME_SECONDS: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_utts: usize,
    pub sample_rate: u32,
    /// Fraction of bonafide trials.
    pub class_ratio: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub subset: Subset,
    pub id_prefix: String,
    pub n_tracks: usize,
    pub track_len: usize,
}

impl FixtureSpec {
    pub fn new(seed: u64, n_utts: usize, sample_rate: u32, class_ratio: f64) -> Self {
        let sr = sample_rate as usize;
        Self {
            seed,
            n_utts,
            sample_rate,
            class_ratio,
            min_len: sr / 2,
            max_len: sr,
            subset: Subset::Train,
            id_prefix: "FX_T".into(),
            n_tracks: 8,
            track_len: 2 * sr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureCorpus {
    pub protocol: TrialProtocol,
    pub waveforms: Vec<(String, Waveform)>,
    pub pool: Vec<ConditioningTrack>,
}

impl FixtureCorpus {
    pub fn waveform(&self, utterance_id: &str) -> Option<&Waveform> {
        self.waveforms
            .iter()
            .find(|(id, _)| id == utterance_id)
            .map(|(_, w)| w)
    }
}

#[derive(Debug, Clone)]
struct Tone {
    f0: f64,
    amps: Vec<f64>,
    phases: Vec<f64>,
    tremolo_hz: f64,
    len: usize,
}

impl Tone {
    fn draw(rng: &mut ChaCha8Rng, sr: u32, min_len: usize, max_len: usize) -> Tone {
        let f0 = rng.gen_range(100.0..220.0);
        let limit = 0.45 * sr as f64;
        let n_harm = (limit / f0).floor() as usize;
        let tilt = rng.gen_range(0.6..1.2);
        let amps = (1..=n_harm)
            .map(|h| rng.gen_range(0.5..1.0) / (h as f64).powf(tilt))
            .collect();
        let phases = (0..n_harm).map(|_| rng.gen_range(0.0..TAU)).collect();
        Tone {
            f0,
            amps,
            phases,
            tremolo_hz: rng.gen_range(2.0..6.0),
            len: rng.gen_range(min_len..=max_len.max(min_len)),
        }
    }

    fn render(&self, sr: u32, notches: &[(f64, f64)], jitter: Option<(&mut ChaCha8Rng, f64)>) -> Vec<f64> {
        let sr_f = sr as f64;
        let frame = ((JITTER_FRAME_SECONDS * sr_f) as usize).max(1);
        let n_frames = self.len.div_ceil(frame);
        let offsets: Vec<Vec<f64>> = match jitter {
            Some((rng, amount)) => (0..self.amps.len())
                .map(|_| (0..n_frames).map(|_| rng.gen_range(-amount..amount)).collect())
                .collect(),
            None => vec![vec![0.0; n_frames]; self.amps.len()],
        };
        let mut out: Vec<f64> = (0..self.len)
            .map(|t| {
                let time = t as f64 / sr_f;
                let env = 0.75 + 0.25 * (TAU * self.tremolo_hz * time).sin();
                let fi = t / frame;
                self.amps
                    .iter()
                    .enumerate()
                    .filter(|(h, _)| {
                        let f = (h + 1) as f64 * self.f0;
                        !notches.iter().any(|&(lo, hi)| f >= lo && f <= hi)
                    })
                    .map(|(h, a)| {
                        let f = (h + 1) as f64 * self.f0;
                        a * (TAU * f * time + self.phases[h] + offsets[h][fi]).sin()
                    })
                    .sum::<f64>()
                    * env
            })
            .collect();
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            out.iter_mut().for_each(|v| *v *= 0.5 / peak);
        }
        out
    }
}

fn attack_notches(attack: usize) -> Vec<(f64, f64)> {
    match attack % ATTACKS.len() {
        0 => vec![(1200.0, 1700.0), (3000.0, 3600.0)],
        1 => vec![(2000.0, 2600.0), (4200.0, 5000.0)],
        _ => vec![(900.0, 1300.0), (2600.0, 3200.0), (5200.0, 6000.0)],
    }
}

fn attack_jitter(attack: usize) -> f64 {
    [0.9, 0.6, 1.2][attack % ATTACKS.len()]
}

/// Shorthand for [`synth_fixture_corpus`] with default lengths and pool.
pub fn synth_fixture_dataset(seed: u64, n_utts: usize, sample_rate: u32, class_ratio: f64) -> Result<FixtureCorpus> {
    synth_fixture_corpus(&FixtureSpec::new(seed, n_utts, sample_rate, class_ratio))
}

pub fn synth_fixture_corpus(spec: &FixtureSpec) -> Result<FixtureCorpus> {
    if spec.n_utts < 2 {
        return Err(Error::Validation(format!("fixture needs at least 2 utterances, got {}", spec.n_utts)));
    }
    if !(0.0..=1.0).contains(&spec.class_ratio) {
        return Err(Error::Validation(format!("class ratio {} outside [0, 1]", spec.class_ratio)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_bona = (spec.n_utts as f64 * spec.class_ratio).round() as usize;
    let n_spoof = spec.n_utts - n_bona;
    let n_pairs = n_bona.max(n_spoof);
    let tones: Vec<Tone> = (0..n_pairs)
        .map(|_| Tone::draw(&mut rng, spec.sample_rate, spec.min_len, spec.max_len))
        .collect();

    // Interleave bonafide and spoof so any prefix of the corpus is balanced.
    let mut order = Vec::with_capacity(spec.n_utts);
    let (mut b, mut s) = (0, 0);
    while b < n_bona || s < n_spoof {
        if b < n_bona {
            order.push((Label::Bonafide, b));
            b += 1;
        }
        if s < n_spoof {
            order.push((Label::Spoof, s));
            s += 1;
        }
    }
    let mut protocol_entries = Vec::with_capacity(spec.n_utts);
    let mut waveforms = Vec::with_capacity(spec.n_utts);
    for (k, (label, pair)) in order.into_iter().enumerate() {
        let tone = &tones[pair];
        let utterance_id = format!("{}_{k:04}", spec.id_prefix);
        let speaker_id = format!("FXS_{:02}", pair % 4);
        let (samples, attack_id) = match label {
            Label::Bonafide => (tone.render(spec.sample_rate, &[], None), "-".to_string()),
            Label::Spoof => {
                let attack = pair % ATTACKS.len();
                let samples = tone.render(
                    spec.sample_rate,
                    &attack_notches(attack),
                    Some((&mut rng, attack_jitter(attack))),
                );
                (samples, ATTACKS[attack].to_string())
            }
        };
        protocol_entries.push(TrialEntry {
            speaker_id,
            utterance_id: utterance_id.clone(),
            attack_id,
            label,
        });
        waveforms.push((utterance_id, Waveform::mono(samples, spec.sample_rate)?));
    }
    let pool = (0..spec.n_tracks)
        .map(|i| circular_walk(spec.seed.wrapping_mul(31).wrapping_add(i as u64), spec.track_len, spec.sample_rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(FixtureCorpus {
        protocol: TrialProtocol {
            subset: spec.subset,
            entries: protocol_entries,
        },
        waveforms,
        pool,
    })
}

/// A source walking a 1.5 m circle around a listener fixed at the origin and
/// facing +x; the source faces the listener.
pub fn circular_walk(seed: u64, len: usize, sample_rate: u32) -> Result<ConditioningTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0.0..TAU);
    let speed = rng.gen_range(0.3..0.8) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let height = rng.gen_range(0.0..0.2);
    let wobble = rng.gen_range(0.0..0.05);
    let mut frames = Array2::zeros((N_FEATURES, len));
    for t in 0..len {
        let time = t as f64 / sample_rate as f64;
        let angle = start + speed * time;
        let radius = WALK_RADIUS + wobble * (TAU * 0.5 * time).sin();
        frames[[0, t]] = radius * angle.cos();
        frames[[1, t]] = radius * angle.sin();
        frames[[2, t]] = height;
        let yaw = angle + PI;
        frames[[5, t]] = (yaw / 2.0).sin();
        frames[[6, t]] = (yaw / 2.0).cos();
        // Listener at the origin with identity orientation.
        frames[[13, t]] = 1.0;
    }
    ConditioningTrack::new(frames, sample_rate)
}

/// Mono signal, its conditioning and reference binaural rendering.
#[derive(Debug, Clone)]
pub struct BinauralPair {
    pub mono: Waveform,
    pub conditioning: ConditioningTrack,
    pub stereo: Waveform,
}

/// Physical reference renderer: propagation delay and 1/r gain per ear, a
/// direction-dependent one-pole head-shadow low-pass, and one early reflection.
pub fn render_binaural_reference(mono: &[f64], track: &ConditioningTrack) -> Result<Waveform> {
    if track.len() < mono.len() || track.n_features() != N_FEATURES {
        return Err(Error::Validation(format!(
            "conditioning must have {N_FEATURES} features and at least {} frames",
            mono.len()
        )));
    }
    let sr = track.sample_rate() as f64;
    let read = |pos: f64| -> f64 {
        if pos <= 0.0 {
            return if pos > -1.0 { mono[0] * (1.0 + pos) } else { 0.0 };
        }
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        let a = mono[i.min(mono.len() - 1)];
        let b = mono[(i + 1).min(mono.len() - 1)];
        a + frac * (b - a)
    };
    let mut channels = Vec::with_capacity(2);
    for ear in Ear::BOTH {
        let mut direct = Vec::with_capacity(mono.len());
        let mut shadow = Vec::with_capacity(mono.len());
        for t in 0..mono.len() {
            let src = track.source_position(t);
            let pos = track.ear_position(t, ear, REFERENCE_EAR_OFFSET);
            let center = track.ear_position(t, ear, 0.0);
            let d = distance(src, pos);
            let gain = WALK_RADIUS / d.max(0.2);
            direct.push(gain * read(t as f64 - sr * d / SPEED_OF_SOUND));
            // Outward ear axis versus direction to the source.
            let axis = [pos[0] - center[0], pos[1] - center[1], pos[2] - center[2]];
            let to_src = [src[0] - pos[0], src[1] - pos[1], src[2] - pos[2]];
            let norm = distance(axis, [0.0; 3]) * d.max(1e-9);
            let cos = if norm > 0.0 {
                (axis[0] * to_src[0] + axis[1] * to_src[1] + axis[2] * to_src[2]) / norm
            } else {
                1.0
            };
            shadow.push(0.35 * (1.0 - cos) / 2.0);
        }
        let mut lp = 0.0;
        let out: Vec<f64> = direct
            .iter()
            .enumerate()
            .map(|(t, &x)| {
                lp += 0.25 * (x - lp);
                let s = shadow[t];
                let reflection = if t >= 20 { 0.2 * direct[t - 20] } else { 0.0 };
                (1.0 - s) * x + s * lp + reflection
            })
            .collect();
        channels.push(out);
    }
    let right = channels.pop().unwrap();
    let left = channels.pop().unwrap();
    Waveform::stereo(left, right, track.sample_rate())
}

/// Paired mono/stereo corpus for converter pretraining.
pub fn synth_binaural_pairs(seed: u64, n_items: usize, len: usize, sample_rate: u32) -> Result<Vec<BinauralPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_items)
        .map(|i| {
            let tone = Tone::draw(&mut rng, sample_rate, len, len);
            let mono = tone.render(sample_rate, &[], None);
            let conditioning = circular_walk(seed.wrapping_add(1000 + i as u64), len, sample_rate)?;
            let stereo = render_binaural_reference(&mono, &conditioning)?;
            Ok(BinauralPair {
                mono: Waveform::mono(mono, sample_rate)?,
                conditioning,
                stereo,
            })
        })
        .collect()
}
