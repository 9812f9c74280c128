//! Mono-to-stereo converter: geometric warp plus a learned correction
//! (WarpNet), monotone/causal warp application, and a conditional dilated
//! temporal ConvNet.

mod warp;

use std::f64::consts::TAU;

use ndarray::{Array1, Array2, Array3, Axis, Ix3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::fixtures::BinauralPair;
use crate::dataio::{
    merge_segments, sample_conditioning, segment_utterance, ConditioningTrack, Waveform, DEFAULT_EAR_OFFSET,
    N_FEATURES, SEGMENT_LEN,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, Init, Mode, ParamSet, Session};
use crate::tensor::{Conv1dSpec, Tape, Tensor, Var};

pub use warp::{apply_warp, enforce_warp, enforce_warpfield, geometric_warpfield, warp_read, Warpfield};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinauralizerConfig {
    pub sample_rate: u32,
    pub segment_len: usize,
    pub speed_of_sound: f64,
    pub ear_offset: f64,
    pub warpnet_layers: usize,
    pub warpnet_kernel: usize,
    pub warpnet_channels: usize,
    pub convnet_blocks: usize,
    pub convnet_dilations: Vec<usize>,
    pub convnet_kernel: usize,
    pub convnet_channels: usize,
    /// Adds `phase_weight * (1 - cos dphi)` on a short-time spectrum to the L2 loss.
    pub phase_loss: bool,
    pub phase_weight: f64,
    pub phase_window: usize,
    pub phase_hop: usize,
}

impl Default for BinauralizerConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl BinauralizerConfig {
    /// Full-size converter operating on 64600-sample segments at 16 kHz.
    pub fn full() -> Self {
        Self {
            sample_rate: 16000,
            segment_len: SEGMENT_LEN,
            speed_of_sound: 343.0,
            ear_offset: DEFAULT_EAR_OFFSET,
            warpnet_layers: 3,
            warpnet_kernel: 5,
            warpnet_channels: 64,
            convnet_blocks: 3,
            convnet_dilations: vec![1, 2, 4, 8],
            convnet_kernel: 2,
            convnet_channels: 64,
            phase_loss: false,
            phase_weight: 0.01,
            phase_window: 64,
            phase_hop: 16,
        }
    }

    /// Same topology with narrow layers and short segments, for quick runs.
    pub fn desk() -> Self {
        Self {
            segment_len: 16000,
            warpnet_channels: 16,
            convnet_channels: 16,
            ..Self::full()
        }
    }

    /// `1 + sum (kernel - 1) * dilation` over every dilated layer.
    pub fn receptive_field(&self) -> usize {
        1 + self.convnet_blocks * self.convnet_dilations.iter().map(|d| (self.convnet_kernel - 1) * d).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("binauralizer: {m}")));
        if self.sample_rate == 0 || self.segment_len == 0 {
            return bad("sample rate and segment length must be positive");
        }
        if self.warpnet_layers == 0 || self.warpnet_kernel.is_multiple_of(2) || self.warpnet_channels == 0 {
            return bad("warpnet needs at least one layer, an odd kernel and positive width");
        }
        if self.convnet_kernel == 0 || self.convnet_channels == 0 || self.convnet_dilations.contains(&0) {
            return bad("convnet kernel, width and dilations must be positive");
        }
        if !(self.speed_of_sound > 0.0 && self.ear_offset >= 0.0) {
            return bad("speed of sound must be positive and ear offset non-negative");
        }
        if self.phase_loss && (self.phase_window < 2 || self.phase_hop == 0) {
            return bad("phase loss needs window >= 2 and hop >= 1");
        }
        Ok(())
    }
}

/// Converter weights with their hyperparameters and freeze state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinauralizerParams {
    pub config: BinauralizerConfig,
    pub params: ParamSet,
    pub frozen: bool,
    /// False until at least one pretraining step has been applied.
    pub trained: bool,
}

impl BinauralizerParams {
    /// Seeded initialization; the WarpNet and ConvNet output layers start at
    /// zero so the untrained converter is purely geometric.
    pub fn init(config: BinauralizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut init = Init::new(&mut rng, &mut params);
        let (wc, wk) = (config.warpnet_channels, config.warpnet_kernel);
        for i in 0..config.warpnet_layers {
            let cin = if i == 0 { N_FEATURES } else { wc };
            let name = format!("warpnet.{i}");
            if i + 1 == config.warpnet_layers {
                init.zeros(&format!("{name}.weight"), &[2, cin, wk]);
                init.zeros(&format!("{name}.bias"), &[2]);
            } else {
                init.conv(&name, &[wc, cin, wk], true);
            }
        }
        let c = config.convnet_channels;
        init.conv("convnet.input", &[c, 2, 1], true);
        for b in 0..config.convnet_blocks {
            for l in 0..config.convnet_dilations.len() {
                let name = format!("convnet.{b}.{l}");
                init.conv(&format!("{name}.dilated"), &[2 * c, c, config.convnet_kernel], true);
                init.conv(&format!("{name}.film"), &[4 * c, N_FEATURES, 1], true);
                init.conv(&format!("{name}.residual"), &[c, c, 1], true);
            }
        }
        init.zeros("convnet.output.weight", &[2, c, 1]);
        init.zeros("convnet.output.bias", &[2]);
        Ok(Self {
            config,
            params,
            frozen: false,
            trained: false,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Learned warp correction for one track, `[2, T]`.
    pub fn warpnet(&self, track: &ConditioningTrack) -> Result<Array2<f64>> {
        let s = Session::inference(&self.params);
        let y = warpnet_forward(&s, &self.config, &Var::constant(cond_tensor(&[track])));
        Ok(first_item(&y))
    }

    /// ConvNet stage alone on an already warped `[2, T]` signal.
    pub fn convnet(&self, x_lr: &Array2<f64>, track: &ConditioningTrack) -> Result<Array2<f64>> {
        if x_lr.nrows() != 2 || x_lr.ncols() != track.len() {
            return Err(Error::Validation(format!(
                "convnet input {:?} does not match conditioning length {}",
                x_lr.dim(),
                track.len()
            )));
        }
        let s = Session::inference(&self.params);
        let x = Var::constant(x_lr.clone().insert_axis(Axis(0)).into_dyn());
        let y = temporal_convnet_forward(&s, &self.config, &x, &Var::constant(cond_tensor(&[track])));
        Ok(first_item(&y))
    }

    /// Converts one mono segment with an aligned conditioning track.
    pub fn convert_segment(&self, mono: &[f64], track: &ConditioningTrack) -> Result<Array2<f64>> {
        if mono.len() != track.len() {
            return Err(Error::Validation(format!(
                "segment length {} differs from conditioning length {}",
                mono.len(),
                track.len()
            )));
        }
        let rho = geometric_warpfield(track, self.config.sample_rate, self.config.speed_of_sound, self.config.ear_offset)?;
        let s = Session::inference(&self.params);
        let x = Var::constant(Tensor::from_shape_vec(IxDyn(&[1, mono.len()]), mono.to_vec()).expect("shape"));
        let y = convert(&s, &self.config, &x, &cond_tensor(&[track]), &rho.values.insert_axis(Axis(0)).into_dyn());
        Ok(first_item(&y))
    }
}

fn cond_tensor(tracks: &[&ConditioningTrack]) -> Tensor {
    let len = tracks[0].len();
    let mut out = Array3::zeros((tracks.len(), N_FEATURES, len));
    for (i, t) in tracks.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(t.frames());
    }
    out.into_dyn()
}

fn first_item(y: &Var) -> Array2<f64> {
    y.value()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("[B, C, T]")
        .index_axis(Axis(0), 0)
        .to_owned()
}

fn conv(s: &Session, x: &Var, name: &str, spec: Conv1dSpec) -> Var {
    let w = s.param(&format!("{name}.weight"));
    let b = s.param(&format!("{name}.bias"));
    x.conv1d(&w, Some(&b), spec)
}

/// `[B, 14, T] -> [B, 2, T]`.
pub fn warpnet_forward(s: &Session, cfg: &BinauralizerConfig, cond: &Var) -> Var {
    let spec = Conv1dSpec::same(cfg.warpnet_kernel);
    let mut h = cond.clone();
    for i in 0..cfg.warpnet_layers {
        h = conv(s, &h, &format!("warpnet.{i}"), spec);
        if i + 1 < cfg.warpnet_layers {
            h = h.relu();
        }
    }
    h
}

/// `x_lr [B, 2, T]`, `cond [B, 14, T]` -> `[B, 2, T]`. Gated dilated causal
/// layers with per-layer scale/shift from the conditioning, residual
/// connections, and a zero-initialized output added back to the input.
pub fn temporal_convnet_forward(s: &Session, cfg: &BinauralizerConfig, x_lr: &Var, cond: &Var) -> Var {
    let c = cfg.convnet_channels;
    let mut z = conv(s, x_lr, "convnet.input", Conv1dSpec::default());
    for b in 0..cfg.convnet_blocks {
        for (l, &d) in cfg.convnet_dilations.iter().enumerate() {
            let name = format!("convnet.{b}.{l}");
            let h = conv(s, &z, &format!("{name}.dilated"), Conv1dSpec::causal(cfg.convnet_kernel, d));
            let film = conv(s, cond, &format!("{name}.film"), Conv1dSpec::default());
            let scale = film.slice_axis(1, 0, 2 * c).add_scalar(1.0);
            let shift = film.slice_axis(1, 2 * c, 4 * c);
            let h = h.mul(&scale).add(&shift);
            let gated = h.slice_axis(1, 0, c).tanh().mul(&h.slice_axis(1, c, 2 * c).sigmoid());
            z = z.add(&conv(s, &gated, &format!("{name}.residual"), Conv1dSpec::default()));
        }
    }
    x_lr.add(&conv(s, &z, "convnet.output", Conv1dSpec::default()))
}

/// Full converter: `x [B, T]`, conditioning `[B, 14, T]` and geometric warp
/// `[B, 2, T]` -> stereo `[B, 2, T]`.
pub fn convert(s: &Session, cfg: &BinauralizerConfig, x: &Var, cond: &Tensor, rho: &Tensor) -> Var {
    let cond = Var::constant(cond.clone());
    let correction = warpnet_forward(s, cfg, &cond);
    let p = enforce_warp(&Var::constant(rho.clone()).add(&correction));
    let x_lr = warp_read(x, &p);
    temporal_convnet_forward(s, cfg, &x_lr, &cond)
}

/// Segments, converts each segment with a window of one conditioning draw, and
/// merges back to the original length. Deterministic in `seed`.
pub fn binauralize_utterance(
    wave: &Waveform,
    pool: &[ConditioningTrack],
    params: &BinauralizerParams,
    seed: u64,
) -> Result<Waveform> {
    let seg = params.config.segment_len;
    let padded = wave.len().div_ceil(seg) * seg;
    let resampled: Vec<ConditioningTrack>;
    let pool = if pool.iter().any(|t| t.sample_rate() != wave.sample_rate()) {
        resampled = pool.iter().map(|t| t.resample_to(wave.sample_rate())).collect();
        &resampled[..]
    } else {
        pool
    };
    let draw = sample_conditioning(pool, padded, seed)?;
    binauralize_with_conditioning(wave, &draw.track, params)
}

/// Converts with an explicit conditioning track covering the padded length
/// (a shorter track is tiled).
pub fn binauralize_with_conditioning(
    wave: &Waveform,
    track: &ConditioningTrack,
    params: &BinauralizerParams,
) -> Result<Waveform> {
    if wave.sample_rate() != params.config.sample_rate {
        return Err(Error::Validation(format!(
            "audio at {} Hz but converter expects {} Hz",
            wave.sample_rate(),
            params.config.sample_rate
        )));
    }
    let seg = params.config.segment_len;
    let batch = segment_utterance("", wave, seg)?;
    let padded = batch.len() * seg;
    let track = if track.len() < padded { track.tile(padded) } else { track.clone() };
    let converted = batch
        .segments
        .outer_iter()
        .enumerate()
        .map(|(k, row)| params.convert_segment(row.as_slice().expect("contiguous"), &track.window(k * seg, seg)))
        .collect::<Result<Vec<_>>>()?;
    merge_segments(&converted, batch.original_length, wave.sample_rate())
}

/// One paired training example of equal lengths.
#[derive(Debug, Clone)]
pub struct PretrainItem {
    pub mono: Array1<f64>,
    pub conditioning: ConditioningTrack,
    /// `[2, T]`.
    pub target: Array2<f64>,
}

impl PretrainItem {
    pub fn from_pair(pair: &BinauralPair) -> Self {
        Self {
            mono: pair.mono.channel(0).to_owned(),
            conditioning: pair.conditioning.clone(),
            target: pair.stereo.samples().clone(),
        }
    }
}

/// Short-time spectrum by strided convolution with windowed cosine/sine
/// kernels: `[N, 1, T] -> (re, im)`, each `[N, bins, frames]`.
fn stft(x: &Var, window: usize, hop: usize) -> (Var, Var) {
    let bins = window / 2 + 1;
    let kernel = Array3::from_shape_fn((2 * bins, 1, window), |(k, _, n)| {
        let w = 0.5 - 0.5 * (TAU * n as f64 / window as f64).cos();
        let f = (k % bins) as f64;
        let arg = TAU * f * n as f64 / window as f64;
        if k < bins {
            w * arg.cos()
        } else {
            -w * arg.sin()
        }
    })
    .into_dyn();
    let spec = Conv1dSpec {
        stride: hop,
        ..Conv1dSpec::default()
    };
    let y = x.conv1d(&Var::constant(kernel), None, spec);
    (y.slice_axis(1, 0, bins), y.slice_axis(1, bins, 2 * bins))
}

/// Mean of `1 - cos(phase difference)` over all time-frequency cells.
fn phase_loss(pred: &Var, target: &Var, window: usize, hop: usize) -> Var {
    let shape = pred.shape().to_vec();
    let flat = [shape[0] * shape[1], 1, shape[2]];
    let (pr, pi) = stft(&pred.reshape(&flat), window, hop);
    let (tr, ti) = stft(&target.reshape(&flat), window, hop);
    let eps = 1e-8;
    let pm = pr.square().add(&pi.square()).add_scalar(eps).sqrt();
    let tm = tr.square().add(&ti.square()).add_scalar(eps).sqrt();
    let cos = pr.mul(&tr).add(&pi.mul(&ti)).div(&pm.mul(&tm));
    cos.neg().add_scalar(1.0).mean_all()
}

/// Pretraining loss on a batch whose items share one length.
pub fn pretrain_loss(s: &Session, cfg: &BinauralizerConfig, batch: &[PretrainItem]) -> Result<Var> {
    let first = batch.first().ok_or_else(|| Error::Validation("empty pretraining batch".into()))?;
    let len = first.mono.len();
    for (i, item) in batch.iter().enumerate() {
        if item.mono.len() != len || item.conditioning.len() != len || item.target.dim() != (2, len) {
            return Err(Error::Validation(format!(
                "pretraining item {i}: mono {}, conditioning {}, target {:?} (expected length {len})",
                item.mono.len(),
                item.conditioning.len(),
                item.target.dim()
            )));
        }
    }
    let b = batch.len();
    let mut x = Array2::zeros((b, len));
    let mut rho = Array3::zeros((b, 2, len));
    let mut target = Array3::zeros((b, 2, len));
    for (i, item) in batch.iter().enumerate() {
        x.row_mut(i).assign(&item.mono);
        let w = geometric_warpfield(&item.conditioning, cfg.sample_rate, cfg.speed_of_sound, cfg.ear_offset)?;
        rho.index_axis_mut(Axis(0), i).assign(&w.values);
        target.index_axis_mut(Axis(0), i).assign(&item.target);
    }
    let tracks: Vec<&ConditioningTrack> = batch.iter().map(|i| &i.conditioning).collect();
    let pred = convert(s, cfg, &Var::constant(x.into_dyn()), &cond_tensor(&tracks), &rho.into_dyn());
    let target = Var::constant(target.into_dyn());
    let mut loss = pred.sub(&target).square().mean_all();
    if cfg.phase_loss && len >= cfg.phase_window {
        loss = loss.add(&phase_loss(&pred, &target, cfg.phase_window, cfg.phase_hop).mul_scalar(cfg.phase_weight));
    }
    Ok(loss)
}

/// One Adam update on `batch`; returns the loss before the update.
pub fn pretrain_step(params: &mut BinauralizerParams, opt: &mut Adam, batch: &[PretrainItem]) -> Result<f64> {
    if params.frozen {
        return Err(Error::Validation("binauralizer is frozen".into()));
    }
    let grads = {
        let s = Session::new(&params.params, Some(Tape::new()), Mode::Train);
        let loss = pretrain_loss(&s, &params.config, batch)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                value,
                context: format!("pretraining loss after {} steps", opt.step),
            });
        }
        (s.gradients(&loss), value)
    };
    opt.step(&mut params.params, &grads.0);
    params.trained = true;
    Ok(grads.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::fixtures::{circular_walk, synth_binaural_pairs};
    use rand::Rng;

    fn tiny() -> BinauralizerConfig {
        BinauralizerConfig {
            segment_len: 256,
            warpnet_channels: 4,
            convnet_channels: 4,
            ..BinauralizerConfig::full()
        }
    }

    /// Listener and source both at the origin; ears at zero offset.
    fn coincident(len: usize) -> ConditioningTrack {
        let mut f = Array2::zeros((N_FEATURES, len));
        f.row_mut(6).fill(1.0);
        f.row_mut(13).fill(1.0);
        ConditioningTrack::new(f, 16000).unwrap()
    }

    fn randomize(p: &mut BinauralizerParams, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = p.params.names().map(str::to_string).collect();
        for n in names {
            p.params
                .get_mut(&n)
                .unwrap()
                .mapv_inplace(|_| rng.gen_range(-scale..scale));
        }
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(BinauralizerConfig::full().receptive_field(), 46);
    }

    #[test]
    fn zero_init_warpnet_is_zero() {
        let p = BinauralizerParams::init(tiny(), 1).unwrap();
        let c = circular_walk(2, 100, 16000).unwrap();
        assert!(p.warpnet(&c).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warpnet_locality() {
        let mut p = BinauralizerParams::init(tiny(), 1).unwrap();
        randomize(&mut p, 3, 0.3);
        let c = circular_walk(2, 60, 16000).unwrap();
        let base = p.warpnet(&c).unwrap();
        assert!(base.iter().all(|v| v.is_finite()));
        let mut f = c.frames().clone();
        let probe = 30;
        f[[0, probe]] += 1.0;
        let moved = p.warpnet(&ConditioningTrack::new(f, 16000).unwrap()).unwrap();
        let half = p.config.warpnet_layers * (p.config.warpnet_kernel / 2);
        for t in 0..60 {
            let changed = (0..2).any(|e| moved[[e, t]] != base[[e, t]]);
            if t.abs_diff(probe) > half {
                assert!(!changed, "frame {t} changed outside the receptive field");
            }
        }
        assert!((0..2).any(|e| moved[[e, probe]] != base[[e, probe]]));
    }

    #[test]
    fn convnet_impulse_response_spans_receptive_field() {
        let cfg = BinauralizerConfig {
            convnet_channels: 4,
            ..tiny()
        };
        let rf = cfg.receptive_field();
        let mut p = BinauralizerParams::init(cfg, 4).unwrap();
        randomize(&mut p, 5, 0.5);
        let len = 120;
        let c = coincident(len);
        let zero = p.convnet(&Array2::zeros((2, len)), &c).unwrap();
        let at = 40;
        let mut x = Array2::zeros((2, len));
        x[[0, at]] = 1.0;
        let y = p.convnet(&x, &c).unwrap();
        let diff: Vec<bool> = (0..len).map(|t| (0..2).any(|e| y[[e, t]] != zero[[e, t]])).collect();
        assert!((0..at).all(|t| !diff[t]), "response before the impulse");
        assert!((at + rf..len).all(|t| !diff[t]), "response past the receptive field");
        assert!(diff[at + rf - 1], "no response at the receptive-field edge");
    }

    #[test]
    fn convnet_shapes_and_zero_input() {
        let mut p = BinauralizerParams::init(tiny(), 1).unwrap();
        let names: Vec<String> = p.params.names().filter(|n| n.ends_with("bias")).map(str::to_string).collect();
        for n in names {
            p.params.get_mut(&n).unwrap().fill(0.0);
        }
        randomize_named(&mut p, "convnet.output.weight", 7);
        // Zero signal, zero conditioning and zero biases.
        for len in [1, 9600] {
            let c = ConditioningTrack::new(Array2::zeros((N_FEATURES, len)), 16000).unwrap();
            let y = p.convnet(&Array2::zeros((2, len)), &c).unwrap();
            assert_eq!(y.dim(), (2, len));
            assert!(y.iter().all(|&v| v == 0.0));
        }
        assert!(p.convnet(&Array2::zeros((2, 5)), &coincident(6)).is_err());
    }

    fn randomize_named(p: &mut BinauralizerParams, name: &str, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.params.get_mut(name).unwrap().mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }

    #[test]
    fn identity_configuration_reproduces_input() {
        let mut cfg = tiny();
        cfg.ear_offset = 0.0;
        let p = BinauralizerParams::init(cfg, 11).unwrap();
        let x: Vec<f64> = (0..700).map(|i| (i as f64 * 0.05).sin() * 0.4).collect();
        let w = Waveform::mono(x.clone(), 16000).unwrap();
        let y = binauralize_with_conditioning(&w, &coincident(700), &p).unwrap();
        for e in 0..2 {
            let err = y.channel(e).iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn utterance_length_and_determinism() {
        let p = BinauralizerParams::init(tiny(), 1).unwrap();
        let pool: Vec<_> = (0..3).map(|i| circular_walk(i, 500, 16000).unwrap()).collect();
        let x: Vec<f64> = (0..700).map(|i| (i as f64 * 0.07).cos() * 0.3).collect();
        let w = Waveform::mono(x, 16000).unwrap();
        let a = binauralize_utterance(&w, &pool, &p, 1234).unwrap();
        let b = binauralize_utterance(&w, &pool, &p, 1234).unwrap();
        assert_eq!((a.channels(), a.len()), (2, 700));
        assert_eq!(a, b);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let p = BinauralizerParams::init(tiny(), 1).unwrap();
        let track = circular_walk(1, 64, 16000).unwrap();
        let mono = Array1::from_shape_fn(64, |i| (i as f64 * 0.2).sin());
        let target = p.convert_segment(mono.as_slice().unwrap(), &track).unwrap();
        let item = PretrainItem {
            mono,
            conditioning: track,
            target,
        };
        let s = Session::inference(&p.params);
        assert_eq!(pretrain_loss(&s, &p.config, &[item]).unwrap().item(), 0.0);
    }

    fn loss_gradient_check(phase: bool) {
        let mut cfg = tiny();
        cfg.phase_loss = phase;
        cfg.phase_window = 16;
        cfg.phase_hop = 8;
        cfg.phase_weight = 0.5;
        let mut p = BinauralizerParams::init(cfg, 2).unwrap();
        randomize(&mut p, 8, 0.2);
        let batch: Vec<PretrainItem> = synth_binaural_pairs(3, 2, 48, 16000)
            .unwrap()
            .iter()
            .map(PretrainItem::from_pair)
            .collect();
        let s = Session::new(&p.params, Some(Tape::new()), Mode::Train);
        let loss = pretrain_loss(&s, &p.config, &batch).unwrap();
        let grads = s.gradients(&loss);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let names: Vec<String> = p.params.names().map(str::to_string).collect();
        let eps = 1e-6;
        for _ in 0..5 {
            let name = &names[rng.gen_range(0..names.len())];
            let size = p.params.get(name).unwrap().len();
            let j = rng.gen_range(0..size);
            let eval = |delta: f64| {
                let mut q = p.params.clone();
                q.get_mut(name).unwrap().as_slice_mut().unwrap()[j] += delta;
                pretrain_loss(&Session::inference(&q), &p.config, &batch).unwrap().item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = grads[name].as_slice().unwrap()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(err <= 1e-4, "{name}[{j}]: analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn pretrain_gradients_match_finite_differences() {
        loss_gradient_check(false);
    }

    #[test]
    fn phase_loss_gradients_match_finite_differences() {
        loss_gradient_check(true);
    }

    #[test]
    fn pretraining_reduces_loss_and_frozen_refuses() {
        let mut p = BinauralizerParams::init(tiny(), 5).unwrap();
        let batch: Vec<PretrainItem> = synth_binaural_pairs(4, 4, 200, 16000)
            .unwrap()
            .iter()
            .map(PretrainItem::from_pair)
            .collect();
        let mut opt = Adam::new(3e-3, 0.0);
        let first = pretrain_step(&mut p, &mut opt, &batch).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = pretrain_step(&mut p, &mut opt, &batch).unwrap();
        }
        assert!(last < first, "loss {first} -> {last}");
        assert!(p.trained);
        p.freeze();
        let before = p.fingerprint();
        assert!(pretrain_step(&mut p, &mut opt, &batch).is_err());
        assert_eq!(before, p.fingerprint());
    }
}
