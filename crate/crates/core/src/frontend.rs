//! Raw-waveform encoder: learnable sinc band-pass filterbank, residual 2-D
//! convolution stack, and graph formation over frequency or time.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Session};
use crate::tensor::{Pad2d, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub segment_len: usize,
    pub n_filters: usize,
    /// Odd sinc kernel length.
    pub kernel_len: usize,
    pub min_low_hz: f64,
    pub min_band_hz: f64,
    /// Output channels of each residual block, in order.
    pub res_channels: Vec<usize>,
}

impl FrontendConfig {
    pub fn full() -> Self {
        Self {
            sample_rate: 16000,
            segment_len: 64600,
            n_filters: 70,
            kernel_len: 129,
            min_low_hz: 50.0,
            min_band_hz: 50.0,
            res_channels: vec![32, 32, 64, 64, 64, 64],
        }
    }

    pub fn desk() -> Self {
        Self {
            segment_len: 16000,
            n_filters: 30,
            kernel_len: 65,
            res_channels: vec![8, 8, 16, 16, 16, 16],
            ..Self::full()
        }
    }

    pub fn conv_len(&self) -> usize {
        self.segment_len + 1 - self.kernel_len
    }

    /// `(1, n_filters / 3, conv_len / 3)`.
    pub fn sinc_output_shape(&self) -> [usize; 3] {
        [1, self.n_filters / 3, self.conv_len() / 3]
    }

    /// `(channels, freq_bins, time_frames)` after the residual stack.
    pub fn output_shape(&self) -> [usize; 3] {
        let [_, h, mut w] = self.sinc_output_shape();
        for _ in &self.res_channels {
            w /= 3;
        }
        [*self.res_channels.last().unwrap_or(&1), h, w]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("frontend: {m}")));
        if self.kernel_len.is_multiple_of(2) || self.kernel_len < 3 {
            return bad(format!("sinc kernel length must be odd and >= 3, got {}", self.kernel_len));
        }
        if self.segment_len < self.kernel_len {
            return bad(format!("segment length {} shorter than kernel", self.segment_len));
        }
        if self.n_filters < 3 {
            return bad("need at least 3 sinc filters".into());
        }
        let nyq = self.sample_rate as f64 / 2.0;
        if self.min_low_hz <= 0.0 || self.min_band_hz <= 0.0 || self.min_low_hz + self.min_band_hz + 1.0 >= nyq {
            return bad("minimum cutoff and bandwidth must be positive and below Nyquist".into());
        }
        if self.res_channels.is_empty() || self.res_channels.contains(&0) {
            return bad("residual channel list must be non-empty and positive".into());
        }
        let [c, h, w] = self.output_shape();
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("segment too short: output shape would be {:?}", [c, h, w]));
        }
        Ok(())
    }
}

/// Effective band edges in Hz, one pair per filter.
#[derive(Debug, Clone, PartialEq)]
pub struct SincFilterbank {
    pub low_hz: Array1<f64>,
    pub high_hz: Array1<f64>,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Registers `{prefix}.sinc.*`, `{prefix}.sinc_bn.*` and `{prefix}.res{i}.*`.
pub fn init_frontend(init: &mut Init, prefix: &str, cfg: &FrontendConfig) {
    let nyq = cfg.sample_rate as f64 / 2.0;
    let lo = hz_to_mel(30.0);
    let hi = hz_to_mel(nyq - (cfg.min_low_hz + cfg.min_band_hz));
    let n = cfg.n_filters;
    let edges: Vec<f64> = (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect();
    init.constant(
        &format!("{prefix}.sinc.low"),
        Tensor::from_shape_vec(IxDyn(&[n]), edges[..n].to_vec()).expect("shape"),
    );
    init.constant(
        &format!("{prefix}.sinc.band"),
        Tensor::from_shape_vec(IxDyn(&[n]), edges.windows(2).map(|w| w[1] - w[0]).collect()).expect("shape"),
    );
    init.batch_norm(&format!("{prefix}.sinc_bn"), 1);
    let mut cin = 1;
    for (i, &cout) in cfg.res_channels.iter().enumerate() {
        let name = format!("{prefix}.res{i}");
        init.conv(&format!("{name}.conv1"), &[cout, cin, 2, 3], true);
        init.batch_norm(&format!("{name}.bn"), cout);
        init.conv(&format!("{name}.conv2"), &[cout, cout, 2, 3], true);
        if cin != cout {
            init.conv(&format!("{name}.skip"), &[cout, cin, 1, 1], true);
        }
        cin = cout;
    }
}

#[derive(Clone, Copy)]
struct Reparam {
    low: f64,
    high: f64,
    dlow_dl: f64,
    dhigh_dlow: f64,
    dhigh_db: f64,
}

/// `low = min_low + |l|` (kept below Nyquist minus the minimum band) and
/// `high = low + min_band + |b|` (kept below Nyquist).
fn reparam(l: f64, b: f64, cfg: &FrontendConfig) -> Reparam {
    let nyq = cfg.sample_rate as f64 / 2.0;
    let low_cap = nyq - 1.0 - cfg.min_band_hz;
    let raw_low = cfg.min_low_hz + l.abs();
    let (low, dlow_dl) = if raw_low > low_cap { (low_cap, 0.0) } else { (raw_low, l.signum()) };
    let raw_high = low + cfg.min_band_hz + b.abs();
    let (high, dhigh_dlow, dhigh_db) = if raw_high > nyq - 1.0 {
        (nyq - 1.0, 0.0, 0.0)
    } else {
        (raw_high, 1.0, b.signum())
    };
    Reparam {
        low,
        high,
        dlow_dl,
        dhigh_dlow,
        dhigh_db,
    }
}

pub fn sinc_cutoffs(s: &Session, prefix: &str, cfg: &FrontendConfig) -> SincFilterbank {
    let l = s.param(&format!("{prefix}.sinc.low"));
    let b = s.param(&format!("{prefix}.sinc.band"));
    let r: Vec<Reparam> = l.value().iter().zip(b.value().iter()).map(|(&l, &b)| reparam(l, b, cfg)).collect();
    SincFilterbank {
        low_hz: r.iter().map(|r| r.low).collect(),
        high_hz: r.iter().map(|r| r.high).collect(),
    }
}

/// Hamming window written in terms of the distance to the center tap so the
/// two halves are bit-identical.
fn hamming(k: usize) -> Vec<f64> {
    let c = (k / 2) as f64;
    (0..k)
        .map(|i| 0.54 + 0.46 * (2.0 * PI * (i as f64 - c).abs() / (k - 1) as f64).cos())
        .collect()
}

/// Hamming-windowed band-pass kernels `[filters, kernel_len]`, each the
/// difference of two sinc low-passes normalized to a unit center tap.
pub fn sinc_filterbank_kernels(fb: &SincFilterbank, sample_rate: u32, kernel_len: usize) -> Array2<f64> {
    let window = hamming(kernel_len);
    let c = (kernel_len / 2) as f64;
    let sr = sample_rate as f64;
    Array2::from_shape_fn((fb.low_hz.len(), kernel_len), |(f, i)| {
        let (lo, hi) = (fb.low_hz[f], fb.high_hz[f]);
        let t = (i as f64 - c).abs() / sr;
        let g = if t == 0.0 {
            2.0 * (hi - lo)
        } else {
            ((2.0 * PI * hi * t).sin() - (2.0 * PI * lo * t).sin()) / (PI * t)
        };
        window[i] * g / (2.0 * (hi - lo))
    })
}

/// Sinc kernels as a differentiable function of the raw cutoff parameters:
/// `[filters, 1, kernel_len]`.
pub fn sinc_kernels(low: &Var, band: &Var, cfg: &FrontendConfig) -> Var {
    let r: Vec<Reparam> = low.value().iter().zip(band.value().iter()).map(|(&l, &b)| reparam(l, b, cfg)).collect();
    let fb = SincFilterbank {
        low_hz: r.iter().map(|r| r.low).collect(),
        high_hz: r.iter().map(|r| r.high).collect(),
    };
    let k = cfg.kernel_len;
    let kernels = sinc_filterbank_kernels(&fb, cfg.sample_rate, k);
    let window = hamming(k);
    let sr = cfg.sample_rate as f64;
    let c = (k / 2) as f64;
    let value = kernels.clone().into_shape_with_order((r.len(), 1, k)).expect("shape").into_dyn();
    Var::from_op(value, &[low, band], move |grad, _| {
        let n = r.len();
        let mut dl = Array1::zeros(n);
        let mut db = Array1::zeros(n);
        for f in 0..n {
            let Reparam {
                low,
                high,
                dlow_dl,
                dhigh_dlow,
                dhigh_db,
            } = r[f];
            let bw = high - low;
            let (mut g_low, mut g_high) = (0.0, 0.0);
            for i in 0..k {
                let t = (i as f64 - c) / sr;
                let kv = kernels[[f, i]];
                let gv = grad[[f, 0, i]];
                // dk/dhigh and dk/dlow of w * g / (2 bw).
                let dk_dh = window[i] * (2.0 * PI * high * t).cos() / bw - kv / bw;
                let dk_dl = -window[i] * (2.0 * PI * low * t).cos() / bw + kv / bw;
                g_high += gv * dk_dh;
                g_low += gv * dk_dl;
            }
            let total_low = g_low + g_high * dhigh_dlow;
            dl[f] = total_low * dlow_dl;
            db[f] = g_high * dhigh_db;
        }
        vec![Some(dl.into_dyn()), Some(db.into_dyn())]
    })
}

fn check_shape(context: &str, x: &Var, expected: &[usize]) -> Result<()> {
    if &x.shape()[1..] != expected {
        return Err(Error::shape(context, expected, &x.shape()[1..]));
    }
    Ok(())
}

/// `x [B, T] -> [B, 1, filters/3, (T - K + 1)/3]`: sinc conv, joint
/// (filter, time) max-pool of 3, batch norm, SeLU.
pub fn sincnet_forward(s: &Session, prefix: &str, cfg: &FrontendConfig, x: &Var) -> Result<Var> {
    if x.shape().len() != 2 {
        return Err(Error::shape("sincnet input", &[cfg.segment_len], &x.shape()[1..]));
    }
    check_shape("sincnet input", x, &[cfg.segment_len])?;
    let kernels = sinc_kernels(
        &s.param(&format!("{prefix}.sinc.low")),
        &s.param(&format!("{prefix}.sinc.band")),
        cfg,
    );
    let b = x.shape()[0];
    let y = x.unsqueeze(1).conv1d(&kernels, None, Default::default());
    s.record(&format!("{prefix}.sinc_conv"), &y);
    let y = y.reshape(&[b, 1, cfg.n_filters, cfg.conv_len()]).max_pool2d(3, 3);
    let y = s.batch_norm(&y, &format!("{prefix}.sinc_bn"), 1).selu();
    s.record(&format!("{prefix}.sinc"), &y);
    Ok(y)
}

/// Two `(2, 3)` convolutions (frequency padded top-only, time padded both
/// sides), skip connection, then `(1, 3)` max-pool.
pub fn residual_block(s: &Session, name: &str, x: &Var) -> Var {
    let pad = Pad2d {
        top: 1,
        bottom: 0,
        left: 1,
        right: 1,
    };
    let conv = |x: &Var, n: &str, pad: Pad2d| {
        x.conv2d(
            &s.param(&format!("{name}.{n}.weight")),
            Some(&s.param(&format!("{name}.{n}.bias"))),
            pad,
        )
    };
    let h = conv(x, "conv1", pad);
    let h = s.batch_norm(&h, &format!("{name}.bn"), 1).selu();
    let h = conv(&h, "conv2", pad);
    let skip = if s.params().get(&format!("{name}.skip.weight")).is_some() {
        conv(x, "skip", Pad2d::default())
    } else {
        x.clone()
    };
    h.add(&skip).max_pool2d(1, 3)
}

/// `[B, 1, H, W] -> [B, C, H, W / 3^blocks]`.
pub fn residual_stack_forward(s: &Session, prefix: &str, cfg: &FrontendConfig, fm: &Var) -> Result<Var> {
    check_shape("residual stack input", fm, &cfg.sinc_output_shape())?;
    let mut h = fm.clone();
    for i in 0..cfg.res_channels.len() {
        h = residual_block(s, &format!("{prefix}.res{i}"), &h);
        s.record(&format!("{prefix}.res{i}"), &h);
    }
    Ok(h)
}

/// Sinc layer followed by the residual stack.
pub fn encode(s: &Session, prefix: &str, cfg: &FrontendConfig, x: &Var) -> Result<Var> {
    let fm = sincnet_forward(s, prefix, cfg, x)?;
    residual_stack_forward(s, prefix, cfg, &fm)
}

fn check_fm(context: &str, fm: &Var, expected: Option<[usize; 3]>) -> Result<()> {
    if fm.shape().len() != 4 {
        return Err(Error::shape(context, &expected.unwrap_or_default(), &fm.shape()[1..]));
    }
    match expected {
        Some(e) => check_shape(context, fm, &e),
        None => Ok(()),
    }
}

/// `[B, C, H, W] -> [B, H, C]`: node per frequency bin, mean of `|fm|` over time.
pub fn to_graph_spectral(fm: &Var, expected: Option<[usize; 3]>) -> Result<Var> {
    check_fm("spectral graph", fm, expected)?;
    Ok(fm.abs().mean_axis(3).squeeze(3).permute(&[0, 2, 1]))
}

/// `[B, C, H, W] -> [B, W, C]`: node per time frame, mean of `|fm|` over frequency.
pub fn to_graph_temporal(fm: &Var, expected: Option<[usize; 3]>) -> Result<Var> {
    check_fm("temporal graph", fm, expected)?;
    Ok(fm.abs().mean_axis(2).squeeze(2).permute(&[0, 2, 1]))
}

/// Convenience: the `[freq_bins, time]` max-pooled sinc response of a single
/// mono segment with default filter initialization (inspection only).
pub fn sinc_response(cfg: &FrontendConfig, x: &[f64]) -> Result<Array3<f64>> {
    cfg.validate()?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut params = crate::nn::ParamSet::new();
    init_frontend(&mut Init::new(&mut rng, &mut params), "fe", cfg);
    let s = Session::inference(&params);
    let xv = Var::constant(Tensor::from_shape_vec(IxDyn(&[1, x.len()]), x.to_vec()).expect("shape"));
    let y = sincnet_forward(&s, "fe", cfg, &xv)?;
    Ok(y.value().index_axis(ndarray::Axis(0), 0).to_owned().into_dimensionality().expect("3-D"))
}
