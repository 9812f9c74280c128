//! Log-magnitude short-time Fourier transform for inspection plots.

use ndarray::{Array2, ArrayView1};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
}

impl StftConfig {
    /// 25 ms Hann window, 10 ms hop.
    pub fn for_rate(sample_rate: u32) -> Self {
        Self {
            window: (sample_rate as usize * 25).div_ceil(1000),
            hop: (sample_rate as usize * 10).div_ceil(1000),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.window / 2 + 1
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// `[frames, bins]` magnitude in dB (`20 log10(|X| + 1e-10)`), frames taken
/// without padding.
pub fn log_spectrogram(x: ArrayView1<'_, f64>, cfg: StftConfig) -> Result<Array2<f64>> {
    if cfg.window == 0 || cfg.hop == 0 {
        return Err(Error::Validation("STFT window and hop must be positive".into()));
    }
    if x.len() < cfg.window {
        return Err(Error::Validation(format!(
            "signal of {} samples is shorter than the {}-sample STFT window",
            x.len(),
            cfg.window
        )));
    }
    let frames = 1 + (x.len() - cfg.window) / cfg.hop;
    let bins = cfg.n_bins();
    let w = hann(cfg.window);
    let fft = FftPlanner::new().plan_fft_forward(cfg.window);
    let mut out = Array2::zeros((frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
    for f in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x[f * cfg.hop + i] * w[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[[f, k]] = 20.0 * (buf[k].norm() + 1e-10).log10();
        }
    }
    Ok(out)
}
