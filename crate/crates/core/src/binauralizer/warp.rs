use ndarray::{Array2, Array3, Axis, Ix3, IxDyn};

use crate::dataio::{ConditioningTrack, Ear};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Per-ear, per-sample read positions into the mono source, `[2, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Warpfield {
    pub values: Array2<f64>,
}

impl Warpfield {
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when every ear track is non-decreasing and never exceeds `t`.
    pub fn is_monotone_causal(&self) -> bool {
        self.values.outer_iter().all(|row| {
            row.iter().enumerate().all(|(t, &p)| p <= t as f64 && (t == 0 || p >= row[t - 1]))
        })
    }
}

/// `rho[e][t] = t - sr * d_e(t) / c`, clamped to `[0, t]`.
pub fn geometric_warpfield(
    track: &ConditioningTrack,
    sample_rate: u32,
    speed_of_sound: f64,
    ear_offset: f64,
) -> Result<Warpfield> {
    if !(speed_of_sound.is_finite() && speed_of_sound > 0.0) {
        return Err(Error::Validation(format!("speed of sound must be positive, got {speed_of_sound}")));
    }
    if let Some(v) = track.frames().iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("conditioning contains non-finite value {v}")));
    }
    let sr = sample_rate as f64;
    let mut values = Array2::zeros((2, track.len()));
    for ear in Ear::BOTH {
        for t in 0..track.len() {
            let d = track.ear_distance(t, ear, ear_offset);
            let rho = t as f64 - sr * d / speed_of_sound;
            values[[ear.index(), t]] = rho.clamp(0.0, t as f64);
        }
    }
    Ok(Warpfield { values })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Branch {
    Raw,
    Previous,
    Bound,
}

/// Enforces `p_t = min(t, max(p_{t-1}, r_t))` with `p_{-1} = 0` along the last
/// axis of `r` (`[B, 2, T]`). The gradient follows whichever branch was taken.
pub fn enforce_warp(r: &Var) -> Var {
    let raw = r.value().view().into_dimensionality::<Ix3>().expect("warp must be [B, 2, T]");
    let (b, e, len) = raw.dim();
    let mut out = Array3::zeros((b, e, len));
    let mut branch = vec![Branch::Raw; b * e * len];
    for bi in 0..b {
        for ei in 0..e {
            let mut prev = 0.0;
            for t in 0..len {
                let idx = (bi * e + ei) * len + t;
                let rt = raw[[bi, ei, t]];
                let (mut p, mut which) = if rt > prev { (rt, Branch::Raw) } else { (prev, Branch::Previous) };
                if p > t as f64 {
                    p = t as f64;
                    which = Branch::Bound;
                }
                out[[bi, ei, t]] = p;
                branch[idx] = which;
                prev = p;
            }
        }
    }
    Var::from_op(out.into_dyn(), &[r], move |grad, _| {
        let g = grad.as_slice().expect("contiguous grad");
        let mut dr = vec![0.0; g.len()];
        for row in 0..b * e {
            let mut carry = 0.0;
            for t in (0..len).rev() {
                let idx = row * len + t;
                let total = g[idx] + carry;
                carry = 0.0;
                match branch[idx] {
                    Branch::Raw => dr[idx] = total,
                    Branch::Previous => carry = total,
                    Branch::Bound => {}
                }
            }
        }
        vec![Some(Tensor::from_shape_vec(IxDyn(&[b, e, len]), dr).expect("shape"))]
    })
}

/// Linear-interpolation read of `x` (`[B, T]`) at positions `p` (`[B, 2, T]`,
/// already enforced). Reads past the last sample clamp to it.
pub fn warp_read(x: &Var, p: &Var) -> Var {
    let xs = x.value().view().into_dimensionality::<ndarray::Ix2>().expect("signal must be [B, T]").to_owned();
    let ps = p.value().view().into_dimensionality::<Ix3>().expect("warp must be [B, 2, T]").to_owned();
    let (b, e, len) = ps.dim();
    assert_eq!(xs.dim(), (b, len), "signal and warp lengths differ");
    let last = len - 1;
    let locate = move |pos: f64| -> (usize, usize, f64) {
        let pos = pos.clamp(0.0, last as f64);
        let i = (pos.floor() as usize).min(last);
        let j = (i + 1).min(last);
        (i, j, pos - i as f64)
    };
    let mut out = Array3::zeros((b, e, len));
    for bi in 0..b {
        for ei in 0..e {
            for t in 0..len {
                let (i, j, f) = locate(ps[[bi, ei, t]]);
                out[[bi, ei, t]] = xs[[bi, i]] + f * (xs[[bi, j]] - xs[[bi, i]]);
            }
        }
    }
    Var::from_op(out.into_dyn(), &[x, p], move |grad, needs| {
        let g = grad.view().into_dimensionality::<Ix3>().expect("grad shape");
        let mut dx = needs[0].then(|| Array2::<f64>::zeros((b, len)));
        let mut dp = needs[1].then(|| Array3::<f64>::zeros((b, e, len)));
        for bi in 0..b {
            for ei in 0..e {
                for t in 0..len {
                    let gv = g[[bi, ei, t]];
                    let (i, j, f) = locate(ps[[bi, ei, t]]);
                    if let Some(dx) = dx.as_mut() {
                        dx[[bi, i]] += gv * (1.0 - f);
                        dx[[bi, j]] += gv * f;
                    }
                    if let Some(dp) = dp.as_mut() {
                        dp[[bi, ei, t]] = gv * (xs[[bi, j]] - xs[[bi, i]]);
                    }
                }
            }
        }
        vec![dx.map(|a| a.into_dyn()), dp.map(|a| a.into_dyn())]
    })
}

/// Warps a mono signal by `w` after enforcement: `[T]` in, `[2, T]` out.
pub fn apply_warp(x: &[f64], w: &Warpfield) -> Result<Array2<f64>> {
    if x.len() != w.len() {
        return Err(Error::Validation(format!(
            "signal length {} differs from warpfield length {}",
            x.len(),
            w.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Validation("cannot warp an empty signal".into()));
    }
    let xv = Var::constant(Tensor::from_shape_vec(IxDyn(&[1, x.len()]), x.to_vec()).expect("shape"));
    let r = Var::constant(w.values.clone().insert_axis(Axis(0)).into_dyn());
    let y = warp_read(&xv, &enforce_warp(&r));
    Ok(y.value().view().into_dimensionality::<Ix3>().expect("shape").index_axis(Axis(0), 0).to_owned())
}

/// The enforced positions themselves, for inspection.
pub fn enforce_warpfield(w: &Warpfield) -> Warpfield {
    let r = Var::constant(w.values.clone().insert_axis(Axis(0)).into_dyn());
    let p = enforce_warp(&r);
    Warpfield {
        values: p.value().view().into_dimensionality::<Ix3>().expect("shape").index_axis(Axis(0), 0).to_owned(),
    }
}
