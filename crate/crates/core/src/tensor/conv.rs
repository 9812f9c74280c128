use ndarray::{Array2, ArrayView2, Axis, IxDyn};

use super::{Tensor, Var};

/// Upper bound on im2col buffer elements per chunk (~32 MB of f64).
const COL_BUDGET: usize = 1 << 22;

/// Stride, dilation and zero padding of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            pad_left: 0,
            pad_right: 0,
        }
    }
}

impl Conv1dSpec {
    /// Left-only padding that keeps the length and never looks ahead.
    pub fn causal(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            pad_left: (kernel - 1) * dilation,
            pad_right: 0,
        }
    }

    /// Symmetric padding that keeps the length for odd kernels.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            dilation: 1,
            pad_left: (kernel - 1) / 2,
            pad_right: kernel / 2,
        }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + self.pad_left + self.pad_right;
        assert!(padded >= span, "conv1d input of length {len} shorter than kernel span {span}");
        (padded - span) / self.stride + 1
    }
}

/// Zero padding (top, bottom, left, right) of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

fn chunk_len(rows: usize) -> usize {
    (COL_BUDGET / rows.max(1)).max(256)
}

struct Conv1dGeom {
    cin: usize,
    len: usize,
    kernel: usize,
    out_len: usize,
    spec: Conv1dSpec,
}

impl Conv1dGeom {
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = t * self.spec.stride + k * self.spec.dilation;
        let idx = pos.checked_sub(self.spec.pad_left)?;
        (idx < self.len).then_some(idx)
    }

    fn im2col(&self, x: &[f64], t0: usize, n: usize) -> Array2<f64> {
        let mut col = Array2::zeros((self.cin * self.kernel, n));
        for c in 0..self.cin {
            let xc = &x[c * self.len..(c + 1) * self.len];
            for k in 0..self.kernel {
                let mut row = col.row_mut(c * self.kernel + k);
                let row = row.as_slice_mut().unwrap();
                for (j, r) in row.iter_mut().enumerate() {
                    if let Some(i) = self.source(t0 + j, k) {
                        *r = xc[i];
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, gcol: ArrayView2<f64>, gx: &mut [f64], t0: usize) {
        let n = gcol.ncols();
        for c in 0..self.cin {
            for k in 0..self.kernel {
                let row = gcol.row(c * self.kernel + k);
                for j in 0..n {
                    if let Some(i) = self.source(t0 + j, k) {
                        gx[c * self.len + i] += row[j];
                    }
                }
            }
        }
    }
}

impl Var {
    /// 1-D convolution: `x [B, Cin, T]`, `weight [Cout, Cin, K]`, optional `bias [Cout]`.
    pub fn conv1d(&self, weight: &Var, bias: Option<&Var>, spec: Conv1dSpec) -> Var {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 3, "conv1d input must be [B, Cin, T], got {xs:?}");
        assert_eq!(ws.len(), 3, "conv1d weight must be [Cout, Cin, K], got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv1d channel mismatch: input {xs:?} weight {ws:?}");
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, kernel) = (ws[0], ws[2]);
        let geom = Conv1dGeom {
            cin,
            len,
            kernel,
            out_len: spec.out_len(len, kernel),
            spec,
        };
        let x = self.value().as_standard_layout().into_owned();
        let w2 = weight
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, cin * kernel))
            .unwrap();
        let out_len = geom.out_len;
        let mut out = Tensor::zeros(IxDyn(&[batch, cout, out_len]));
        let step = chunk_len(cin * kernel);
        {
            let xs = x.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for b in 0..batch {
                let xb = &xs[b * cin * len..(b + 1) * cin * len];
                let ob = &mut os[b * cout * out_len..(b + 1) * cout * out_len];
                for t0 in (0..out_len).step_by(step) {
                    let n = step.min(out_len - t0);
                    let y = w2.dot(&geom.im2col(xb, t0, n));
                    for o in 0..cout {
                        ob[o * out_len + t0..o * out_len + t0 + n]
                            .copy_from_slice(y.row(o).as_slice().unwrap());
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let bv = bias.value();
            assert_eq!(bv.shape(), &[cout], "conv1d bias must be [Cout]");
            for (o, &bo) in bv.iter().enumerate() {
                out.index_axis_mut(Axis(1), o).mapv_inplace(|v| v + bo);
            }
        }
        let parents: Vec<&Var> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        Var::from_op(out, &parents, move |g, needs| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let xs = x.as_slice().unwrap();
            let mut gx = needs[0].then(|| vec![0.0; batch * cin * len]);
            let mut gw = Array2::<f64>::zeros((cout, cin * kernel));
            for b in 0..batch {
                let xb = &xs[b * cin * len..(b + 1) * cin * len];
                let gb = ArrayView2::from_shape((cout, out_len), &gs[b * cout * out_len..(b + 1) * cout * out_len]).unwrap();
                for t0 in (0..out_len).step_by(step) {
                    let n = step.min(out_len - t0);
                    let gchunk = gb.slice(ndarray::s![.., t0..t0 + n]);
                    if needs[1] {
                        let col = geom.im2col(xb, t0, n);
                        ndarray::linalg::general_mat_mul(1.0, &gchunk, &col.t(), 1.0, &mut gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gcol = w2.t().dot(&gchunk);
                        geom.col2im(gcol.view(), &mut gx[b * cin * len..(b + 1) * cin * len], t0);
                    }
                }
            }
            let mut res = vec![
                gx.map(|v| Tensor::from_shape_vec(IxDyn(&[batch, cin, len]), v).unwrap()),
                needs[1].then(|| gw.into_shape_with_order(IxDyn(&[cout, cin, kernel])).unwrap()),
            ];
            if needs.len() == 3 {
                res.push(needs[2].then(|| g.sum_axis(Axis(2)).sum_axis(Axis(0))));
            }
            res
        })
    }
}

struct Conv2dGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out_w: usize,
    pad: Pad2d,
}

impl Conv2dGeom {
    /// Calls `f(q, src, len)` for every maximal run of `len` in-bounds taps of
    /// kernel offset `(i, j)` starting at chunk column `q` and input index `src`.
    #[inline]
    fn runs(&self, p0: usize, n: usize, i: usize, j: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (mut ho, mut w0) = (p0 / self.out_w, p0 % self.out_w);
        let mut q = 0;
        while q < n {
            let w1 = self.out_w.min(w0 + (n - q));
            let r = ho + i;
            if r >= self.pad.top && r - self.pad.top < self.h {
                let row = (r - self.pad.top) * self.w;
                // input column = wo + j - left must lie in [0, w)
                let lo = w0.max(self.pad.left.saturating_sub(j));
                let hi = w1.min((self.w + self.pad.left).saturating_sub(j));
                if lo < hi {
                    f(q + (lo - w0), row + lo + j - self.pad.left, hi - lo);
                }
            }
            q += w1 - w0;
            w0 = 0;
            ho += 1;
        }
    }

    fn im2col(&self, x: &[f64], p0: usize, n: usize) -> Array2<f64> {
        let plane = self.h * self.w;
        let mut col = Array2::zeros((self.cin * self.kh * self.kw, n));
        for c in 0..self.cin {
            let xc = &x[c * plane..(c + 1) * plane];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let mut row = col.row_mut((c * self.kh + i) * self.kw + j);
                    let row = row.as_slice_mut().unwrap();
                    self.runs(p0, n, i, j, |q, src, len| {
                        row[q..q + len].copy_from_slice(&xc[src..src + len]);
                    });
                }
            }
        }
        col
    }

    fn col2im(&self, gcol: ArrayView2<f64>, gx: &mut [f64], p0: usize) {
        let plane = self.h * self.w;
        let n = gcol.ncols();
        for c in 0..self.cin {
            let gc = &mut gx[c * plane..(c + 1) * plane];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = gcol.row((c * self.kh + i) * self.kw + j);
                    let row = row.as_slice().unwrap();
                    self.runs(p0, n, i, j, |q, src, len| {
                        for (d, s) in gc[src..src + len].iter_mut().zip(&row[q..q + len]) {
                            *d += s;
                        }
                    });
                }
            }
        }
    }
}

impl Var {
    /// 2-D convolution with unit stride: `x [B, Cin, H, W]`, `weight [Cout, Cin, KH, KW]`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, pad: Pad2d) -> Var {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be [B, Cin, H, W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, KH, KW], got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?} weight {ws:?}");
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let out_h = h + pad.top + pad.bottom + 1 - kh;
        let out_w = w + pad.left + pad.right + 1 - kw;
        let geom = Conv2dGeom {
            cin,
            h,
            w,
            kh,
            kw,
            out_w,
            pad,
        };
        let rows = cin * kh * kw;
        let x = self.value().as_standard_layout().into_owned();
        let w2 = weight
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, rows))
            .unwrap();
        let positions = out_h * out_w;
        let in_plane = cin * h * w;
        let mut out = Tensor::zeros(IxDyn(&[batch, cout, out_h, out_w]));
        let step = chunk_len(rows);
        {
            let xs = x.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for b in 0..batch {
                let xb = &xs[b * in_plane..(b + 1) * in_plane];
                let ob = &mut os[b * cout * positions..(b + 1) * cout * positions];
                for p0 in (0..positions).step_by(step) {
                    let n = step.min(positions - p0);
                    let y = w2.dot(&geom.im2col(xb, p0, n));
                    for o in 0..cout {
                        ob[o * positions + p0..o * positions + p0 + n]
                            .copy_from_slice(y.row(o).as_slice().unwrap());
                    }
                }
            }
        }
        if let Some(bias) = bias {
            assert_eq!(bias.shape(), &[cout], "conv2d bias must be [Cout]");
            for (o, &bo) in bias.value().iter().enumerate() {
                out.index_axis_mut(Axis(1), o).mapv_inplace(|v| v + bo);
            }
        }
        let parents: Vec<&Var> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        Var::from_op(out, &parents, move |g, needs| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let xs = x.as_slice().unwrap();
            let mut gx = needs[0].then(|| vec![0.0; batch * in_plane]);
            let mut gw = Array2::<f64>::zeros((cout, rows));
            for b in 0..batch {
                let xb = &xs[b * in_plane..(b + 1) * in_plane];
                let gb = ArrayView2::from_shape(
                    (cout, positions),
                    &gs[b * cout * positions..(b + 1) * cout * positions],
                )
                .unwrap();
                for p0 in (0..positions).step_by(step) {
                    let n = step.min(positions - p0);
                    let gchunk = gb.slice(ndarray::s![.., p0..p0 + n]);
                    if needs[1] {
                        let col = geom.im2col(xb, p0, n);
                        ndarray::linalg::general_mat_mul(1.0, &gchunk, &col.t(), 1.0, &mut gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gcol = w2.t().dot(&gchunk);
                        geom.col2im(gcol.view(), &mut gx[b * in_plane..(b + 1) * in_plane], p0);
                    }
                }
            }
            let mut res = vec![
                gx.map(|v| Tensor::from_shape_vec(IxDyn(&[batch, cin, h, w]), v).unwrap()),
                needs[1].then(|| gw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap()),
            ];
            if needs.len() == 3 {
                res.push(needs[2].then(|| {
                    g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))
                }));
            }
            res
        })
    }

    /// Non-overlapping max pooling over the last two axes; trailing remainders
    /// are dropped (floor semantics).
    pub fn max_pool2d(&self, kh: usize, kw: usize) -> Var {
        let shape = self.shape().to_vec();
        let nd = shape.len();
        assert!(nd >= 2, "max_pool2d needs at least 2 axes");
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let (oh, ow) = (h / kh, w / kw);
        assert!(oh > 0 && ow > 0, "max_pool2d window ({kh},{kw}) larger than input ({h},{w})");
        let lead: usize = shape[..nd - 2].iter().product();
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; lead * oh * ow];
        let mut arg = vec![0usize; lead * oh * ow];
        for l in 0..lead {
            let base = l * h * w;
            for r in 0..oh {
                for c in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base + r * kh * w + c * kw;
                    for i in 0..kh {
                        let row = base + (r * kh + i) * w + c * kw;
                        for j in 0..kw {
                            let v = xs[row + j];
                            if v > best {
                                best = v;
                                best_idx = row + j;
                            }
                        }
                    }
                    let o = (l * oh + r) * ow + c;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[nd - 2] = oh;
        out_shape[nd - 1] = ow;
        let value = Tensor::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        Var::from_op(value, &[self], move |g, _| {
            let g = g.as_standard_layout();
            let mut gx = vec![0.0; lead * h * w];
            for (o, &gv) in g.as_slice().unwrap().iter().enumerate() {
                gx[arg[o]] += gv;
            }
            vec![Some(Tensor::from_shape_vec(IxDyn(&shape), gx).unwrap())]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testing::max_rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct-summation conv1d used as an independent reference.
    fn conv1d_direct(x: &Tensor, w: &Tensor, spec: Conv1dSpec) -> Tensor {
        let (b, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let out_len = spec.out_len(t, k);
        Tensor::from_shape_fn(IxDyn(&[b, cout, out_len]), |ix| {
            let (bi, o, to) = (ix[0], ix[1], ix[2]);
            let mut acc = 0.0;
            for c in 0..cin {
                for kk in 0..k {
                    let pos = (to * spec.stride + kk * spec.dilation) as isize - spec.pad_left as isize;
                    if pos >= 0 && (pos as usize) < t {
                        acc += w[[o, c, kk]] * x[[bi, c, pos as usize]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 3, 17]);
        let w = rand_tensor(&mut rng, &[4, 3, 3]);
        for spec in [
            Conv1dSpec::default(),
            Conv1dSpec::causal(3, 2),
            Conv1dSpec::same(3),
            Conv1dSpec { stride: 2, dilation: 1, pad_left: 1, pad_right: 2 },
        ] {
            let fast = Var::constant(x.clone()).conv1d(&Var::constant(w.clone()), None, spec);
            let slow = conv1d_direct(&x, &w, spec);
            assert_eq!(fast.shape(), slow.shape());
            let diff = (fast.value() - &slow).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(diff < 1e-12, "{spec:?}: {diff}");
        }
    }

    #[test]
    fn conv1d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[2, 2, 9]);
        let w = rand_tensor(&mut rng, &[3, 2, 2]);
        let b = rand_tensor(&mut rng, &[3]);
        let spec = Conv1dSpec::causal(2, 4);
        let err = max_rel_error(&[x, w, b], |v| v[0].conv1d(&v[1], Some(&v[2]), spec).square().sum_all(), 1e-6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_gradients_and_padding_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 7]);
        let w = rand_tensor(&mut rng, &[3, 2, 2, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let pad = Pad2d { top: 1, bottom: 1, left: 1, right: 1 };
        let y = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), None, pad);
        assert_eq!(y.shape(), &[2, 3, 6, 7]);
        let err = max_rel_error(&[x, w, b], |v| v[0].conv2d(&v[1], Some(&v[2]), pad).square().sum_all(), 1e-6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 6]);
        let w = rand_tensor(&mut rng, &[2, 2, 2, 3]);
        let pad = Pad2d { top: 0, bottom: 0, left: 1, right: 1 };
        let y = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), None, pad);
        for o in 0..2 {
            for r in 0..3 {
                for c in 0..6 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for i in 0..2 {
                            for j in 0..3 {
                                let cc = c as isize + j as isize - 1;
                                if (0..6).contains(&cc) {
                                    acc += w[[o, ci, i, j]] * x[[0, ci, r + i, cc as usize]];
                                }
                            }
                        }
                    }
                    assert!((y.value()[[0, o, r, c]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_floor_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 7, 10]);
        let y = Var::constant(x.clone()).max_pool2d(3, 3);
        assert_eq!(y.shape(), &[2, 2, 3]);
        let err = max_rel_error(&[x], |v| v[0].max_pool2d(3, 3).square().sum_all(), 1e-7);
        assert!(err < 1e-6, "{err}");
    }
}
