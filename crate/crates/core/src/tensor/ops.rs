use ndarray::{Array2, Axis, Ix2, Ix3, IxDyn, Slice, Zip};

use super::{Tensor, Var};

const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    assert_eq!(g.ndim(), shape.len(), "broadcast rank mismatch");
    let mut out = g.clone();
    for (ax, &dim) in shape.iter().enumerate() {
        if dim == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        })
        .collect()
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = zip_broadcast(self.value(), other.value(), |x, y| x + y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| reduce_to(g, &sa)),
                needs[1].then(|| reduce_to(g, &sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = zip_broadcast(self.value(), other.value(), |x, y| x - y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| reduce_to(g, &sa)),
                needs[1].then(|| -reduce_to(g, &sb)),
            ]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = zip_broadcast(self.value(), other.value(), |x, y| x * y);
        let (a, b) = (self.value_rc(), other.value_rc());
        Var::from_op(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| reduce_to(&zip_broadcast(g, &b, |x, y| x * y), a.shape())),
                needs[1].then(|| reduce_to(&zip_broadcast(g, &a, |x, y| x * y), b.shape())),
            ]
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = zip_broadcast(self.value(), other.value(), |x, y| x / y);
        let (a, b) = (self.value_rc(), other.value_rc());
        Var::from_op(value, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| reduce_to(&zip_broadcast(g, &b, |x, y| x / y), a.shape()));
            let gb = needs[1].then(|| {
                let ratio = zip_broadcast(&a, &b, |x, y| -x / (y * y));
                reduce_to(&zip_broadcast(g, &ratio, |x, y| x * y), b.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::from_op(self.value().mapv(|x| x + c), &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        Var::from_op(self.value().mapv(|x| x * c), &[self], move |g, _| {
            vec![Some(g.mapv(|x| x * c))]
        })
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    /// Elementwise map whose derivative is expressed through the input.
    fn unary_in(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
        let x = self.value_rc();
        Var::from_op(self.value().mapv(f), &[self], move |g, _| {
            vec![Some(Zip::from(g).and(&*x).map_collect(|&g, &x| g * df(x)))]
        })
    }

    /// Elementwise map whose derivative is expressed through the output.
    fn unary_out(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
        let y = std::rc::Rc::new(self.value().mapv(f));
        let y_bw = std::rc::Rc::clone(&y);
        let value = (*y).clone();
        Var::from_op(value, &[self], move |g, _| {
            vec![Some(Zip::from(g).and(&*y_bw).map_collect(|&g, &y| g * df(y)))]
        })
    }

    pub fn abs(&self) -> Var {
        self.unary_in(f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn selu(&self) -> Var {
        self.unary_in(
            |x| {
                if x > 0.0 {
                    SELU_SCALE * x
                } else {
                    SELU_SCALE * SELU_ALPHA * x.exp_m1()
                }
            },
            |x| {
                if x > 0.0 {
                    SELU_SCALE
                } else {
                    SELU_SCALE * SELU_ALPHA * x.exp()
                }
            },
        )
    }

    pub fn relu(&self) -> Var {
        self.unary_in(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var {
        self.unary_out(sigmoid, |y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        self.unary_out(f64::tanh, |y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Var {
        self.unary_out(f64::exp, |y| y)
    }

    pub fn ln(&self) -> Var {
        self.unary_in(f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary_out(f64::sqrt, |y| 0.5 / y)
    }

    pub fn square(&self) -> Var {
        self.unary_in(|x| x * x, |x| 2.0 * x)
    }

    pub fn sum_all(&self) -> Var {
        let shape = self.value().raw_dim();
        Var::from_op(Tensor::from_elem(IxDyn(&[]), self.value().sum()), &[self], move |g, _| {
            let gv = *g.iter().next().unwrap();
            vec![Some(Tensor::from_elem(shape.clone(), gv))]
        })
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let value = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let shape = self.value().raw_dim();
        Var::from_op(value, &[self], move |g, _| {
            vec![Some(g.broadcast(shape.clone()).unwrap().to_owned())]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Var {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).mul_scalar(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let old = self.shape().to_vec();
        let value = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        Var::from_op(value, &[self], move |g, _| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .unwrap(),
            )]
        })
    }

    /// Drops the length-1 axis `axis`.
    pub fn squeeze(&self, axis: usize) -> Var {
        assert_eq!(self.shape()[axis], 1, "squeeze of non-unit axis");
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        self.reshape(&shape)
    }

    pub fn unsqueeze(&self, axis: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let value = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op(value, &[self], move |g, _| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned(),
            )]
        })
    }

    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Var {
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let shape = self.value().raw_dim();
        Var::from_op(value, &[self], move |g, _| {
            let mut out = Tensor::zeros(shape.clone());
            out.slice_axis_mut(Axis(axis), Slice::from(start..end)).assign(g);
            vec![Some(out)]
        })
    }

    pub fn concat(vars: &[&Var], axis: usize) -> Var {
        let views: Vec<_> = vars.iter().map(|v| v.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let lengths: Vec<usize> = vars.iter().map(|v| v.shape()[axis]).collect();
        Var::from_op(value, vars, move |g, needs| {
            let mut start = 0;
            lengths
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let part = need.then(|| {
                        g.slice_axis(Axis(axis), Slice::from(start..start + len))
                            .to_owned()
                    });
                    start += len;
                    part
                })
                .collect()
        })
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Var {
        let value = self.value().select(Axis(axis), indices);
        let shape = self.value().raw_dim();
        let indices = indices.to_vec();
        Var::from_op(value, &[self], move |g, _| {
            let mut out = Tensor::zeros(shape.clone());
            for (k, &i) in indices.iter().enumerate() {
                let mut dst = out.index_axis_mut(Axis(axis), i);
                dst += &g.index_axis(Axis(axis), k);
            }
            vec![Some(out)]
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Var {
        let y = softmax(self.value(), axis);
        let y_bw = y.clone();
        Var::from_op(y, &[self], move |g, _| {
            let gy = g * &y_bw;
            let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            vec![Some(&gy - &(&y_bw * &s))]
        })
    }

    pub fn log_softmax(&self, axis: usize) -> Var {
        let y = softmax(self.value(), axis);
        let value = y.mapv(f64::ln);
        Var::from_op(value, &[self], move |g, _| {
            let s = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            vec![Some(g - &(&y * &s))]
        })
    }

    /// Matrix product of two 2-D vars.
    pub fn matmul(&self, other: &Var) -> Var {
        let a = as2(self.value());
        let b = as2(other.value());
        let value = a.dot(&b).into_dyn();
        let (a_rc, b_rc) = (self.value_rc(), other.value_rc());
        Var::from_op(value, &[self, other], move |g, needs| {
            let g2 = as2(g);
            vec![
                needs[0].then(|| g2.dot(&as2(&b_rc).t()).into_dyn()),
                needs[1].then(|| as2(&a_rc).t().dot(&g2).into_dyn()),
            ]
        })
    }

    /// Batched matrix product: `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&self, other: &Var) -> Var {
        let value = bmm_raw(self.value(), other.value(), false, false);
        let (a_rc, b_rc) = (self.value_rc(), other.value_rc());
        Var::from_op(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| bmm_raw(g, &b_rc, false, true)),
                needs[1].then(|| bmm_raw(&a_rc, g, true, false)),
            ]
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let mut y = x.clone();
    for mut lane in y.lanes_mut(Axis(axis)) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    y
}

fn as2(t: &Tensor) -> Array2<f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("matmul operand must be 2-D")
        .to_owned()
}

fn bmm_raw(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm operand must be 3-D");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm operand must be 3-D");
    assert_eq!(a3.shape()[0], b3.shape()[0], "bmm batch mismatch");
    let mats: Vec<Array2<f64>> = a3
        .outer_iter()
        .zip(b3.outer_iter())
        .map(|(x, y)| {
            let x = if ta { x.reversed_axes() } else { x };
            let y = if tb { y.reversed_axes() } else { y };
            x.dot(&y)
        })
        .collect();
    let views: Vec<_> = mats.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).unwrap().into_dyn()
}
