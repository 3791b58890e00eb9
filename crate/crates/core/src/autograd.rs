//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and a
//! closure mapping the upstream gradient to gradients of its parents. Graphs
//! are single-threaded and short-lived (one per training example); batch
//! parallelism builds one graph per element and reduces the gradients.
//!
//! The element type is generic ([`Real`]) so the same model code runs in f32
//! for training and in f64 for finite-difference gradient checks.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Tensor<T> = ArrayD<T>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn as2<T: Real>(t: &Tensor<T>) -> ArrayView2<'_, T> {
    t.view()
        .into_dimensionality()
        .expect("operand must be two-dimensional")
}

fn dyn2<T: Real>(a: Array2<T>) -> Tensor<T> {
    a.into_dyn()
}

fn scalar<T: Real>(v: T) -> Tensor<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf; gradients flow into it.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf; no gradient is computed for it.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a zero- or one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "not a scalar");
        *val.iter().next().unwrap()
    }

    fn push(&self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(nodes.len() - 1)
    }

    /// Back-propagates from a scalar node with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.raw_dim(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Keep leaf gradients, drop intermediate ones as soon as they are consumed.
            if node.parents.is_empty() {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a @ b` for 2D operands.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = as2(&av).dot(&as2(&bv));
        self.push(
            dyn2(out),
            &[a, b],
            Box::new(move |g, needs| {
                let g = as2(g);
                vec![
                    needs[0].then(|| dyn2(g.dot(&as2(&bv).t()))),
                    needs[1].then(|| dyn2(as2(&av).t().dot(&g))),
                ]
            }),
        )
    }

    /// `a @ b^T` for 2D operands.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = as2(&av).dot(&as2(&bv).t());
        self.push(
            dyn2(out),
            &[a, b],
            Box::new(move |g, needs| {
                let g = as2(g);
                vec![
                    needs[0].then(|| dyn2(g.dot(&as2(&bv)))),
                    needs[1].then(|| dyn2(g.t().dot(&as2(&av)))),
                ]
            }),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = as2(&av).t().as_standard_layout().into_owned();
        self.push(
            dyn2(out),
            &[a],
            Box::new(|g, _| vec![Some(dyn2(as2(g).t().as_standard_layout().into_owned()))]),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let orig = av.shape().to_vec();
        let out = av
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&orig))
                        .unwrap(),
                )]
            }),
        )
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) + &*self.value(b);
        self.push(
            out,
            &[a, b],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) - &*self.value(b);
        self.push(
            out,
            &[a, b],
            Box::new(|g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.mapv(|v| -v)),
                ]
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = &*av * &*bv;
        self.push(
            out,
            &[a, b],
            Box::new(move |g, needs| vec![needs[0].then(|| g * &*bv), needs[1].then(|| g * &*av)]),
        )
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = &*self.value(a) * s;
        self.push(out, &[a], Box::new(move |g, _| vec![Some(g * s)]))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&self, x: Var, bias: Var) -> Var {
        let out = &*self.value(x) + &*self.value(bias);
        self.push(
            out,
            &[x, bias],
            Box::new(|g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.sum_axis(Axis(0))),
                ]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|v| v.max(T::zero()));
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = g.clone();
                d.zip_mut_with(&av, |d, &x| {
                    if x <= T::zero() {
                        *d = T::zero();
                    }
                });
                vec![Some(d)]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(gelu);
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = g.clone();
                d.zip_mut_with(&av, |d, &x| *d *= gelu_grad(x));
                vec![Some(d)]
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let y = Rc::new(out.clone());
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = g.clone();
                d.zip_mut_with(&y, |d, &s| *d *= s * (T::one() - s));
                vec![Some(d)]
            }),
        )
    }

    /// Row-wise layer normalization of `x[m,n]` with affine `gamma[n]`, `beta[n]`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let x2 = as2(&xv);
        let (m, n) = x2.dim();
        let nf = T::c(n as f64);
        let mut xhat = Array2::<T>::zeros((m, n));
        let mut inv_std = vec![T::zero(); m];
        for (i, row) in x2.rows().into_iter().enumerate() {
            let mean = row.sum() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + T::c(eps)).sqrt();
            inv_std[i] = is;
            for (j, &v) in row.iter().enumerate() {
                xhat[(i, j)] = (v - mean) * is;
            }
        }
        let gamma1 = gv
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let beta1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = &xhat * &gamma1 + beta1;
        let xhat = Rc::new(xhat);
        self.push(
            dyn2(out),
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let g = as2(g);
                let dx = needs[0].then(|| {
                    let mut dx = Array2::<T>::zeros((m, n));
                    for i in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let d = g[(i, j)] * gamma1[j];
                            mean_d += d;
                            mean_dx += d * xhat[(i, j)];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for j in 0..n {
                            let d = g[(i, j)] * gamma1[j];
                            dx[(i, j)] = inv_std[i] * (d - mean_d - xhat[(i, j)] * mean_dx);
                        }
                    }
                    dyn2(dx)
                });
                let dg = needs[1].then(|| (&g * &*xhat).sum_axis(Axis(0)).into_dyn());
                let db = needs[2].then(|| g.sum_axis(Axis(0)).into_dyn());
                vec![dx, dg, db]
            }),
        )
    }

    // ---------------------------------------------------------------- indexing

    /// Gathers rows of `table[V,d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let t2 = as2(&tv);
        let (vocab, d) = t2.dim();
        let mut out = Array2::<T>::zeros((ids.len(), d));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t2.row(id));
        }
        let ids = ids.to_vec();
        self.push(
            dyn2(out),
            &[table],
            Box::new(move |g, _| {
                let g = as2(g);
                let mut dt = Array2::<T>::zeros((vocab, d));
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &g.row(r);
                }
                vec![Some(dyn2(dt))]
            }),
        )
    }

    /// Columns `[start, start+len)` of a 2D node.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let x2 = as2(&xv);
        let (m, n) = x2.dim();
        let out = x2.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(
            dyn2(out),
            &[x],
            Box::new(move |g, _| {
                let mut d = Array2::<T>::zeros((m, n));
                d.slice_mut(ndarray::s![.., start..start + len])
                    .assign(&as2(g));
                vec![Some(dyn2(d))]
            }),
        )
    }

    /// Leading `rows` rows of a 2D node.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let x2 = as2(&xv);
        let (m, n) = x2.dim();
        let out = x2.slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(
            dyn2(out),
            &[x],
            Box::new(move |g, _| {
                let mut d = Array2::<T>::zeros((m, n));
                d.slice_mut(ndarray::s![start..start + len, ..])
                    .assign(&as2(g));
                vec![Some(dyn2(d))]
            }),
        )
    }

    /// Concatenates 2D nodes along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| as2(v)).collect();
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(
            dyn2(out),
            parts,
            Box::new(move |g, needs| {
                let g = as2(g);
                let mut off = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let s =
                            need.then(|| dyn2(g.slice(ndarray::s![.., off..off + w]).to_owned()));
                        off += w;
                        s
                    })
                    .collect()
            }),
        )
    }

    /// Concatenates `[C1,H,W]` and `[C2,H,W]` along channels.
    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let ca = av.shape()[0];
        let out =
            ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).expect("spatial dims agree");
        self.push(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.slice_axis(Axis(0), (..ca).into()).to_owned()),
                    needs[1].then(|| g.slice_axis(Axis(0), (ca..).into()).to_owned()),
                ]
            }),
        )
    }

    // ---------------------------------------------------------------- softmax family

    /// Row-wise softmax of `scale * x[T,T]` restricted to `j <= i`; masked entries are 0.
    pub fn causal_softmax(&self, x: Var, scale: T) -> Var {
        let xv = self.value(x);
        let x2 = as2(&xv);
        let (m, n) = x2.dim();
        let mut p = Array2::<T>::zeros((m, n));
        for i in 0..m {
            let lim = (i + 1).min(n);
            let mx = (0..lim)
                .map(|j| x2[(i, j)] * scale)
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..lim {
                let e = (x2[(i, j)] * scale - mx).exp();
                p[(i, j)] = e;
                z += e;
            }
            for j in 0..lim {
                p[(i, j)] /= z;
            }
        }
        let pc = Rc::new(p.clone());
        self.push(
            dyn2(p),
            &[x],
            Box::new(move |g, _| vec![Some(dyn2(softmax_backward(&pc, &as2(g), scale)))]),
        )
    }

    /// Row-wise softmax of a 2D node.
    pub fn softmax_rows(&self, x: Var) -> Var {
        let xv = self.value(x);
        let p = softmax_rows(&as2(&xv));
        let pc = Rc::new(p.clone());
        self.push(
            dyn2(p),
            &[x],
            Box::new(move |g, _| vec![Some(dyn2(softmax_backward(&pc, &as2(g), T::one())))]),
        )
    }

    /// Straight-through estimator: forward emits the row-wise argmax one-hot of `x`,
    /// backward passes the gradient through unchanged.
    pub fn straight_through_onehot(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x2 = as2(&xv);
        let mut out = Array2::<T>::zeros(x2.dim());
        for (i, row) in x2.rows().into_iter().enumerate() {
            out[(i, argmax(row.iter().copied()))] = T::one();
        }
        self.push(dyn2(out), &[x], Box::new(|g, _| vec![Some(g.clone())]))
    }

    // ---------------------------------------------------------------- convolution

    /// 2D convolution of `x[C,H,W]` with `w[O,C,k,k]` and `b[O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d channel mismatch");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = Rc::new(im2col(xv.as_slice().expect("contiguous input"), &geom));
        let wmat = wv
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("contiguous weight")
            .to_owned();
        let mut out = wmat.dot(&*cols);
        let bv = self.value(b);
        for (mut row, &bias) in out.rows_mut().into_iter().zip(bv.iter()) {
            row += bias;
        }
        let out = out.into_shape_with_order(IxDyn(&[o, ho, wo])).unwrap();
        self.push(
            out,
            &[x, w, b],
            Box::new(move |g, needs| {
                let g2 = g
                    .view()
                    .into_shape_with_order((o, ho * wo))
                    .expect("contiguous grad");
                let dx = needs[0].then(|| {
                    let dcols = wmat.t().dot(&g2);
                    let dx = col2im(&dcols, &geom);
                    ArrayD::from_shape_vec(IxDyn(&[c, h, wd]), dx).unwrap()
                });
                let dw = needs[1].then(|| {
                    g2.dot(&cols.t())
                        .into_shape_with_order(IxDyn(&[o, c, k, k]))
                        .unwrap()
                });
                let db = needs[2].then(|| g2.sum_axis(Axis(1)).into_dyn());
                vec![dx, dw, db]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `x[C,H,W]`.
    pub fn upsample2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = xv.as_slice().unwrap();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x_ in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x_] = src[(ch * h + y / 2) * w + x_ / 2];
                }
            }
        }
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[c, 2 * h, 2 * w]), out).unwrap(),
            &[x],
            Box::new(move |g, _| {
                let gs = g.as_slice().unwrap();
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x_ in 0..2 * w {
                            d[(ch * h + y / 2) * w + x_ / 2] += gs[(ch * 2 * h + y) * 2 * w + x_];
                        }
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[c, h, w]), d).unwrap())]
            }),
        )
    }

    /// Inverse Haar transform of stacked subbands.
    ///
    /// Input is `[4C, S, S]` with channel `4c + {0,1,2,3}` holding `{ll, lh, hl, hh}` of
    /// colour `c`; output is `[C, 2S, 2S]`. The transform is orthonormal, so its
    /// adjoint (used for the backward pass) is the forward DWT.
    pub fn haar_idwt(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        assert_eq!(s[0] % 4, 0, "haar_idwt needs 4 subbands per channel");
        let (c, h, w) = (s[0] / 4, s[1], s[2]);
        let out = haar_synthesis(xv.as_slice().unwrap(), c, h, w);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[c, 2 * h, 2 * w]), out).unwrap(),
            &[x],
            Box::new(move |g, _| {
                let d = haar_analysis(g.as_slice().unwrap(), c, h, w);
                vec![Some(
                    ArrayD::from_shape_vec(IxDyn(&[4 * c, h, w]), d).unwrap(),
                )]
            }),
        )
    }

    // ---------------------------------------------------------------- losses

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.raw_dim();
        let out = scalar(av.sum());
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                vec![Some(ArrayD::from_elem(
                    shape.clone(),
                    *g.iter().next().unwrap(),
                ))]
            }),
        )
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&self, pred: Var, target: &Tensor<T>) -> Var {
        let pv = self.value(pred);
        let n = T::c(pv.len() as f64);
        let diff = &*pv - target;
        let out = scalar(diff.iter().map(|&d| d * d).sum::<T>() / n);
        self.push(
            out,
            &[pred],
            Box::new(move |g, _| {
                let s = *g.iter().next().unwrap() * T::c(2.0) / n;
                vec![Some(&diff * s)]
            }),
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and constant targets in [0,1].
    pub fn bce_with_logits(&self, logits: Var, target: &Tensor<T>) -> Var {
        let zv = self.value(logits);
        let n = T::c(zv.len() as f64);
        let loss = zv
            .iter()
            .zip(target.iter())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let mut grad = zv.mapv(sigmoid);
        grad -= target;
        self.push(
            scalar(loss),
            &[logits],
            Box::new(move |g, _| {
                let s = *g.iter().next().unwrap() / n;
                vec![Some(&grad * s)]
            }),
        )
    }

    /// `sum_t w_t * CE(logits[t], target_t) / norm` over positions with a target.
    pub fn weighted_ce(
        &self,
        logits: Var,
        targets: &[Option<usize>],
        weights: &[T],
        norm: T,
    ) -> Var {
        let lv = self.value(logits);
        let l2 = as2(&lv);
        assert_eq!(l2.nrows(), targets.len());
        let probs = softmax_rows(&l2);
        let mut total = T::zero();
        for (t, (&target, &w)) in targets.iter().zip(weights).enumerate() {
            if let Some(y) = target {
                let row = l2.row(t);
                total += w * (log_sum_exp(row.iter().copied()) - row[y]);
            }
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.push(
            scalar(total / norm),
            &[logits],
            Box::new(move |g, _| {
                let s = *g.iter().next().unwrap() / norm;
                let mut d = Array2::<T>::zeros(probs.dim());
                for (t, (&target, &w)) in targets.iter().zip(&weights).enumerate() {
                    if let Some(y) = target {
                        let f = s * w;
                        for (dst, &p) in d.row_mut(t).iter_mut().zip(probs.row(t)) {
                            *dst = p * f;
                        }
                        d[(t, y)] -= f;
                    }
                }
                vec![Some(dyn2(d))]
            }),
        )
    }
}

// -------------------------------------------------------------------- kernels

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let inner = k * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let inner = k * (x + T::c(0.044715) * x * x * x);
    let th = inner.tanh();
    let dinner = k * (T::one() + T::c(3.0 * 0.044715) * x * x);
    T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * dinner
}

pub fn log_sum_exp<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let mx = xs.clone().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + xs.map(|v| (v - mx).exp()).sum::<T>().ln()
}

/// Index of the first maximum.
pub fn argmax<T: PartialOrd + Copy>(xs: impl Iterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v: Option<T> = None;
    for (i, v) in xs.enumerate() {
        if best_v.is_none_or(|b| v > b) {
            best = i;
            best_v = Some(v);
        }
    }
    best
}

pub fn softmax_rows<T: Real>(x: &ArrayView2<'_, T>) -> Array2<T> {
    let mut p = x.to_owned();
    for mut row in p.rows_mut() {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row /= z;
    }
    p
}

fn softmax_backward<T: Real>(p: &Array2<T>, g: &ArrayView2<'_, T>, scale: T) -> Array2<T> {
    let mut d = Array2::<T>::zeros(p.dim());
    for i in 0..p.nrows() {
        let dot: T = p.row(i).iter().zip(g.row(i)).map(|(&a, &b)| a * b).sum();
        for j in 0..p.ncols() {
            d[(i, j)] = scale * p[(i, j)] * (g[(i, j)] - dot);
        }
    }
    d
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Array2<T> {
    let rows = g.c * g.k * g.k;
    let n = g.ho * g.wo;
    let mut cols = vec![T::zero(); rows * n];
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ch * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * n..(r + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[(ch * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, n), cols).unwrap()
}

fn col2im<T: Real>(cols: &Array2<T>, g: &ConvGeom) -> Vec<T> {
    let n = g.ho * g.wo;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().unwrap();
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ch * g.k + ky) * g.k + kx;
                let row = &src[r * n..(r + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ch * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[4C,H,W]` subbands to `[C,2H,2W]` pixels (orthonormal Haar synthesis).
pub fn haar_synthesis<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let half = T::c(0.5);
    let plane = h * w;
    let mut out = vec![T::zero(); c * 4 * plane];
    for ch in 0..c {
        let sb = &x[4 * ch * plane..];
        let dst = &mut out[ch * 4 * plane..(ch + 1) * 4 * plane];
        for i in 0..h {
            for j in 0..w {
                let q = i * w + j;
                let (ll, lh, hl, hh) = (sb[q], sb[plane + q], sb[2 * plane + q], sb[3 * plane + q]);
                let r0 = 2 * i * 2 * w;
                let r1 = (2 * i + 1) * 2 * w;
                dst[r0 + 2 * j] = half * (ll + lh + hl + hh);
                dst[r0 + 2 * j + 1] = half * (ll - lh + hl - hh);
                dst[r1 + 2 * j] = half * (ll + lh - hl - hh);
                dst[r1 + 2 * j + 1] = half * (ll - lh - hl + hh);
            }
        }
    }
    out
}

/// `[C,2H,2W]` pixels to `[4C,H,W]` subbands (orthonormal Haar analysis).
pub fn haar_analysis<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let half = T::c(0.5);
    let plane = h * w;
    let mut out = vec![T::zero(); c * 4 * plane];
    for ch in 0..c {
        let src = &x[ch * 4 * plane..(ch + 1) * 4 * plane];
        let sb = &mut out[4 * ch * plane..(4 * ch + 4) * plane];
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * 2 * w;
                let r1 = (2 * i + 1) * 2 * w;
                let (a, b) = (src[r0 + 2 * j], src[r0 + 2 * j + 1]);
                let (cc, d) = (src[r1 + 2 * j], src[r1 + 2 * j + 1]);
                let q = i * w + j;
                sb[q] = half * (a + b + cc + d);
                sb[plane + q] = half * (a - b + cc - d);
                sb[2 * plane + q] = half * (a + b - cc - d);
                sb[3 * plane + q] = half * (a - b - cc + d);
            }
        }
    }
    out
}
