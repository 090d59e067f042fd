//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! closure that maps the upstream gradient to gradients of the inputs. Nodes
//! are appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order.
//!
//! Parameters enter as leaves through [`Graph::param`]; a non-trainable
//! parameter becomes a constant, which is how frozen sub-networks are kept out
//! of the gradient entirely. A graph built with [`Graph::no_grad`] records no
//! closures at all and is used for teacher and inference passes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

use crate::grid::{self, PdeKind};
use crate::params::{ParamKey, ParamStore, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamKey>,
    tracked: bool,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    g: &'g Graph,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamKey, Tensor>,
    inputs: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
    }

    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.inputs.get(&v.id)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.params.iter()
    }

    /// Keys of every parameter that received a gradient.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        self.params.keys().copied().collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// `a * b` through a cache-blocked kernel; handles arbitrary strides, so
/// transposed views cost nothing.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dimensions");
    let mut c = Array2::<f64>::zeros((m, n));
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (ars, acs) = (a.strides()[0], a.strides()[1]);
    let (brs, bcs) = (b.strides()[0], b.strides()[1]);
    // SAFETY: the pointers and strides describe valid views of the given
    // dimensions, and `c` is a freshly allocated standard-layout array.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            false,
            a.as_ptr(),
            acs,
            ars,
            b.as_ptr(),
            bcs,
            brs,
            0.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
    c
}

fn std_vec(t: &Tensor) -> Vec<f64> {
    t.as_standard_layout().iter().copied().collect()
}

fn from_vec(shape: &[usize], v: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("tensor shape matches data")
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool, param: Option<ParamKey>, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            param,
            tracked,
        });
        Var {
            id: nodes.len() - 1,
            g: self,
        }
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(Arc::new(t), false, None, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, t: Tensor) -> Var<'_> {
        let rg = self.recording;
        self.leaf(Arc::new(t), rg, None, rg)
    }

    /// Leaf bound to a stored parameter. Frozen parameters are constants.
    pub fn param<'g>(&'g self, store: &ParamStore, index: usize) -> Var<'g> {
        let p = store.get(index);
        let rg = self.recording && p.trainable;
        self.leaf(p.value.clone(), rg, Some(store.key(index)), false)
    }

    pub fn value(&self, v: Var<'_>) -> Arc<Tensor> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push<'g, F>(&'g self, value: Tensor, parents: &[Var<'g>], make: F) -> Var<'g>
    where
        F: FnOnce(Vec<bool>) -> BackwardFn,
    {
        let needs: Vec<bool> = parents.iter().map(|p| self.requires(p.id)).collect();
        let rg = self.recording && needs.iter().any(|&b| b);
        let backward = if rg { Some(make(needs)) } else { None };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad: rg,
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
            param: None,
            tracked: false,
        });
        Var {
            id: nodes.len() - 1,
            g: self,
        }
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        let rv = &nodes[root.id].value;
        assert_eq!(rv.len(), 1, "backward needs a scalar root");
        grads[root.id] = Some(ArrayD::from_elem(rv.raw_dim(), 1.0));
        let mut out = Gradients::default();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Some(key) = node.param {
                // one parameter may enter the graph through several leaves
                match out.params.entry(key) {
                    std::collections::hash_map::Entry::Occupied(mut e) => *e.get_mut() += &g,
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                }
                continue;
            }
            if node.tracked {
                out.inputs.insert(id, g);
                continue;
            }
            if let Some(bw) = &node.backward {
                for (k, pg) in bw(&g).into_iter().enumerate() {
                    let Some(pg) = pg else { continue };
                    let pid = node.parents[k];
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        out
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.g.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.requires(self.id)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        *v.iter().next().unwrap()
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = &*self.value() + &*other.value();
        self.g.push(v, &[self, other], |needs| {
            Box::new(move |g| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            })
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = &*self.value() - &*other.value();
        self.g.push(v, &[self, other], |needs| {
            Box::new(move |g| vec![needs[0].then(|| g.clone()), needs[1].then(|| -g)])
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = &*a * &*b;
        self.g.push(v, &[self, other], move |needs| {
            Box::new(move |g| vec![needs[0].then(|| g * &*b), needs[1].then(|| g * &*a)])
        })
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let v = &*self.value() * s;
        self.g.push(v, &[self], move |_| Box::new(move |g| vec![Some(g * s)]))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let v = &*self.value() + c;
        self.g.push(v, &[self], |_| Box::new(|g| vec![Some(g.clone())]))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, c: &Tensor) -> Var<'g> {
        let v = &*self.value() * c;
        let c = c.clone();
        self.g.push(v, &[self], move |_| Box::new(move |g| vec![Some(g * &c)]))
    }

    pub fn add_const(self, c: &Tensor) -> Var<'g> {
        let v = &*self.value() + c;
        self.g.push(v, &[self], |_| Box::new(|g| vec![Some(g.clone())]))
    }

    /// Multiplies sample `b` (first axis) by `coef[b]`.
    pub fn mul_rows(self, coef: &[f64]) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert_eq!(shape[0], coef.len(), "mul_rows: batch mismatch");
        let v = scale_rows(&x, coef);
        let coef = coef.to_vec();
        self.g.push(v, &[self], move |_| {
            Box::new(move |g| vec![Some(scale_rows(g, &coef))])
        })
    }

    /// Per-channel affine map `x[:, c] * scale[c] + shift[c]` on `[B, C, ...]`.
    pub fn channel_affine(self, scale: &[f64], shift: &[f64]) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(c, scale.len());
        let inner: usize = shape[2..].iter().product();
        let mut v = std_vec(&x);
        for bi in 0..b {
            for ci in 0..c {
                let o = (bi * c + ci) * inner;
                for e in &mut v[o..o + inner] {
                    *e = *e * scale[ci] + shift[ci];
                }
            }
        }
        let scale = scale.to_vec();
        self.g.push(from_vec(&shape, v), &[self], move |_| {
            Box::new(move |g| {
                let mut gv = std_vec(g);
                for bi in 0..b {
                    for ci in 0..c {
                        let o = (bi * c + ci) * inner;
                        gv[o..o + inner].iter_mut().for_each(|e| *e *= scale[ci]);
                    }
                }
                vec![Some(from_vec(&shape, gv))]
            })
        })
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s = x.sum();
        self.g.push(ArrayD::from_elem(IxDyn(&[]), s), &[self], move |_| {
            Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gs))]
            })
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-sample sum over all non-batch axes: `[B, ...] -> [B]`.
    pub fn sum_rows(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let b = shape[0];
        let inner = x.len() / b;
        let xv = std_vec(&x);
        let v: Vec<f64> = (0..b).map(|i| xv[i * inner..(i + 1) * inner].iter().sum()).collect();
        self.g.push(from_vec(&[b], v), &[self], move |_| {
            Box::new(move |g| {
                let mut out = Vec::with_capacity(b * inner);
                for gi in g.iter() {
                    out.extend(std::iter::repeat_n(*gi, inner));
                }
                vec![Some(from_vec(&shape, out))]
            })
        })
    }

    /// Per-sample sum of squares: `[B, ...] -> [B]`.
    pub fn sum_sq_rows(self) -> Var<'g> {
        self.mul(self).sum_rows()
    }

    pub fn exp(self) -> Var<'g> {
        let y = self.value().mapv(f64::exp);
        let yc = y.clone();
        self.g.push(y, &[self], move |_| Box::new(move |g| vec![Some(g * &yc)]))
    }

    pub fn silu(self) -> Var<'g> {
        let x = self.value();
        let y = x.mapv(|v| v * sigmoid(v));
        self.g.push(y, &[self], move |_| {
            Box::new(move |g| {
                let d = x.mapv(|v| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                });
                vec![Some(g * &d)]
            })
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let v = from_vec(shape, std_vec(&x));
        self.g.push(v, &[self], move |_| {
            Box::new(move |g| vec![Some(from_vec(&old, std_vec(g)))])
        })
    }

    /// `x [B, in] * w^T + b` with `w: [out, in]`, `b: [out]`.
    pub fn linear(self, w: Var<'g>, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let x2 = x.view().into_dimensionality::<ndarray::Ix2>().expect("linear input must be 2-d");
        let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().expect("linear weight must be 2-d");
        let mut y = matmul(x2, w2.t());
        y += &bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        self.g.push(y.into_dyn(), &[self, w, b], move |needs| {
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![
                    needs[0].then(|| matmul(g2, w2).into_dyn()),
                    needs[1].then(|| matmul(g2.t(), x2).into_dyn()),
                    needs[2].then(|| g2.sum_axis(ndarray::Axis(0)).into_dyn()),
                ]
            })
        })
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x: [B,C,H,W]`, `w: [O,C,3,3]`, `b: [O]`.
    pub fn conv3x3(self, w: Var<'g>, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let s = x.shape();
        let (bn, c, h, wd) = (s[0], s[1], s[2], s[3]);
        let o = wv.shape()[0];
        assert_eq!(wv.shape(), &[o, c, 3, 3], "conv3x3 weight shape");
        let xs = x.as_slice().expect("standard layout");
        let cols = im2col3(xs, bn, c, h, wd);
        let wmat = wv
            .view()
            .into_shape_with_order((o, c * 9))
            .expect("weight is contiguous")
            .to_owned();
        let out = matmul(wmat.view(), cols.view());
        let y = cols_to_nchw(&out, bn, o, h, wd, Some(bv.as_slice().unwrap()));
        self.g.push(y, &[self, w, b], move |needs| {
            let cols = needs[1].then_some(cols);
            Box::new(move |g| {
                let dmat = nchw_to_cols(g, bn, o, h * wd);
                let dx = needs[0].then(|| {
                    let dcols = matmul(wmat.t(), dmat.view());
                    col2im3(&dcols, bn, c, h, wd)
                });
                let dw = cols.as_ref().map(|cols| {
                    matmul(dmat.view(), cols.t())
                        .into_shape_with_order(IxDyn(&[o, c, 3, 3]))
                        .unwrap()
                });
                let db = needs[2].then(|| dmat.sum_axis(ndarray::Axis(1)).into_dyn());
                vec![dx, dw, db]
            })
        })
    }

    /// 1x1 convolution. `x: [B,C,H,W]`, `w: [O,C]`, `b: [O]`.
    pub fn conv1x1(self, w: Var<'g>, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let s = x.shape();
        let (bn, c, h, wd) = (s[0], s[1], s[2], s[3]);
        let o = wv.shape()[0];
        let xm = nchw_to_cols(&x, bn, c, h * wd);
        let wmat = wv.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let out = matmul(wmat.view(), xm.view());
        let y = cols_to_nchw(&out, bn, o, h, wd, Some(bv.as_slice().unwrap()));
        self.g.push(y, &[self, w, b], move |needs| {
            Box::new(move |g| {
                let dmat = nchw_to_cols(g, bn, o, h * wd);
                vec![
                    needs[0].then(|| cols_to_nchw(&matmul(wmat.t(), dmat.view()), bn, c, h, wd, None)),
                    needs[1].then(|| matmul(dmat.view(), xm.t()).into_dyn()),
                    needs[2].then(|| dmat.sum_axis(ndarray::Axis(1)).into_dyn()),
                ]
            })
        })
    }

    /// Group normalization over `[B, C, H, W]` with per-channel affine parameters.
    pub fn group_norm(self, gamma: Var<'g>, beta: Var<'g>, groups: usize) -> Var<'g> {
        const EPS: f64 = 1e-5;
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let s = x.shape().to_vec();
        let (bn, c) = (s[0], s[1]);
        let hw = s[2] * s[3];
        assert_eq!(c % groups, 0, "channels must divide into groups");
        let cg = c / groups;
        let chunk = cg * hw;
        let xs = x.as_slice().unwrap();
        let gam = gv.as_slice().unwrap();
        let bet = bv.as_slice().unwrap();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; bn * groups];
        let mut y = vec![0.0; xs.len()];
        for bi in 0..bn {
            for gi in 0..groups {
                let o = (bi * groups + gi) * chunk;
                let sl = &xs[o..o + chunk];
                let mean = sl.iter().sum::<f64>() / chunk as f64;
                let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / chunk as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[bi * groups + gi] = is;
                for k in 0..chunk {
                    let ch = gi * cg + k / hw;
                    let xh = (sl[k] - mean) * is;
                    xhat[o + k] = xh;
                    y[o + k] = xh * gam[ch] + bet[ch];
                }
            }
        }
        let gam = gam.to_vec();
        self.g.push(from_vec(&s, y), &[self, gamma, beta], move |needs| {
            Box::new(move |g| {
                let gs = std_vec(g);
                let mut dgam = vec![0.0; c];
                let mut dbet = vec![0.0; c];
                for bi in 0..bn {
                    for ch in 0..c {
                        let o = (bi * c + ch) * hw;
                        for k in 0..hw {
                            dgam[ch] += gs[o + k] * xhat[o + k];
                            dbet[ch] += gs[o + k];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; gs.len()];
                    let m = chunk as f64;
                    for bi in 0..bn {
                        for gi in 0..groups {
                            let o = (bi * groups + gi) * chunk;
                            let is = inv_std[bi * groups + gi];
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for k in 0..chunk {
                                let d = gs[o + k] * gam[gi * cg + k / hw];
                                sum_d += d;
                                sum_dx += d * xhat[o + k];
                            }
                            for k in 0..chunk {
                                let d = gs[o + k] * gam[gi * cg + k / hw];
                                dx[o + k] = is / m * (m * d - sum_d - xhat[o + k] * sum_dx);
                            }
                        }
                    }
                    from_vec(&s, dx)
                });
                vec![
                    dx,
                    needs[1].then(|| from_vec(&[c], dgam)),
                    needs[2].then(|| from_vec(&[c], dbet)),
                ]
            })
        })
    }

    /// 2x2 average pooling on `[B, C, H, W]` with even `H, W`.
    pub fn avg_pool2(self) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial size");
        let (ho, wo) = (h / 2, w / 2);
        let xs = x.as_slice().unwrap();
        let mut y = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for i in 0..ho {
                for j in 0..wo {
                    let b = p * h * w + 2 * i * w + 2 * j;
                    y[p * ho * wo + i * wo + j] = 0.25 * (xs[b] + xs[b + 1] + xs[b + w] + xs[b + w + 1]);
                }
            }
        }
        let out_shape = vec![s[0], s[1], ho, wo];
        self.g.push(from_vec(&out_shape, y), &[self], move |_| {
            Box::new(move |g| {
                let gs = std_vec(g);
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = 0.25 * gs[p * ho * wo + i * wo + j];
                            let b = p * h * w + 2 * i * w + 2 * j;
                            dx[b] = gv;
                            dx[b + 1] = gv;
                            dx[b + w] = gv;
                            dx[b + w + 1] = gv;
                        }
                    }
                }
                vec![Some(from_vec(&s, dx))]
            })
        })
    }

    /// Nearest-neighbour 2x upsampling on `[B, C, H, W]`.
    pub fn upsample2(self) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let xs = x.as_slice().unwrap();
        let mut y = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for i in 0..ho {
                for j in 0..wo {
                    y[p * ho * wo + i * wo + j] = xs[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let out_shape = vec![s[0], s[1], ho, wo];
        self.g.push(from_vec(&out_shape, y), &[self], move |_| {
            Box::new(move |g| {
                let gs = std_vec(g);
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for i in 0..ho {
                        for j in 0..wo {
                            dx[p * h * w + (i / 2) * w + j / 2] += gs[p * ho * wo + i * wo + j];
                        }
                    }
                }
                vec![Some(from_vec(&s, dx))]
            })
        })
    }

    /// Adds `v[b, c]` to every spatial position of `x[b, c, :, :]`.
    pub fn add_channel_bias(self, v: Var<'g>) -> Var<'g> {
        let x = self.value();
        let vv = v.value();
        let s = x.shape().to_vec();
        let (bn, c) = (s[0], s[1]);
        let hw = s[2] * s[3];
        assert_eq!(vv.shape(), &[bn, c], "channel bias shape");
        let mut y = std_vec(&x);
        let vs = vv.as_slice().unwrap();
        for p in 0..bn * c {
            y[p * hw..(p + 1) * hw].iter_mut().for_each(|e| *e += vs[p]);
        }
        self.g.push(from_vec(&s, y), &[self, v], move |needs| {
            Box::new(move |g| {
                let dv = needs[1].then(|| {
                    let gs = std_vec(g);
                    let d: Vec<f64> = (0..bn * c).map(|p| gs[p * hw..(p + 1) * hw].iter().sum()).collect();
                    from_vec(&[bn, c], d)
                });
                vec![needs[0].then(|| g.clone()), dv]
            })
        })
    }

    /// Concatenates along axis 1.
    pub fn concat(parts: &[Var<'g>]) -> Var<'g> {
        let g0 = parts[0].g;
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let bn = vals[0].shape()[0];
        let widths: Vec<usize> = vals.iter().map(|v| v.len() / bn).collect();
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(bn * total);
        for bi in 0..bn {
            for (v, &wd) in vals.iter().zip(&widths) {
                let s = v.as_slice().unwrap();
                y.extend_from_slice(&s[bi * wd..(bi + 1) * wd]);
            }
        }
        let mut shape = vals[0].shape().to_vec();
        shape[1] = vals.iter().map(|v| v.shape()[1]).sum();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        g0.push(from_vec(&shape, y), parts, move |needs| {
            Box::new(move |g| {
                let gs = std_vec(g);
                let mut offset = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (k, &wd) in widths.iter().enumerate() {
                    if needs[k] {
                        let mut d = Vec::with_capacity(bn * wd);
                        for bi in 0..bn {
                            let o = bi * total + offset;
                            d.extend_from_slice(&gs[o..o + wd]);
                        }
                        out.push(Some(from_vec(&shapes[k], d)));
                    } else {
                        out.push(None);
                    }
                    offset += wd;
                }
                out
            })
        })
    }

    /// Slice `[start, start + len)` of axis 1.
    pub fn narrow(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (bn, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let xs = x.as_slice().unwrap();
        let mut y = Vec::with_capacity(bn * len * inner);
        for bi in 0..bn {
            let o = (bi * c + start) * inner;
            y.extend_from_slice(&xs[o..o + len * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        self.g.push(from_vec(&shape, y), &[self], move |_| {
            Box::new(move |g| {
                let gs = std_vec(g);
                let mut dx = vec![0.0; bn * c * inner];
                for bi in 0..bn {
                    let o = (bi * c + start) * inner;
                    dx[o..o + len * inner].copy_from_slice(&gs[bi * len * inner..(bi + 1) * len * inner]);
                }
                vec![Some(from_vec(&s, dx))]
            })
        })
    }

    /// Discrete PDE residual of `kind` for a batch of fields `a, u: [B, n, n]`.
    /// Interior nodes only; the boundary ring of the output is zero.
    pub fn pde_residual(kind: PdeKind, a: Var<'g>, u: Var<'g>, h: f64) -> Var<'g> {
        let g0 = a.g;
        let av = a.value();
        let uv = u.value();
        let s = av.shape().to_vec();
        assert_eq!(s, uv.shape(), "residual operands must share a shape");
        let (bn, n) = (s[0], s[1]);
        let m = n * n;
        let asl = av.as_slice().unwrap();
        let usl = uv.as_slice().unwrap();
        let mut y = vec![0.0; bn * m];
        for bi in 0..bn {
            let r = bi * m..(bi + 1) * m;
            grid::residual_kernel(kind, &asl[r.clone()], &usl[r.clone()], n, h, &mut y[r]);
        }
        g0.push(from_vec(&s, y), &[a, u], move |needs| {
            Box::new(move |g| {
                let gs = std_vec(g);
                let mut ga = needs[0].then(|| vec![0.0; bn * m]);
                let mut gu = needs[1].then(|| vec![0.0; bn * m]);
                let asl = av.as_slice().unwrap();
                let usl = uv.as_slice().unwrap();
                for bi in 0..bn {
                    let r = bi * m..(bi + 1) * m;
                    let gb = &gs[r.clone()];
                    match kind {
                        PdeKind::Darcy => grid::darcy_operator_adjoint(
                            &asl[r.clone()],
                            &usl[r.clone()],
                            gb,
                            n,
                            h,
                            ga.as_mut().map(|v| &mut v[r.clone()]),
                            gu.as_mut().map(|v| &mut v[r.clone()]),
                        ),
                        PdeKind::Poisson | PdeKind::Helmholtz { .. } => {
                            let k2 = match kind {
                                PdeKind::Helmholtz { k } => k * k,
                                _ => 0.0,
                            };
                            if let Some(gu) = gu.as_mut() {
                                let gu = &mut gu[r.clone()];
                                grid::laplacian_kernel_adjoint(gb, n, h, gu);
                                if k2 != 0.0 {
                                    for i in 1..n - 1 {
                                        for j in 1..n - 1 {
                                            gu[i * n + j] += k2 * gb[i * n + j];
                                        }
                                    }
                                }
                            }
                            if let Some(ga) = ga.as_mut() {
                                let ga = &mut ga[r.clone()];
                                for i in 1..n - 1 {
                                    for j in 1..n - 1 {
                                        ga[i * n + j] -= gb[i * n + j];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![ga.map(|v| from_vec(&s, v)), gu.map(|v| from_vec(&s, v))]
            })
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn scale_rows(x: &Tensor, coef: &[f64]) -> Tensor {
    let shape = x.shape().to_vec();
    let inner = x.len() / shape[0];
    let mut v = std_vec(x);
    for (b, c) in coef.iter().enumerate() {
        v[b * inner..(b + 1) * inner].iter_mut().for_each(|e| *e *= c);
    }
    from_vec(&shape, v)
}

/// `[B, C, H*W]` planes to a `[C, B*H*W]` matrix.
fn nchw_to_cols(x: &Tensor, bn: usize, c: usize, hw: usize) -> Array2<f64> {
    let xs = x.as_slice().expect("standard layout");
    let mut m = Array2::zeros((c, bn * hw));
    let ms = m.as_slice_mut().unwrap();
    for bi in 0..bn {
        for ci in 0..c {
            let src = &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            ms[ci * bn * hw + bi * hw..ci * bn * hw + (bi + 1) * hw].copy_from_slice(src);
        }
    }
    m
}

fn cols_to_nchw(m: &Array2<f64>, bn: usize, c: usize, h: usize, w: usize, bias: Option<&[f64]>) -> Tensor {
    let hw = h * w;
    let ms = m.as_standard_layout();
    let ms = ms.as_slice().unwrap();
    let mut y = vec![0.0; bn * c * hw];
    for bi in 0..bn {
        for ci in 0..c {
            let dst = &mut y[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            dst.copy_from_slice(&ms[ci * bn * hw + bi * hw..ci * bn * hw + (bi + 1) * hw]);
            if let Some(b) = bias {
                dst.iter_mut().for_each(|e| *e += b[ci]);
            }
        }
    }
    from_vec(&[bn, c, h, w], y)
}

fn im2col3(x: &[f64], bn: usize, c: usize, h: usize, w: usize) -> Array2<f64> {
    let hw = h * w;
    let cols_n = bn * hw;
    let mut cols = Array2::zeros((c * 9, cols_n));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for bi in 0..bn {
                    let plane = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst = &mut cs[row + bi * hw + y * w..row + bi * hw + (y + 1) * w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &Array2<f64>, bn: usize, c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let cols_n = bn * hw;
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().unwrap();
    let mut x = vec![0.0; bn * c * hw];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for bi in 0..bn {
                    let plane = &mut x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &cs[row + bi * hw + y * w..row + bi * hw + (y + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                            1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                            _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                        }
                    }
                }
            }
        }
    }
    from_vec(&[bn, c, h, w], x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks the tape gradient of `f` w.r.t. every input by central differences.
    fn check_grad(inputs: Vec<Tensor>, f: impl for<'g> Fn(&[Var<'g>]) -> Var<'g>) {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&vars);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.raw_dim()));
            for idx in 0..t.len() {
                let eval = |delta: f64| {
                    let g = Graph::no_grad();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, tt)| {
                            let mut tt = tt.clone();
                            if j == k {
                                tt.as_slice_mut().unwrap()[idx] += delta;
                            }
                            g.constant(tt)
                        })
                        .collect();
                    f(&vs).item()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = analytic.as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} index {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]);
        check_grad(vec![a, b], |v| {
            let p = v[0].mul(v[1]).add(v[0].silu()).sub(v[1].scale(0.3)).exp();
            p.mul_rows(&[0.5, -2.0]).sum_sq_rows().sum()
        });
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_grad(
            vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5, 4]), rand_tensor(&mut rng, &[5])],
            |v| v[0].linear(v[1], v[2]).silu().sum_sq_rows().sum(),
        );
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_grad(
            vec![
                rand_tensor(&mut rng, &[2, 2, 4, 4]),
                rand_tensor(&mut rng, &[3, 2, 3, 3]),
                rand_tensor(&mut rng, &[3]),
            ],
            |v| v[0].conv3x3(v[1], v[2]).sum_sq_rows().sum(),
        );
        check_grad(
            vec![rand_tensor(&mut rng, &[2, 2, 4, 4]), rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[3])],
            |v| v[0].conv1x1(v[1], v[2]).sum_sq_rows().sum(),
        );
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let g = Graph::no_grad();
        let y = g.constant(x.clone()).conv3x3(g.constant(w.clone()), g.constant(b.clone())).value();
        for o in 0..3 {
            for i in 0..5 {
                for j in 0..4 {
                    let mut acc = b[[o]];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (si, sj) = (i as isize + ky - 1, j as isize + kx - 1);
                                if si >= 0 && si < 5 && sj >= 0 && sj < 4 {
                                    acc += w[[o, c, ky as usize, kx as usize]] * x[[0, c, si as usize, sj as usize]];
                                }
                            }
                        }
                    }
                    assert!((y[[0, o, i, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn norm_pool_and_shape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_grad(
            vec![rand_tensor(&mut rng, &[2, 4, 4, 4]), rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[4])],
            |v| {
                let y = v[0].group_norm(v[1], v[2], 2);
                let p = y.avg_pool2().upsample2();
                Var::concat(&[p, y.narrow(1, 2)]).silu().sum_sq_rows().sum()
            },
        );
        check_grad(
            vec![rand_tensor(&mut rng, &[2, 3, 2, 2]), rand_tensor(&mut rng, &[2, 3])],
            |v| v[0].add_channel_bias(v[1]).channel_affine(&[2.0, -1.0, 0.5], &[0.1, 0.2, 0.3]).sum_sq_rows().sum(),
        );
    }

    #[test]
    fn residual_gradients_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [PdeKind::Darcy, PdeKind::Poisson, PdeKind::Helmholtz { k: 1.0 }] {
            let a = rand_tensor(&mut rng, &[2, 5, 5]).mapv(|v| v + 2.0);
            let u = rand_tensor(&mut rng, &[2, 5, 5]);
            check_grad(vec![a, u], |v| Var::pde_residual(kind, v[0], v[1], 0.25).sum_sq_rows().sum().scale(1e-3));
        }
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", crate::params::ParamGroup::Encoder, from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = store.add("b", crate::params::ParamGroup::DecoderU, from_vec(&[2], vec![0.0, 0.0]));
        store.set_trainable(w, false);
        let g = Graph::new();
        let x = g.constant(from_vec(&[1, 2], vec![1.0, 1.0]));
        let y = x.linear(g.param(&store, w), g.param(&store, b)).sum();
        let grads = g.backward(y);
        assert!(grads.param(store.key(w)).is_none());
        assert_eq!(grads.param(store.key(b)).unwrap().as_slice().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn reused_param_accumulates() {
        let mut store = ParamStore::new();
        let b = store.add("b", crate::params::ParamGroup::DecoderU, from_vec(&[2], vec![0.5, -1.0]));
        let g = Graph::new();
        let y = g.param(&store, b).sum().add(g.param(&store, b).mul(g.param(&store, b)).sum());
        let grads = g.backward(y);
        // d/db (sum b + sum b^2) = 1 + 2b
        assert_eq!(grads.param(store.key(b)).unwrap().as_slice().unwrap(), &[2.0, -1.0]);
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let g = Graph::no_grad();
        let x = g.input(from_vec(&[2], vec![1.0, 2.0]));
        let y = x.mul(x).sum();
        assert!(!y.requires_grad());
        assert_eq!(y.item(), 5.0);
    }
}
