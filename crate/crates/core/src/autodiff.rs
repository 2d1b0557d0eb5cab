//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every op records its parents and a backward closure that maps the output
//! gradient to parent gradients. Nodes created with [`Graph::constant`] (and
//! everything computed only from constants) are skipped during the backward
//! sweep.

use std::sync::Arc;

use crate::bev::bilinear_weights;
use crate::geometry::GridSpec;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

struct BackCtx<'a> {
    grad: &'a Tensor,
    nodes: &'a [Node],
    out: usize,
}

impl BackCtx<'_> {
    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn out(&self) -> &Tensor {
        &self.nodes[self.out].value
    }
}

type BackwardFn = Box<dyn Fn(&BackCtx<'_>, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`; `None` when the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.rows, like.cols))
    }
}

fn gelu(x: f64) -> (f64, f64) {
    // tanh approximation
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = K * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = K * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

/// Scalar GELU used by the direct (non-tape) forward paths.
pub fn gelu_value(x: f64) -> f64 {
    gelu(x).0
}

pub fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, backward: BackwardFn) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward: requires_grad.then_some(backward),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse sweep from a 1×1 output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar output, got {:?}", out.value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            if let Some(backward) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
                let ctx = BackCtx {
                    grad: &grad,
                    nodes: &self.nodes,
                    out: i,
                };
                let parent_grads = backward(&ctx, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((p, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let (true, Some(g)) = (*need, g) else { continue };
                    debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape(), "grad shape for node {}", p.0);
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn shape_of(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(
            value,
            vec![a, b],
            Box::new(move |ctx, needs| {
                let (av, bv) = (ctx.val(a), ctx.val(b));
                let ga = needs[0].then(|| ctx.grad.matmul(&bv.transpose()));
                let gb = needs[1].then(|| av.transpose().matmul(ctx.grad));
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, vec![a], Box::new(|ctx, _| vec![Some(ctx.grad.transpose())]))
    }

    /// Same data, new row/column split.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape size");
        let (r0, c0) = v.shape();
        let value = Tensor::from_vec(rows, cols, v.data.clone());
        self.push(
            value,
            vec![a],
            Box::new(move |ctx, _| vec![Some(Tensor::from_vec(r0, c0, ctx.grad.data.clone()))]),
        )
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape_of(a), self.shape_of(b), "add shapes");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, vec![a, b], Box::new(|ctx, _| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape_of(a), self.shape_of(b), "sub shapes");
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor::from_vec(av.rows, av.cols, av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect());
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx, _| vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-1.0))]),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape_of(a), self.shape_of(b), "mul shapes");
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor::from_vec(av.rows, av.cols, av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect());
        self.push(
            value,
            vec![a, b],
            Box::new(move |ctx, needs| {
                let g = ctx.grad;
                let prod = |o: &Tensor| Tensor::from_vec(g.rows, g.cols, g.data.iter().zip(&o.data).map(|(x, y)| x * y).collect());
                vec![needs[0].then(|| prod(ctx.val(b))), needs[1].then(|| prod(ctx.val(a)))]
            }),
        )
    }

    /// `a + row` with `row: 1 × cols` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "add_row shapes");
        let mut value = av.clone();
        for r in 0..value.rows {
            for (x, b) in value.row_mut(r).iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        self.push(
            value,
            vec![a, row],
            Box::new(|ctx, needs| {
                let g = ctx.grad;
                let grow = needs[1].then(|| {
                    let mut s = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, v) in s.data.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    s
                });
                vec![Some(g.clone()), grow]
            }),
        )
    }

    /// `a ⊙ row` with `row: 1 × cols` broadcast over rows.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "mul_row shapes");
        let mut value = av.clone();
        for r in 0..value.rows {
            for (x, b) in value.row_mut(r).iter_mut().zip(&rv.data) {
                *x *= b;
            }
        }
        self.push(
            value,
            vec![a, row],
            Box::new(move |ctx, needs| {
                let (g, av, rv) = (ctx.grad, ctx.val(a), ctx.val(row));
                let ga = needs[0].then(|| {
                    let mut t = g.clone();
                    for r in 0..t.rows {
                        for (x, b) in t.row_mut(r).iter_mut().zip(&rv.data) {
                            *x *= b;
                        }
                    }
                    t
                });
                let gr = needs[1].then(|| {
                    let mut s = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for ((acc, x), y) in s.data.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *acc += x * y;
                        }
                    }
                    s
                });
                vec![ga, gr]
            }),
        )
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).scale(k);
        self.push(value, vec![a], Box::new(move |ctx, _| vec![Some(ctx.grad.scale(k))]))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> (f64, f64)) -> NodeId {
        let av = self.value(a);
        let (vals, derivs): (Vec<f64>, Vec<f64>) = av.data.iter().map(|&x| f(x)).unzip();
        let value = Tensor::from_vec(av.rows, av.cols, vals);
        let derivs = Tensor::from_vec(av.rows, av.cols, derivs);
        self.push(
            value,
            vec![a],
            Box::new(move |ctx, _| {
                let g = ctx.grad;
                vec![Some(Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&derivs.data).map(|(x, d)| x * d).collect(),
                ))]
            }),
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| {
            let s = sigmoid_value(x);
            (s, s * (1.0 - s))
        })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| (x.ln(), 1.0 / x))
    }

    /// Square root with a zero subgradient at 0.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| {
            let s = x.sqrt();
            (s, if s > 0.0 { 0.5 / s } else { 0.0 })
        })
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| (x * x, 2.0 * x))
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape_of(a);
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(value, vec![a], Box::new(move |ctx, _| vec![Some(Tensor::filled(r, c, ctx.grad.item()))]))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum, `rows × 1`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (r, c) = av.shape();
        let value = Tensor::from_vec(r, 1, (0..r).map(|i| av.row(i).iter().sum()).collect());
        self.push(
            value,
            vec![a],
            Box::new(move |ctx, _| {
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = ctx.grad.data[i];
                    g.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                vec![Some(g)]
            }),
        )
    }

    /// `log Σ exp(a)` over all entries, stable.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let m = av.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = av.data.iter().map(|x| (x - m).exp()).sum();
        let value = Tensor::scalar(m + s.ln());
        self.push(
            value,
            vec![a],
            Box::new(move |ctx, _| {
                let (av, lse) = (ctx.val(a), ctx.out().item());
                let g = ctx.grad.item();
                vec![Some(av.map(|x| g * (x - lse).exp()))]
            }),
        )
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push(
            value,
            vec![a],
            Box::new(|ctx, _| {
                let (y, g) = (ctx.out(), ctx.grad);
                let mut out = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, yy), gg) in out.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = yy * (gg - dot);
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    /// Row-wise layer normalization with learnable `gain` and `bias` (1 × cols).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let (gv, bv) = (self.value(gain), self.value(bias));
        assert_eq!(gv.shape(), (1, c));
        assert_eq!(bv.shape(), (1, c));
        let mut xhat = Tensor::zeros(r, c);
        let mut inv_std = vec![0.0; r];
        let mut value = Tensor::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for k in 0..c {
                let h = (row[k] - mean) * is;
                xhat.set(i, k, h);
                value.set(i, k, h * gv.data[k] + bv.data[k]);
            }
        }
        self.push(
            value,
            vec![x, gain, bias],
            Box::new(move |ctx, needs| {
                let g = ctx.grad;
                let gv = ctx.val(gain);
                let gx = needs[0].then(|| {
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        let dh: Vec<f64> = (0..c).map(|k| g.get(i, k) * gv.data[k]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for k in 0..c {
                            out.set(i, k, inv_std[i] * (dh[k] - mean_dh - xhat.get(i, k) * mean_dh_h));
                        }
                    }
                    out
                });
                let ggain = needs[1].then(|| {
                    let mut s = Tensor::zeros(1, c);
                    for i in 0..r {
                        for k in 0..c {
                            s.data[k] += g.get(i, k) * xhat.get(i, k);
                        }
                    }
                    s
                });
                let gbias = needs[2].then(|| {
                    let mut s = Tensor::zeros(1, c);
                    for i in 0..r {
                        for k in 0..c {
                            s.data[k] += g.get(i, k);
                        }
                    }
                    s
                });
                vec![gx, ggain, gbias]
            }),
        )
    }

    // ----- indexing -----

    /// `out[i] = a[index[i]]` (rows may repeat).
    pub fn gather_rows(&mut self, a: NodeId, index: Vec<usize>) -> NodeId {
        let av = self.value(a);
        let (r, c) = av.shape();
        let mut value = Tensor::zeros(index.len(), c);
        for (o, &i) in index.iter().enumerate() {
            value.row_mut(o).copy_from_slice(av.row(i));
        }
        self.push(
            value,
            vec![a],
            Box::new(move |ctx, _| {
                let mut g = Tensor::zeros(r, c);
                for (o, &i) in index.iter().enumerate() {
                    for (acc, v) in g.row_mut(i).iter_mut().zip(ctx.grad.row(o)) {
                        *acc += v;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "concat_rows widths");
        let (ra, c) = av.shape();
        let rb = bv.rows;
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let value = Tensor::from_vec(ra + rb, c, data);
        self.push(
            value,
            vec![a, b],
            Box::new(move |ctx, _| {
                let g = &ctx.grad.data;
                vec![
                    Some(Tensor::from_vec(ra, c, g[..ra * c].to_vec())),
                    Some(Tensor::from_vec(rb, c, g[ra * c..].to_vec())),
                ]
            }),
        )
    }

    /// Side-by-side concatenation of equally tall blocks.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols).collect();
        let total: usize = widths.iter().sum();
        let mut value = Tensor::zeros(rows, total);
        let mut start = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols heights");
            for i in 0..rows {
                value.row_mut(i)[start..start + w].copy_from_slice(v.row(i));
            }
            start += w;
        }
        self.push(
            value,
            parts.to_vec(),
            Box::new(move |ctx, needs| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let s = start;
                        start += w;
                        need.then(|| {
                            let mut t = Tensor::zeros(rows, w);
                            for i in 0..rows {
                                t.row_mut(i).copy_from_slice(&ctx.grad.row(i)[s..s + w]);
                            }
                            t
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Column slice `[start, start + width)`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> NodeId {
        let av = self.value(a);
        let (r, c) = av.shape();
        assert!(start + width <= c);
        let mut value = Tensor::zeros(r, width);
        for i in 0..r {
            value.row_mut(i).copy_from_slice(&av.row(i)[start..start + width]);
        }
        self.push(
            value,
            vec![a],
            Box::new(move |ctx, _| {
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    g.row_mut(i)[start..start + width].copy_from_slice(ctx.grad.row(i));
                }
                vec![Some(g)]
            }),
        )
    }

    /// Means over consecutive row segments: segment `s` spans rows
    /// `offsets[s]..offsets[s + 1]`.
    pub fn segment_mean(&mut self, a: NodeId, offsets: Arc<Vec<usize>>) -> NodeId {
        let av = self.value(a);
        let (r, c) = av.shape();
        let nseg = offsets.len() - 1;
        let mut value = Tensor::zeros(nseg, c);
        for s in 0..nseg {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let inv = 1.0 / (hi - lo) as f64;
            let out = value.row_mut(s);
            for i in lo..hi {
                for (o, v) in out.iter_mut().zip(av.row(i)) {
                    *o += v * inv;
                }
            }
        }
        self.push(
            value,
            vec![a],
            Box::new(move |ctx, _| {
                let mut g = Tensor::zeros(r, c);
                for s in 0..nseg {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    let inv = 1.0 / (hi - lo) as f64;
                    for i in lo..hi {
                        for (o, v) in g.row_mut(i).iter_mut().zip(ctx.grad.row(s)) {
                            *o = v * inv;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// `out[n] = Σ_p w[n, p] · x[n·P + p]` for `x: (N·P) × C`, `w: N × P`.
    pub fn group_weighted_sum(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, p) = wv.shape();
        let c = xv.cols;
        assert_eq!(xv.rows, n * p, "group_weighted_sum shapes");
        let mut value = Tensor::zeros(n, c);
        for i in 0..n {
            for k in 0..p {
                let wk = wv.get(i, k);
                let src = xv.row(i * p + k);
                for (o, v) in value.row_mut(i).iter_mut().zip(src) {
                    *o += wk * v;
                }
            }
        }
        self.push(
            value,
            vec![x, w],
            Box::new(move |ctx, needs| {
                let (xv, wv, g) = (ctx.val(x), ctx.val(w), ctx.grad);
                let gx = needs[0].then(|| {
                    let mut t = Tensor::zeros(n * p, c);
                    for i in 0..n {
                        for k in 0..p {
                            let wk = wv.get(i, k);
                            for (o, v) in t.row_mut(i * p + k).iter_mut().zip(g.row(i)) {
                                *o = wk * v;
                            }
                        }
                    }
                    t
                });
                let gw = needs[1].then(|| {
                    let mut t = Tensor::zeros(n, p);
                    for i in 0..n {
                        for k in 0..p {
                            t.set(i, k, xv.row(i * p + k).iter().zip(g.row(i)).map(|(a, b)| a * b).sum());
                        }
                    }
                    t
                });
                vec![gx, gw]
            }),
        )
    }

    // ----- BEV sampling -----

    /// Bilinear samples of `grid` (`cells × C`, laid out by `spec`) at the
    /// grid-coordinate rows of `points` (`N × 2`). Differentiable in both the
    /// grid values and the sample positions; zero outside the grid.
    pub fn bilinear(&mut self, grid: NodeId, spec: GridSpec, points: NodeId) -> NodeId {
        let (gv, pv) = (self.value(grid), self.value(points));
        assert_eq!(gv.rows, spec.cells(), "bilinear grid rows");
        assert_eq!(pv.cols, 2, "bilinear points");
        let c = gv.cols;
        let n = pv.rows;
        let weights: Vec<_> = (0..n).map(|i| bilinear_weights(&spec, [pv.get(i, 0), pv.get(i, 1)])).collect();
        let mut value = Tensor::zeros(n, c);
        for (i, bw) in weights.iter().enumerate() {
            if let Some(bw) = bw {
                let out = value.row_mut(i);
                for (cell, w) in bw.cells.iter().zip(bw.weights) {
                    for (o, v) in out.iter_mut().zip(gv.row(*cell)) {
                        *o += w * v;
                    }
                }
            }
        }
        self.push(
            value,
            vec![grid, points],
            Box::new(move |ctx, needs| {
                let (gv, g) = (ctx.val(grid), ctx.grad);
                let ggrid = needs[0].then(|| {
                    let mut t = Tensor::zeros(gv.rows, c);
                    for (i, bw) in weights.iter().enumerate() {
                        if let Some(bw) = bw {
                            for (cell, w) in bw.cells.iter().zip(bw.weights) {
                                for (o, v) in t.row_mut(*cell).iter_mut().zip(g.row(i)) {
                                    *o += w * v;
                                }
                            }
                        }
                    }
                    t
                });
                let gpts = needs[1].then(|| {
                    let mut t = Tensor::zeros(n, 2);
                    for (i, bw) in weights.iter().enumerate() {
                        if let Some(bw) = bw {
                            let (mut du, mut dv) = (0.0, 0.0);
                            for k in 0..4 {
                                let dot: f64 = gv.row(bw.cells[k]).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                                du += bw.d_du[k] * dot;
                                dv += bw.d_dv[k] * dot;
                            }
                            t.set(i, 0, du);
                            t.set(i, 1, dv);
                        }
                    }
                    t
                });
                vec![ggrid, gpts]
            }),
        )
    }

    /// Fused bilinear sampling at fixed points followed by a per-segment mean:
    /// row `s` of the result averages the samples at
    /// `points[offsets[s]..offsets[s+1]]`.
    pub fn sample_segments(
        &mut self,
        grid: NodeId,
        spec: GridSpec,
        points: Arc<Vec<[f64; 2]>>,
        offsets: Arc<Vec<usize>>,
    ) -> NodeId {
        let gv = self.value(grid);
        assert_eq!(gv.rows, spec.cells(), "sample_segments grid rows");
        let c = gv.cols;
        let nseg = offsets.len() - 1;
        let mut value = Tensor::zeros(nseg, c);
        let data = &gv.data;
        for s in 0..nseg {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let inv = 1.0 / (hi - lo) as f64;
            let out = value.row_mut(s);
            for p in &points[lo..hi] {
                if let Some(bw) = bilinear_weights(&spec, *p) {
                    for (cell, w) in bw.cells.iter().zip(bw.weights) {
                        if w == 0.0 {
                            continue;
                        }
                        for (o, v) in out.iter_mut().zip(&data[cell * c..(cell + 1) * c]) {
                            *o += inv * w * v;
                        }
                    }
                }
            }
        }
        let cells = gv.rows;
        self.push(
            value,
            vec![grid],
            Box::new(move |ctx, _| {
                let g = ctx.grad;
                let mut t = Tensor::zeros(cells, c);
                for s in 0..nseg {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    let inv = 1.0 / (hi - lo) as f64;
                    for p in &points[lo..hi] {
                        if let Some(bw) = bilinear_weights(&spec, *p) {
                            for (cell, w) in bw.cells.iter().zip(bw.weights) {
                                for (o, v) in t.row_mut(*cell).iter_mut().zip(g.row(s)) {
                                    *o += inv * w * v;
                                }
                            }
                        }
                    }
                }
                vec![Some(t)]
            }),
        )
    }

    // ----- losses -----

    /// Elementwise binary focal loss of probabilities `p` against fixed
    /// `target` values in {0, 1}.
    pub fn focal(&mut self, p: NodeId, target: Arc<Tensor>, gamma: f64, alpha: f64) -> NodeId {
        assert_eq!(self.shape_of(p), target.shape(), "focal shapes");
        let pv = self.value(p);
        let (vals, derivs): (Vec<f64>, Vec<f64>) = pv
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| focal_term(p, t, gamma, alpha))
            .unzip();
        let value = Tensor::from_vec(pv.rows, pv.cols, vals);
        let derivs = Tensor::from_vec(pv.rows, pv.cols, derivs);
        self.push(
            value,
            vec![p],
            Box::new(move |ctx, _| {
                let g = ctx.grad;
                vec![Some(Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&derivs.data).map(|(a, d)| a * d).collect(),
                ))]
            }),
        )
    }
}

/// Focal loss of one probability and its derivative in `p`:
/// `−α [t (1−p)^γ ln p + (1−t) p^γ ln(1−p)]`.
pub fn focal_term(p: f64, target: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let pw = |b: f64, e: f64| if e == 0.0 { 1.0 } else { b.powf(e) };
    let dpw = |b: f64, e: f64| if e == 0.0 { 0.0 } else { e * b.powf(e - 1.0) };
    // a branch with zero weight is skipped so saturated p stays finite
    let q = 1.0 - p;
    let (mut v, mut d) = (0.0, 0.0);
    if target != 0.0 {
        v -= alpha * target * pw(q, gamma) * p.ln();
        d -= alpha * target * (-dpw(q, gamma) * p.ln() + pw(q, gamma) / p);
    }
    if target != 1.0 {
        v -= alpha * (1.0 - target) * pw(p, gamma) * q.ln();
        d -= alpha * (1.0 - target) * (dpw(p, gamma) * q.ln() - pw(p, gamma) / q);
    }
    (v, d)
}
