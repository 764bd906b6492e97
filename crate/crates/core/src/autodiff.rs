//! Minimal reverse-mode automatic differentiation over whole-tensor ops.
//!
//! A `Tape` records an append-only graph of nodes; `Var` is a copyable handle
//! into one tape. Ops validate shapes when recorded, so a malformed graph
//! fails at construction, not inside backward. Node values are held in f64:
//! public tensors stay f32, but the differentiable path keeps full precision
//! so central-difference checks are limited by the method, not by rounding.
//!
//! Gradient conventions: `relu` and `abs` use derivative 0 at the kink;
//! repeated `Parameter::accumulate` calls add up until `zero_grad`.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ===== f64 value arrays (crate-internal) =====

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Arr {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
}

impl Arr {
    pub(crate) fn zeros(shape: &[usize]) -> Arr {
        Arr { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub(crate) fn from_tensor(t: &Tensor) -> Arr {
        Arr {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub(crate) fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&self.shape, self.data.iter().map(|&v| v as f32).collect())
    }

    fn add_assign(&mut self, other: &Arr) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn matmul64(a: &Arr, b: &Arr) -> Arr {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    debug_assert_eq!(k, b.shape[0]);
    let mut out = Arr::zeros(&[m, n]);
    for i in 0..m {
        for kk in 0..k {
            let av = a.data[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose64(a: &Arr) -> Arr {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = Arr::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    out
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// token_major maps a channels x (m*s) matrix to tokens x (C*s); with
/// `forward = false` it applies the inverse permutation.
fn permute_tokens(x: &Arr, c: usize, m: usize, s: usize, forward: bool) -> Arr {
    let out_shape: Vec<usize> = if forward { vec![m, c * s] } else { vec![c, m * s] };
    let mut out = Arr::zeros(&out_shape);
    for j in 0..m {
        for ci in 0..c {
            for t in 0..s {
                let chan = ci * (m * s) + j * s + t;
                let tok = j * (c * s) + ci * s + t;
                if forward {
                    out.data[tok] = x.data[chan];
                } else {
                    out.data[chan] = x.data[tok];
                }
            }
        }
    }
    out
}

// ===== tape and vars =====

/// grad_fn(grad_out, out_value, parent_values) -> parent grads, aligned with
/// the node's parent list.
type BackFn = Box<dyn Fn(&Arr, &Arr, &[&Arr]) -> Vec<Arr>>;

/// Coerces a closure to the higher-ranked `BackFn` signature; passing through
/// an `impl Fn` bound is what makes the lifetimes general.
fn boxed_back(f: impl Fn(&Arr, &Arr, &[&Arr]) -> Vec<Arr> + 'static) -> Option<BackFn> {
    Some(Box::new(f))
}

struct Node {
    value: Arr,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Copy, Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a differentiable leaf holding a copy of `t`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(Arr::from_tensor(t), vec![], None)
    }

    pub(crate) fn leaf_arr(&self, a: Arr) -> Var<'_> {
        self.push(a, vec![], None)
    }

    fn push(&self, value: Arr, parents: Vec<usize>, back: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, back });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.nodes.borrow()[idx].value.shape.clone()
    }

    /// Reverse-mode sweep from a single-element output. Returns gradients for
    /// every node that the output depends on.
    pub fn backward(&self, out: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(out.tape, self) {
            return Err(Error::domain("output var belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let out_node = &nodes[out.idx];
        if out_node.value.data.len() != 1 {
            return Err(Error::shape(format!(
                "backward wants a scalar output, got shape {:?}",
                out_node.value.shape
            )));
        }
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.idx] =
            Some(Arr { shape: out_node.value.shape.clone(), data: vec![1.0] });

        for idx in (0..=out.idx).rev() {
            if grads[idx].is_none() || nodes[idx].back.is_none() {
                continue;
            }
            let g = grads[idx].clone().unwrap();
            let node = &nodes[idx];
            let pvals: Vec<&Arr> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let pgrads = (node.back.as_ref().unwrap())(&g, &node.value, &pvals);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                debug_assert!(p < idx, "tape parents must precede children");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `v`, or None when the
    /// output does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Option<Result<Tensor>> {
        self.grads[v.idx].as_ref().map(Arr::to_tensor)
    }

    pub(crate) fn wrt_arr(&self, v: Var<'_>) -> Option<&Arr> {
        self.grads[v.idx].as_ref()
    }
}

// ===== ops =====

impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.idx)
    }

    /// Node value exported to f32, with the usual finiteness check.
    pub fn to_tensor(&self) -> Result<Tensor> {
        self.tape.nodes.borrow()[self.idx].value.to_tensor()
    }

    /// Full-precision value of a single-element node.
    pub fn scalar(&self) -> Result<f64> {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.idx].value;
        if v.data.len() != 1 {
            return Err(Error::shape(format!("scalar() on shape {:?}", v.shape)));
        }
        Ok(v.data[0])
    }

    fn same_tape(&self, other: Var<'t>, op: &str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::domain(format!("{op} mixes vars from different tapes")))
        }
    }

    fn value_shape(&self, op: &str, rank: usize) -> Result<Vec<usize>> {
        let s = self.shape();
        if s.len() != rank {
            return Err(Error::shape(format!("{op} wants rank {rank}, got {s:?}")));
        }
        Ok(s)
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        back: impl Fn(&Arr, &Arr, &Arr) -> Arr + 'static,
    ) -> Var<'t> {
        let (value, shape) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.idx].value;
            (v.data.iter().map(|&x| f(x)).collect::<Vec<f64>>(), v.shape.clone())
        };
        self.tape.push(
            Arr { shape, data: value },
            vec![self.idx],
            boxed_back(move |g, out, parents| vec![back(g, out, parents[0])]),
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(
            |x| x.max(0.0),
            |g, _, x| Arr {
                shape: x.shape.clone(),
                data: g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid64, |g, out, _| Arr {
            shape: out.shape.clone(),
            data: g
                .data
                .iter()
                .zip(&out.data)
                .map(|(&g, &y)| g * y * (1.0 - y))
                .collect(),
        })
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |g, _, x| Arr {
            shape: x.shape.clone(),
            data: g
                .data
                .iter()
                .zip(&x.data)
                .map(|(&g, &x)| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect(),
        })
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, |g, _, x| Arr {
            shape: x.shape.clone(),
            data: g.data.iter().zip(&x.data).map(|(&g, &x)| g * x.cos()).collect(),
        })
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(f64::cos, |g, _, x| Arr {
            shape: x.shape.clone(),
            data: g.data.iter().zip(&x.data).map(|(&g, &x)| -g * x.sin()).collect(),
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(
            move |x| c * x,
            move |g, _, x| Arr {
                shape: x.shape.clone(),
                data: g.data.iter().map(|&g| g * c).collect(),
            },
        )
    }

    fn binary_map(
        self,
        other: Var<'t>,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&Arr, &Arr, &Arr) -> (Arr, Arr) + 'static,
    ) -> Result<Var<'t>> {
        self.same_tape(other, op)?;
        let (value, shape) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            if a.shape != b.shape {
                return Err(Error::shape(format!(
                    "{op} shape mismatch: {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
            (
                a.data.iter().zip(&b.data).map(|(&a, &b)| f(a, b)).collect::<Vec<f64>>(),
                a.shape.clone(),
            )
        };
        Ok(self.tape.push(
            Arr { shape, data: value },
            vec![self.idx, other.idx],
            boxed_back(move |g, _, parents| {
                let (ga, gb) = back(g, parents[0], parents[1]);
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_map(other, "add", |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_map(
            other,
            "mul",
            |a, b| a * b,
            |g, a, b| {
                let ga = Arr {
                    shape: a.shape.clone(),
                    data: g.data.iter().zip(&b.data).map(|(&g, &b)| g * b).collect(),
                };
                let gb = Arr {
                    shape: b.shape.clone(),
                    data: g.data.iter().zip(&a.data).map(|(&g, &a)| g * a).collect(),
                };
                (ga, gb)
            },
        )
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "matmul")?;
        let sa = self.value_shape("matmul", 2)?;
        let sb = other.value_shape("matmul", 2)?;
        if sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul inner dims differ: {sa:?} vs {sb:?}")));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            matmul64(&nodes[self.idx].value, &nodes[other.idx].value)
        };
        Ok(self.tape.push(
            value,
            vec![self.idx, other.idx],
            boxed_back(move |g, _, parents| {
                let ga = matmul64(g, &transpose64(parents[1]));
                let gb = matmul64(&transpose64(parents[0]), g);
                vec![ga, gb]
            }),
        ))
    }

    /// Adds a length-r bias to every column of an r x c matrix.
    pub fn add_col_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias, "add_col_bias")?;
        let sm = self.value_shape("add_col_bias", 2)?;
        let sb = bias.value_shape("add_col_bias bias", 1)?;
        if sb[0] != sm[0] {
            return Err(Error::shape(format!(
                "bias length {} does not match {} rows",
                sb[0], sm[0]
            )));
        }
        let (r, c) = (sm[0], sm[1]);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let m = &nodes[self.idx].value;
            let b = &nodes[bias.idx].value;
            let mut out = m.clone();
            for i in 0..r {
                for j in 0..c {
                    out.data[i * c + j] += b.data[i];
                }
            }
            out
        };
        Ok(self.tape.push(
            value,
            vec![self.idx, bias.idx],
            boxed_back(move |g, _, _| {
                let mut gb = Arr::zeros(&[r]);
                for i in 0..r {
                    for j in 0..c {
                        gb.data[i] += g.data[i * c + j];
                    }
                }
                vec![g.clone(), gb]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let old = self.shape();
        let n: usize = old.iter().product();
        let m: usize = shape.iter().product();
        if shape.is_empty() || n != m {
            return Err(Error::shape(format!("cannot reshape {old:?} to {shape:?}")));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            Arr { shape: shape.to_vec(), data: nodes[self.idx].value.data.clone() }
        };
        Ok(self.tape.push(
            value,
            vec![self.idx],
            boxed_back(move |g, _, parents| {
                vec![Arr { shape: parents[0].shape.clone(), data: g.data.clone() }]
            }),
        ))
    }

    /// Concatenates two matrices with equal row counts along the column axis.
    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "concat_cols")?;
        let sa = self.value_shape("concat_cols", 2)?;
        let sb = other.value_shape("concat_cols", 2)?;
        if sa[0] != sb[0] {
            return Err(Error::shape(format!("concat_cols row mismatch: {sa:?} vs {sb:?}")));
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            let mut out = Arr::zeros(&[r, ca + cb]);
            for i in 0..r {
                out.data[i * (ca + cb)..i * (ca + cb) + ca]
                    .copy_from_slice(&a.data[i * ca..(i + 1) * ca]);
                out.data[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                    .copy_from_slice(&b.data[i * cb..(i + 1) * cb]);
            }
            out
        };
        Ok(self.tape.push(
            value,
            vec![self.idx, other.idx],
            boxed_back(move |g, _, _| {
                let mut ga = Arr::zeros(&[r, ca]);
                let mut gb = Arr::zeros(&[r, cb]);
                for i in 0..r {
                    ga.data[i * ca..(i + 1) * ca]
                        .copy_from_slice(&g.data[i * (ca + cb)..i * (ca + cb) + ca]);
                    gb.data[i * cb..(i + 1) * cb]
                        .copy_from_slice(&g.data[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Takes columns `[start, start+len)` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.value_shape("slice_cols", 2)?;
        let (r, c) = (s[0], s[1]);
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "slice_cols [{start}, {start}+{len}) out of {c} columns"
            )));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let mut out = Arr::zeros(&[r, len]);
            for i in 0..r {
                out.data[i * len..(i + 1) * len]
                    .copy_from_slice(&a.data[i * c + start..i * c + start + len]);
            }
            out
        };
        Ok(self.tape.push(
            value,
            vec![self.idx],
            boxed_back(move |g, _, _| {
                let mut ga = Arr::zeros(&[r, c]);
                for i in 0..r {
                    ga.data[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                vec![ga]
            }),
        ))
    }

    /// Reorders a C x (m*s) matrix of per-channel slot runs into an
    /// m x (C*s) matrix of per-token rows.
    pub fn token_major(self, m: usize, s: usize) -> Result<Var<'t>> {
        let sh = self.value_shape("token_major", 2)?;
        let c = sh[0];
        if m * s != sh[1] {
            return Err(Error::shape(format!(
                "token_major: {m} tokens x {s} slots does not cover {} columns",
                sh[1]
            )));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            permute_tokens(&nodes[self.idx].value, c, m, s, true)
        };
        Ok(self.tape.push(
            value,
            vec![self.idx],
            boxed_back(move |g, _, _| vec![permute_tokens(g, c, m, s, false)]),
        ))
    }

    /// Inverse of `token_major`.
    pub fn channel_major(self, c: usize, s: usize) -> Result<Var<'t>> {
        let sh = self.value_shape("channel_major", 2)?;
        let m = sh[0];
        if c * s != sh[1] {
            return Err(Error::shape(format!(
                "channel_major: {c} channels x {s} slots does not cover {} columns",
                sh[1]
            )));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            permute_tokens(&nodes[self.idx].value, c, m, s, false)
        };
        Ok(self.tape.push(
            value,
            vec![self.idx],
            boxed_back(move |g, _, _| vec![permute_tokens(g, c, m, s, true)]),
        ))
    }

    pub fn sum_all(self) -> Var<'t> {
        let (total, shape) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.idx].value;
            (v.data.iter().sum::<f64>(), v.shape.clone())
        };
        self.tape.push(
            Arr { shape: vec![1], data: vec![total] },
            vec![self.idx],
            boxed_back(move |g, _, _| {
                vec![Arr {
                    shape: shape.clone(),
                    data: vec![g.data[0]; shape.iter().product()],
                }]
            }),
        )
    }

    /// Mean over the width axis: C x H x W -> C x H.
    pub fn mean_over_w(self) -> Result<Var<'t>> {
        let s = self.value_shape("mean_over_w", 3)?;
        let (c, h, w) = (s[0], s[1], s[2]);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let mut out = Arr::zeros(&[c, h]);
            for ci in 0..c {
                for hi in 0..h {
                    let row = &x.data[ci * h * w + hi * w..ci * h * w + (hi + 1) * w];
                    out.data[ci * h + hi] = row.iter().sum::<f64>() / w as f64;
                }
            }
            out
        };
        Ok(self.tape.push(
            value,
            vec![self.idx],
            boxed_back(move |g, _, _| {
                let mut gx = Arr::zeros(&[c, h, w]);
                for ci in 0..c {
                    for hi in 0..h {
                        let gv = g.data[ci * h + hi] / w as f64;
                        for wi in 0..w {
                            gx.data[ci * h * w + hi * w + wi] = gv;
                        }
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Mean over the height axis: C x H x W -> C x W.
    pub fn mean_over_h(self) -> Result<Var<'t>> {
        let s = self.value_shape("mean_over_h", 3)?;
        let (c, h, w) = (s[0], s[1], s[2]);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let mut out = Arr::zeros(&[c, w]);
            for ci in 0..c {
                for wi in 0..w {
                    let mut acc = 0.0;
                    for hi in 0..h {
                        acc += x.data[ci * h * w + hi * w + wi];
                    }
                    out.data[ci * w + wi] = acc / h as f64;
                }
            }
            out
        };
        Ok(self.tape.push(
            value,
            vec![self.idx],
            boxed_back(move |g, _, _| {
                let mut gx = Arr::zeros(&[c, h, w]);
                for ci in 0..c {
                    for wi in 0..w {
                        let gv = g.data[ci * w + wi] / h as f64;
                        for hi in 0..h {
                            gx.data[ci * h * w + hi * w + wi] = gv;
                        }
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Mean over both spatial axes: C x H x W -> C.
    pub fn spatial_mean(self) -> Result<Var<'t>> {
        let s = self.value_shape("spatial_mean", 3)?;
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let mut out = Arr::zeros(&[c]);
            for ci in 0..c {
                out.data[ci] =
                    x.data[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64;
            }
            out
        };
        Ok(self.tape.push(
            value,
            vec![self.idx],
            boxed_back(move |g, _, _| {
                let mut gx = Arr::zeros(&[c, h, w]);
                for ci in 0..c {
                    let gv = g.data[ci] / hw as f64;
                    for p in 0..hw {
                        gx.data[ci * hw + p] = gv;
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Non-overlapping k x k block mean: C x H x W -> C x H/k x W/k.
    pub fn avg_pool(self, k: usize) -> Result<Var<'t>> {
        let s = self.value_shape("avg_pool", 3)?;
        let (c, h, w) = (s[0], s[1], s[2]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!("avg_pool factor {k} does not divide {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let mut out = Arr::zeros(&[c, oh, ow]);
            for ci in 0..c {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += x.data[ci * h * w + (yo * k + dy) * w + xo * k + dx];
                            }
                        }
                        out.data[ci * oh * ow + yo * ow + xo] = acc / (k * k) as f64;
                    }
                }
            }
            out
        };
        Ok(self.tape.push(
            value,
            vec![self.idx],
            boxed_back(move |g, _, _| {
                let mut gx = Arr::zeros(&[c, h, w]);
                for ci in 0..c {
                    for yo in 0..oh {
                        for xo in 0..ow {
                            let gv = g.data[ci * oh * ow + yo * ow + xo] / (k * k) as f64;
                            for dy in 0..k {
                                for dx in 0..k {
                                    gx.data[ci * h * w + (yo * k + dy) * w + xo * k + dx] = gv;
                                }
                            }
                        }
                    }
                }
                vec![gx]
            }),
        ))
    }

    fn scale_broadcast(
        self,
        gates: Var<'t>,
        op: &str,
        gate_shape: impl Fn(usize, usize, usize) -> Vec<usize>,
        gate_index: impl Fn(usize, usize, usize, usize, usize) -> usize + 'static,
    ) -> Result<Var<'t>> {
        self.same_tape(gates, op)?;
        let s = self.value_shape(op, 3)?;
        let (c, h, w) = (s[0], s[1], s[2]);
        let want = gate_shape(c, h, w);
        let got = gates.shape();
        if got != want {
            return Err(Error::shape(format!("{op} gates {got:?}, want {want:?}")));
        }
        let gate_index = Rc::new(gate_index);
        let gi = Rc::clone(&gate_index);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let gt = &nodes[gates.idx].value;
            let mut out = Arr::zeros(&[c, h, w]);
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let p = ci * h * w + hi * w + wi;
                        out.data[p] = x.data[p] * gt.data[gi(ci, hi, wi, h, w)];
                    }
                }
            }
            out
        };
        let want_back = want.clone();
        Ok(self.tape.push(
            value,
            vec![self.idx, gates.idx],
            boxed_back(move |g, _, parents| {
                let (x, gt) = (parents[0], parents[1]);
                let mut gx = Arr::zeros(&[c, h, w]);
                let mut gg = Arr::zeros(&want_back);
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            let p = ci * h * w + hi * w + wi;
                            let q = gate_index(ci, hi, wi, h, w);
                            gx.data[p] = g.data[p] * gt.data[q];
                            gg.data[q] += g.data[p] * x.data[p];
                        }
                    }
                }
                vec![gx, gg]
            }),
        ))
    }

    /// X[c,h,w] * g[c,h], the height-directional gate.
    pub fn scale_rows(self, gates: Var<'t>) -> Result<Var<'t>> {
        self.scale_broadcast(gates, "scale_rows", |c, h, _| vec![c, h], |c, h, _, hh, _| {
            c * hh + h
        })
    }

    /// X[c,h,w] * g[c,w], the width-directional gate.
    pub fn scale_cols(self, gates: Var<'t>) -> Result<Var<'t>> {
        self.scale_broadcast(gates, "scale_cols", |c, _, w| vec![c, w], |c, _, w, _, ww| {
            c * ww + w
        })
    }

    /// X[c,h,w] * g[c], the per-channel spectral gate.
    pub fn scale_channels(self, gates: Var<'t>) -> Result<Var<'t>> {
        self.scale_broadcast(gates, "scale_channels", |c, _, _| vec![c], |c, _, _, _, _| c)
    }

    /// Per-channel frequency response: channel c is projected onto the basis
    /// of its contiguous group, giving a length-C vector. `bases` holds one
    /// H x W basis per group.
    pub(crate) fn freq_project(self, bases: Rc<Vec<Arr>>, group_size: usize) -> Result<Var<'t>> {
        let s = self.value_shape("freq_project", 3)?;
        let (c, h, w) = (s[0], s[1], s[2]);
        if group_size == 0 || c % group_size != 0 {
            return Err(Error::shape(format!(
                "group size {group_size} does not divide {c} channels"
            )));
        }
        if bases.len() != c / group_size {
            return Err(Error::shape(format!(
                "{} bases for {} groups",
                bases.len(),
                c / group_size
            )));
        }
        for b in bases.iter() {
            if b.shape != [h, w] {
                return Err(Error::shape(format!(
                    "basis shape {:?} does not match {h}x{w}",
                    b.shape
                )));
            }
        }
        let hw = h * w;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let mut out = Arr::zeros(&[c]);
            for ci in 0..c {
                let basis = &bases[ci / group_size];
                let mut acc = 0.0;
                for p in 0..hw {
                    acc += x.data[ci * hw + p] * basis.data[p];
                }
                out.data[ci] = acc;
            }
            out
        };
        let bases_back = Rc::clone(&bases);
        Ok(self.tape.push(
            value,
            vec![self.idx],
            boxed_back(move |g, _, _| {
                let mut gx = Arr::zeros(&[c, h, w]);
                for ci in 0..c {
                    let basis = &bases_back[ci / group_size];
                    let gv = g.data[ci];
                    for p in 0..hw {
                        gx.data[ci * hw + p] = gv * basis.data[p];
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Binary cross-entropy against a 0/1 label, applied to a single-element
    /// logit node. Uses the log-sum-exp form, so large logits stay finite.
    pub fn bce_with_logits(self, label: f64) -> Result<Var<'t>> {
        if !(label.is_finite() && (0.0..=1.0).contains(&label)) {
            return Err(Error::domain(format!("label {label} outside [0, 1]")));
        }
        let z = self.scalar().map_err(|_| {
            Error::shape(format!("bce_with_logits wants a scalar logit, got {:?}", self.shape()))
        })?;
        let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        Ok(self.tape.push(
            Arr { shape: vec![1], data: vec![loss] },
            vec![self.idx],
            boxed_back(move |g, _, parents| {
                let z = parents[0].data[0];
                vec![Arr { shape: vec![1], data: vec![g.data[0] * (sigmoid64(z) - label)] }]
            }),
        ))
    }
}

// ===== parameters =====

/// A named, trainable tensor with an accumulated gradient of the same shape.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Parameter {
        let grad = Tensor::zeros(value.shape()).expect("value shape is valid");
        Parameter { name: name.into(), value, grad }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.leaf(&self.value)
    }

    /// Adds the swept gradient for `v` into this parameter. Does nothing when
    /// the output did not depend on `v`.
    pub fn accumulate(&mut self, grads: &Gradients, v: Var<'_>) -> Result<()> {
        if let Some(g) = grads.wrt(v) {
            let g = g?;
            if g.shape() != self.value.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} does not match parameter {} {:?}",
                    g.shape(),
                    self.name,
                    self.value.shape()
                )));
            }
            self.grad = self.grad.add(&g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape()).expect("value shape is valid");
    }
}

/// One plain gradient-descent step: value -= lr * grad, then gradients are
/// zeroed so the next accumulation starts clean.
pub fn sgd_step(params: &mut [&mut Parameter], lr: f32) -> Result<()> {
    for p in params.iter_mut() {
        p.value = p.value.sub(&p.grad.mul_scalar(lr)?)?;
        p.zero_grad();
    }
    Ok(())
}

// ===== gradient checking =====

pub const DEFAULT_CHECK_EPS: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step `eps`. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8); the report carries the worst one.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::domain(format!("gradient_check step {eps} must be positive")));
    }
    let tape = Tape::new();
    let x0 = tape.leaf(x);
    let y = f(&tape, x0)?;
    if y.shape().iter().product::<usize>() != 1 {
        return Err(Error::shape(format!(
            "gradient_check wants a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    let grads = tape.backward(y)?;
    let zero;
    let analytic = match grads.wrt_arr(x0) {
        Some(a) => a,
        None => {
            zero = Arr::zeros(x.shape());
            &zero
        }
    };

    let base = Arr::from_tensor(x);
    let eval = |point: Arr| -> Result<f64> {
        let t = Tape::new();
        let v = t.leaf_arr(point);
        f(&t, v)?.scalar()
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic_at_worst: analytic.data.first().copied().unwrap_or(0.0),
        numeric_at_worst: 0.0,
    };
    for i in 0..base.data.len() {
        let mut plus = base.clone();
        plus.data[i] += eps;
        let mut minus = base.clone();
        minus.data[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel >= report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
