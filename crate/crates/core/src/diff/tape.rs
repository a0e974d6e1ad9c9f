use std::sync::Arc;

use super::{Kernel, Scalar, LOG_EPS};
use crate::error::{Error, Result};

/// Handle to a tape node. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor {
    pub(crate) id: usize,
}

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    LogSafe(usize),
    Sin(usize),
    Cos(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Matmul(usize, usize),
    AddBias {
        lhs: usize,
        bias: usize,
    },
    Concat {
        axis: usize,
        parts: Vec<usize>,
    },
    SliceCols {
        src: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    CumprodDepth {
        src: usize,
        exclusive: bool,
    },
    Conv2dSame {
        src: usize,
        kernel: Arc<Kernel<F>>,
    },
    Sum(usize),
    Mean(usize),
    StraightThrough(usize),
}

#[derive(Debug)]
struct Node<F: Scalar> {
    op: Op<F>,
    shape: Vec<usize>,
    value: Vec<F>,
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct GradientStore<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
    visited: usize,
}

impl<F: Scalar> GradientStore<F> {
    /// Gradient of the loss w.r.t. `t`, or None if the loss does not
    /// depend on it.
    pub fn get(&self, t: Tensor) -> Option<&[F]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    /// How many nodes the backward scan processed. Each reachable node
    /// is processed exactly once.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Computation record. Create leaves, apply ops, call `backward` on a
/// scalar result. Dropping the tape drops all values.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// With recording off, new ops compute identical values but register
    /// as leaves, so backward sees no history through them.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tensor) -> &[F] {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.id].value.len()
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> Result<F> {
        let v = self.value(t);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(t).to_vec(),
            });
        }
        Ok(v[0])
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, value: Vec<F>) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if self.recording { op } else { Op::Leaf };
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, value });
        Tensor { id }
    }

    pub fn leaf(&mut self, value: Vec<F>, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != value.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![value.len()],
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            value,
        });
        Ok(Tensor { id })
    }

    pub fn scalar(&mut self, v: F) -> Tensor {
        self.leaf(vec![v], vec![1]).expect("scalar leaf")
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(F, F) -> F,
        op: impl Fn(usize, usize) -> Op<F>,
    ) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let (sa, sb) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        let (value, shape) = if sa == sb {
            (
                va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
                sa.clone(),
            )
        } else if vb.len() == 1 {
            let y = vb[0];
            (va.iter().map(|&x| f(x, y)).collect(), sa.clone())
        } else if va.len() == 1 {
            let x = va[0];
            (vb.iter().map(|&y| f(x, y)).collect(), sb.clone())
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        };
        Ok(self.push(op(a.id, b.id), shape, value))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- elementwise unary ----

    fn unary(&mut self, src: Tensor, f: impl Fn(F) -> F, op: impl Fn(usize) -> Op<F>) -> Tensor {
        let value = self.nodes[src.id].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[src.id].shape.clone();
        self.push(op(src.id), shape, value)
    }

    pub fn neg(&mut self, src: Tensor) -> Tensor {
        self.unary(src, |x| -x, Op::Neg)
    }

    pub fn exp(&mut self, src: Tensor) -> Tensor {
        self.unary(src, |x| x.exp(), Op::Exp)
    }

    /// ln(max(x, 1e-12)); the gradient uses the same clamped argument.
    pub fn log_safe(&mut self, src: Tensor) -> Tensor {
        let eps = F::from_f64(LOG_EPS);
        self.unary(src, |x| x.max(eps).ln(), Op::LogSafe)
    }

    pub fn sin(&mut self, src: Tensor) -> Tensor {
        self.unary(src, |x| x.sin(), Op::Sin)
    }

    pub fn cos(&mut self, src: Tensor) -> Tensor {
        self.unary(src, |x| x.cos(), Op::Cos)
    }

    /// |x|; gradient at exactly 0 is 0.
    pub fn abs(&mut self, src: Tensor) -> Tensor {
        self.unary(src, |x| x.abs(), Op::Abs)
    }

    /// max(x, 0); gradient at exactly 0 is 0.
    pub fn relu(&mut self, src: Tensor) -> Tensor {
        self.unary(src, |x| x.max(F::ZERO), Op::Relu)
    }

    pub fn sigmoid(&mut self, src: Tensor) -> Tensor {
        self.unary(src, sigmoid_stable, Op::Sigmoid)
    }

    /// Multiply by a plain constant (recorded as mul with a scalar leaf).
    pub fn scale(&mut self, src: Tensor, c: f64) -> Tensor {
        let k = self.scalar(F::from_f64(c));
        self.mul(src, k).expect("scalar broadcast")
    }

    /// Add a plain constant to every element.
    pub fn shift(&mut self, src: Tensor, c: f64) -> Tensor {
        let k = self.scalar(F::from_f64(c));
        self.add(src, k).expect("scalar broadcast")
    }

    // ---- structural ops ----

    /// [m,k] . [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let sa = self.nodes[a.id].shape.clone();
        let sb = self.nodes[b.id].shape.clone();
        if sa.len() != 2 {
            return Err(Error::BadRank {
                op: "matmul",
                expected: 2,
                shape: sa,
            });
        }
        if sb.len() != 2 {
            return Err(Error::BadRank {
                op: "matmul",
                expected: 2,
                shape: sb,
            });
        }
        if sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![F::ZERO; m * n];
        F::gemm_strided(
            m,
            k,
            n,
            F::ONE,
            &self.nodes[a.id].value,
            k as isize,
            1,
            &self.nodes[b.id].value,
            n as isize,
            1,
            F::ZERO,
            &mut c,
            n as isize,
            1,
        );
        Ok(self.push(Op::Matmul(a.id, b.id), vec![m, n], c))
    }

    /// [n,c] + [c], broadcast over rows.
    pub fn add_bias(&mut self, lhs: Tensor, bias: Tensor) -> Result<Tensor> {
        let sl = self.nodes[lhs.id].shape.clone();
        let sbias = self.nodes[bias.id].shape.clone();
        if sl.len() != 2 {
            return Err(Error::BadRank {
                op: "add_bias",
                expected: 2,
                shape: sl,
            });
        }
        if sbias.len() != 1 || sbias[0] != sl[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sl,
                rhs: sbias,
            });
        }
        let (n, c) = (sl[0], sl[1]);
        let lv = &self.nodes[lhs.id].value;
        let bv = &self.nodes[bias.id].value;
        let mut out = Vec::with_capacity(n * c);
        for row in 0..n {
            for col in 0..c {
                out.push(lv[row * c + col] + bv[col]);
            }
        }
        Ok(self.push(
            Op::AddBias {
                lhs: lhs.id,
                bias: bias.id,
            },
            vec![n, c],
            out,
        ))
    }

    /// Concatenate along `axis`. All parts must agree on the other axis.
    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { what: "concat" });
        }
        let rank = self.nodes[parts[0].id].shape.len();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        if rank == 1 {
            let mut value = Vec::new();
            for p in parts {
                let s = &self.nodes[p.id].shape;
                if s.len() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: self.nodes[parts[0].id].shape.clone(),
                        rhs: s.clone(),
                    });
                }
                value.extend_from_slice(&self.nodes[p.id].value);
            }
            let shape = vec![value.len()];
            return Ok(self.push(
                Op::Concat {
                    axis,
                    parts: parts.iter().map(|p| p.id).collect(),
                },
                shape,
                value,
            ));
        }
        if rank != 2 {
            return Err(Error::BadRank {
                op: "concat",
                expected: 2,
                shape: self.nodes[parts[0].id].shape.clone(),
            });
        }
        let other = 1 - axis;
        let fixed = self.nodes[parts[0].id].shape[other];
        let mut along = 0;
        for p in parts {
            let s = &self.nodes[p.id].shape;
            if s.len() != 2 || s[other] != fixed {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[parts[0].id].shape.clone(),
                    rhs: s.clone(),
                });
            }
            along += s[axis];
        }
        let shape = if axis == 0 {
            vec![along, fixed]
        } else {
            vec![fixed, along]
        };
        let mut value = vec![F::ZERO; numel(&shape)];
        if axis == 0 {
            let mut row0 = 0;
            for p in parts {
                let v = &self.nodes[p.id].value;
                value[row0 * fixed..row0 * fixed + v.len()].copy_from_slice(v);
                row0 += self.nodes[p.id].shape[0];
            }
        } else {
            let total_cols = along;
            let mut col0 = 0;
            for p in parts {
                let pc = self.nodes[p.id].shape[1];
                let v = &self.nodes[p.id].value;
                for r in 0..fixed {
                    value[r * total_cols + col0..r * total_cols + col0 + pc]
                        .copy_from_slice(&v[r * pc..(r + 1) * pc]);
                }
                col0 += pc;
            }
        }
        Ok(self.push(
            Op::Concat {
                axis,
                parts: parts.iter().map(|p| p.id).collect(),
            },
            shape,
            value,
        ))
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, src: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = self.nodes[src.id].shape.clone();
        if s.len() != 2 {
            return Err(Error::BadRank {
                op: "slice_cols",
                expected: 2,
                shape: s,
            });
        }
        let (n, c) = (s[0], s[1]);
        if start + len > c || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let v = &self.nodes[src.id].value;
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&v[r * c + start..r * c + start + len]);
        }
        Ok(self.push(
            Op::SliceCols {
                src: src.id,
                start,
                len,
            },
            vec![n, len],
            out,
        ))
    }

    /// Same elements, new shape with equal element count.
    pub fn reshape(&mut self, src: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.nodes[src.id].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[src.id].shape.clone(),
                rhs: shape,
            });
        }
        let value = self.nodes[src.id].value.clone();
        Ok(self.push(Op::Reshape(src.id), shape, value))
    }

    /// Running product along the last axis, per row.
    ///
    /// Exclusive: y[0] = 1, y[t] = x[0] * .. * x[t-1].
    /// Inclusive: y[t] = x[0] * .. * x[t].
    /// The backward pass never divides, so exact zeros are safe.
    pub fn cumprod_depth(&mut self, src: Tensor, exclusive: bool) -> Result<Tensor> {
        let s = self.nodes[src.id].shape.clone();
        if s.is_empty() || s.len() > 2 {
            return Err(Error::BadRank {
                op: "cumprod_depth",
                expected: 2,
                shape: s,
            });
        }
        let d = *s.last().unwrap();
        let rows = self.nodes[src.id].value.len() / d.max(1);
        let v = &self.nodes[src.id].value;
        let mut out = vec![F::ZERO; v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let orow = &mut out[r * d..(r + 1) * d];
            let mut p = F::ONE;
            for t in 0..d {
                if exclusive {
                    orow[t] = p;
                    p = p * row[t];
                } else {
                    p = p * row[t];
                    orow[t] = p;
                }
            }
        }
        Ok(self.push(
            Op::CumprodDepth {
                src: src.id,
                exclusive,
            },
            s,
            out,
        ))
    }

    /// Zero-padded correlation with a fixed odd-sized kernel; output has
    /// the input's shape. The kernel receives no gradient.
    pub fn conv2d_same(&mut self, src: Tensor, kernel: Arc<Kernel<F>>) -> Result<Tensor> {
        let s = self.nodes[src.id].shape.clone();
        if s.len() != 2 {
            return Err(Error::BadRank {
                op: "conv2d_same",
                expected: 2,
                shape: s,
            });
        }
        let out = correlate_same(&self.nodes[src.id].value, s[0], s[1], &kernel, false);
        Ok(self.push(
            Op::Conv2dSame {
                src: src.id,
                kernel,
            },
            s,
            out,
        ))
    }

    pub fn sum(&mut self, src: Tensor) -> Tensor {
        let mut acc = F::ZERO;
        for &x in &self.nodes[src.id].value {
            acc = acc + x;
        }
        self.push(Op::Sum(src.id), vec![1], vec![acc])
    }

    pub fn mean(&mut self, src: Tensor) -> Tensor {
        let n = self.nodes[src.id].value.len();
        let mut acc = F::ZERO;
        for &x in &self.nodes[src.id].value {
            acc = acc + x;
        }
        let v = acc / F::from_f64(n as f64);
        self.push(Op::Mean(src.id), vec![1], vec![v])
    }

    /// Replace values with externally drawn samples while letting the
    /// gradient pass through unchanged (straight-through estimator).
    pub fn straight_through(&mut self, src: Tensor, samples: Vec<F>) -> Result<Tensor> {
        if samples.len() != self.nodes[src.id].value.len() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: self.nodes[src.id].shape.clone(),
                rhs: vec![samples.len()],
            });
        }
        let shape = self.nodes[src.id].shape.clone();
        Ok(self.push(Op::StraightThrough(src.id), shape, samples))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Each node reachable from the loss
    /// is processed exactly once, in one descending-id scan.
    pub fn backward(&self, loss: Tensor) -> Result<GradientStore<F>> {
        if self.nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.id].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![F::ONE]);
        let mut visited = 0;
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(GradientStore { grads, visited })
    }

    fn add_to(&self, grads: &mut [Option<Vec<F>>], id: usize, contrib: impl Fn(usize) -> F) {
        let n = self.nodes[id].value.len();
        let slot = grads[id].get_or_insert_with(|| vec![F::ZERO; n]);
        for (i, g) in slot.iter_mut().enumerate() {
            *g = *g + contrib(i);
        }
    }

    /// Add `g` (shaped like the output of a broadcast binary op) into the
    /// gradient of parent `id`, reducing over the broadcast if the parent
    /// is a single element.
    fn add_broadcast(
        &self,
        grads: &mut [Option<Vec<F>>],
        id: usize,
        g: &[F],
        factor: &dyn Fn(usize) -> F,
    ) {
        let n = self.nodes[id].value.len();
        if n == g.len() {
            self.add_to(grads, id, |i| g[i] * factor(i));
        } else {
            debug_assert_eq!(n, 1);
            let mut acc = F::ZERO;
            for (i, &gi) in g.iter().enumerate() {
                acc = acc + gi * factor(i);
            }
            self.add_to(grads, id, |_| acc);
        }
    }

    fn accumulate_parents(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |node: usize| -> &[F] { &self.nodes[node].value };
        let bval = |node: usize, i: usize| -> F {
            let v = &self.nodes[node].value;
            if v.len() == 1 {
                v[0]
            } else {
                v[i]
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_broadcast(grads, *a, g, &|_| F::ONE);
                self.add_broadcast(grads, *b, g, &|_| F::ONE);
            }
            Op::Sub(a, b) => {
                self.add_broadcast(grads, *a, g, &|_| F::ONE);
                self.add_broadcast(grads, *b, g, &|_| -F::ONE);
            }
            Op::Mul(a, b) => {
                self.add_broadcast(grads, *a, g, &|i| bval(*b, i));
                self.add_broadcast(grads, *b, g, &|i| bval(*a, i));
            }
            Op::Div(a, b) => {
                self.add_broadcast(grads, *a, g, &|i| F::ONE / bval(*b, i));
                self.add_broadcast(grads, *b, g, &|i| {
                    let d = bval(*b, i);
                    -bval(*a, i) / (d * d)
                });
            }
            Op::Neg(a) => self.add_to(grads, *a, |i| -g[i]),
            Op::Exp(a) => {
                let y = val(id);
                self.add_to(grads, *a, |i| g[i] * y[i]);
            }
            Op::LogSafe(a) => {
                let eps = F::from_f64(LOG_EPS);
                let x = val(*a);
                self.add_to(grads, *a, |i| g[i] / x[i].max(eps));
            }
            Op::Sin(a) => {
                let x = val(*a);
                self.add_to(grads, *a, |i| g[i] * x[i].cos());
            }
            Op::Cos(a) => {
                let x = val(*a);
                self.add_to(grads, *a, |i| -g[i] * x[i].sin());
            }
            Op::Abs(a) => {
                let x = val(*a);
                self.add_to(grads, *a, |i| {
                    if x[i] > F::ZERO {
                        g[i]
                    } else if x[i] < F::ZERO {
                        -g[i]
                    } else {
                        F::ZERO
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                self.add_to(grads, *a, |i| if x[i] > F::ZERO { g[i] } else { F::ZERO });
            }
            Op::Sigmoid(a) => {
                let y = val(id);
                self.add_to(grads, *a, |i| g[i] * y[i] * (F::ONE - y[i]));
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                {
                    let ga = grads[*a].get_or_insert_with(|| vec![F::ZERO; m * k]);
                    // dA += dC . B^T
                    F::gemm_strided(
                        m,
                        n,
                        k,
                        F::ONE,
                        g,
                        n as isize,
                        1,
                        val(*b),
                        1,
                        n as isize,
                        F::ONE,
                        ga,
                        k as isize,
                        1,
                    );
                }
                {
                    let gb = grads[*b].get_or_insert_with(|| vec![F::ZERO; k * n]);
                    // dB += A^T . dC
                    F::gemm_strided(
                        k,
                        m,
                        n,
                        F::ONE,
                        val(*a),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        F::ONE,
                        gb,
                        n as isize,
                        1,
                    );
                }
            }
            Op::AddBias { lhs, bias } => {
                self.add_to(grads, *lhs, |i| g[i]);
                let c = self.nodes[*bias].value.len();
                let rows = g.len() / c;
                let mut col_sums = vec![F::ZERO; c];
                for r in 0..rows {
                    for (col, s) in col_sums.iter_mut().enumerate() {
                        *s = *s + g[r * c + col];
                    }
                }
                self.add_to(grads, *bias, |i| col_sums[i]);
            }
            Op::Concat { axis, parts } => {
                if self.nodes[id].shape.len() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        self.add_to(grads, p, |i| g[offset + i]);
                        offset += n;
                    }
                } else {
                    let rows = self.nodes[id].shape[0];
                    let total_cols = self.nodes[id].shape[1];
                    let mut col0 = 0;
                    for &p in parts {
                        let pc = self.nodes[p].shape[1];
                        let _ = rows;
                        self.add_to(grads, p, |i| {
                            let (r, c) = (i / pc, i % pc);
                            g[r * total_cols + col0 + c]
                        });
                        col0 += pc;
                    }
                }
            }
            Op::SliceCols { src, start, len } => {
                let c = self.nodes[*src].shape[1];
                let (start, len) = (*start, *len);
                let n_src = self.nodes[*src].value.len();
                let slot = grads[*src].get_or_insert_with(|| vec![F::ZERO; n_src]);
                for (i, &gi) in g.iter().enumerate() {
                    let (r, col) = (i / len, i % len);
                    let j = r * c + start + col;
                    slot[j] = slot[j] + gi;
                }
            }
            Op::Reshape(a) => self.add_to(grads, *a, |i| g[i]),
            Op::CumprodDepth { src, exclusive } => {
                let x = val(*src);
                let y = val(id);
                let d = *self.nodes[*src].shape.last().unwrap();
                let rows = x.len() / d.max(1);
                let n_src = x.len();
                let slot = grads[*src].get_or_insert_with(|| vec![F::ZERO; n_src]);
                let mut suffix = vec![F::ZERO; d];
                for r in 0..rows {
                    let xo = &x[r * d..(r + 1) * d];
                    let go = &g[r * d..(r + 1) * d];
                    if *exclusive {
                        // suffix[t] = sum_{u>t} g[u] * prod_{t<m<u} x[m]
                        suffix[d - 1] = F::ZERO;
                        for t in (0..d - 1).rev() {
                            suffix[t] = go[t + 1] + xo[t + 1] * suffix[t + 1];
                        }
                        let yo = &y[r * d..(r + 1) * d];
                        for t in 0..d {
                            slot[r * d + t] = slot[r * d + t] + yo[t] * suffix[t];
                        }
                    } else {
                        // suffix[t] = sum_{u>=t} g[u] * prod_{t<m<=u} x[m]
                        suffix[d - 1] = go[d - 1];
                        for t in (0..d - 1).rev() {
                            suffix[t] = go[t] + xo[t + 1] * suffix[t + 1];
                        }
                        let mut before = F::ONE;
                        for t in 0..d {
                            slot[r * d + t] = slot[r * d + t] + before * suffix[t];
                            before = before * xo[t];
                        }
                    }
                }
            }
            Op::Conv2dSame { src, kernel } => {
                let (rows, cols) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let gin = correlate_same(g, rows, cols, kernel, true);
                self.add_to(grads, *src, |i| gin[i]);
            }
            Op::Sum(a) => self.add_to(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                let w = g[0] / F::from_f64(n as f64);
                self.add_to(grads, *a, |_| w);
            }
            Op::StraightThrough(a) => self.add_to(grads, *a, |i| g[i]),
        }
    }
}

fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

/// Correlation with zero padding; `flip` rotates the kernel by 180
/// degrees, turning the correlation into a convolution (the adjoint).
fn correlate_same<F: Scalar>(
    input: &[F],
    rows: usize,
    cols: usize,
    kernel: &Kernel<F>,
    flip: bool,
) -> Vec<F> {
    let (kr, kc) = (kernel.rows, kernel.cols);
    let (cr, cc) = (kr / 2, kc / 2);
    let mut out = vec![F::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = F::ZERO;
            for i in 0..kr {
                let rr = r as isize + i as isize - cr as isize;
                if rr < 0 || rr >= rows as isize {
                    continue;
                }
                for j in 0..kc {
                    let cj = c as isize + j as isize - cc as isize;
                    if cj < 0 || cj >= cols as isize {
                        continue;
                    }
                    let w = if flip {
                        kernel.at(kr - 1 - i, kc - 1 - j)
                    } else {
                        kernel.at(i, j)
                    };
                    acc = acc + input[rr as usize * cols + cj as usize] * w;
                }
            }
            out[r * cols + c] = acc;
        }
    }
    out
}
