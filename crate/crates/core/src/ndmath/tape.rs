//! Dynamic computation tape with per-op adjoint rules.
//!
//! Nodes are appended in execution order, so a reverse sweep over the
//! node list visits every node after all of its consumers.

use crate::error::{Error, Result};
use crate::ndmath::real::{gemm, Layout};
use crate::ndmath::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var },
    Matmul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, c: T },
    MulAlong { x: Var, v: Var, axis: usize },
    Silu(Var),
    L2Normalize { x: Var, axis: usize, norms: Vec<T>, eps: T },
    RmsScale { x: Var, gamma: Var, rms: Vec<T> },
    Rotary { x: Var, cos: Vec<T>, sin: Vec<T>, half: usize },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    SliceLast { x: Var, start: usize },
    Permute0213(Var),
    LerpFactor(Var),
    Sum(Var),
    SumSquares(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed operations so [`Tape::backward`] can replay their
/// adjoints in reverse order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    eps: T,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn replace_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("nonempty shape") = last;
    s
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            eps: T::zero(),
        }
    }

    /// A tape whose `l2_normalize` and `rms_scale` add `eps` to the norm
    /// instead of failing on exact zeros.
    pub fn with_eps(eps: f64) -> Self {
        Tape {
            nodes: Vec::new(),
            eps: T::of(eps),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `x · wᵀ` for `x: [..., in]` and `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.ndim() != 2 || xv.last_dim() != wv.shape()[1] {
            return Err(Error::shape(
                "linear",
                format!("x {:?} vs w {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (out, inp) = (wv.shape()[0], wv.shape()[1]);
        let n = xv.len() / inp;
        let mut y = vec![T::zero(); n * out];
        gemm(
            xv.data(),
            Layout::row_major(n, inp),
            wv.data(),
            Layout::transposed(out, inp),
            &mut y,
            false,
        );
        let value = Tensor::new(replace_last(xv.shape(), out), y)?;
        Ok(self.push(value, Op::Linear { x, w }, &[x, w]))
    }

    /// Plain matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut y = vec![T::zero(); m * n];
        gemm(
            av.data(),
            Layout::row_major(m, k),
            bv.data(),
            Layout::row_major(k, n),
            &mut y,
            false,
        );
        let value = Tensor::new(vec![m, n], y)?;
        Ok(self.push(value, Op::Matmul { a, b }, &[a, b]))
    }

    /// Batched matmul over the leading axis: `[t, m, k] · [t, k, n]`, or
    /// against `[t, n, k]` transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || Error::shape("bmm", format!("{:?} · {:?}", av.shape(), bv.shape()));
        if av.ndim() != 3 || bv.ndim() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(bad());
        }
        let (t, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let lb = if trans_b {
            Layout::transposed(n, k)
        } else {
            Layout::row_major(k, n)
        };
        let mut y = vec![T::zero(); t * m * n];
        for i in 0..t {
            gemm(
                &av.data()[i * m * k..(i + 1) * m * k],
                Layout::row_major(m, k),
                &bv.data()[i * k * n..(i + 1) * k * n],
                lb,
                &mut y[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(vec![t, m, n], y)?;
        Ok(self.push(value, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure_same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// Multiplies `x` by the vector `v` broadcast along `axis`
    /// (`v.len() == x.shape()[axis]`).
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if axis >= xv.ndim() || vv.len() != xv.shape()[axis] {
            return Err(Error::shape(
                "mul_along",
                format!("x {:?}, axis {axis}, v {:?}", xv.shape(), vv.shape()),
            ));
        }
        let (outer, len, inner) = xv.axis_split(axis);
        let mut y = xv.data().to_vec();
        let vd = vv.data();
        for o in 0..outer {
            for (a, &s) in vd.iter().enumerate().take(len) {
                let base = (o * len + a) * inner;
                for e in &mut y[base..base + inner] {
                    *e = *e * s;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(value, Op::MulAlong { x, v, axis }, &[x, v]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), &[x])
    }

    /// Scales every slice along `axis` to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let eps = self.eps;
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::invalid(format!("l2_normalize: axis {axis} out of range")));
        }
        let (outer, len, inner) = xv.axis_split(axis);
        let d = xv.data();
        let mut norms = vec![T::zero(); outer * inner];
        let mut y = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut ss = T::zero();
                for a in 0..len {
                    let e = d[(o * len + a) * inner + i];
                    ss = ss + e * e;
                }
                let n = ss.sqrt();
                if n == T::zero() && eps == T::zero() {
                    return Err(Error::degenerate("l2_normalize", "zero-norm slice"));
                }
                let inv = T::one() / (n + eps);
                for a in 0..len {
                    let idx = (o * len + a) * inner + i;
                    y[idx] = d[idx] * inv;
                }
                norms[o * inner + i] = n;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(value, Op::L2Normalize { x, axis, norms, eps }, &[x]))
    }

    /// `x / rms(x) ⊙ gamma` over the last axis.
    pub fn rms_scale(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let eps = self.eps;
        let (xv, gv) = (self.value(x), self.value(gamma));
        let n = xv.last_dim();
        if gv.len() != n {
            return Err(Error::shape(
                "rms_scale",
                format!("gamma {:?} for x {:?}", gv.shape(), xv.shape()),
            ));
        }
        let nn = T::of(n as f64);
        let mut rms = Vec::with_capacity(xv.len() / n);
        let mut y = Vec::with_capacity(xv.len());
        for row in xv.rows() {
            let ms = row.iter().map(|&e| e * e).sum::<T>() / nn;
            let r = (ms + eps).sqrt();
            if r == T::zero() {
                return Err(Error::degenerate("rms_scale", "zero RMS row"));
            }
            y.extend(row.iter().zip(gv.data()).map(|(&e, &g)| e / r * g));
            rms.push(r);
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(value, Op::RmsScale { x, gamma, rms }, &[x, gamma]))
    }

    /// Rotary position embedding on `[batch, seq, heads, head_dim]`.
    ///
    /// The first `fraction · head_dim` channels of each head are rotated
    /// in adjacent pairs `(2j, 2j+1)` by `pos · base^(-2j / d_rot)`; the
    /// remaining channels pass through.
    pub fn rotary(&mut self, x: Var, positions: &[usize], fraction: f64, base: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 || xv.shape()[1] != positions.len() {
            return Err(Error::shape(
                "rotary",
                format!("x {:?} with {} positions", xv.shape(), positions.len()),
            ));
        }
        let (b, s, h, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let d_rot_f = fraction * dh as f64;
        let d_rot = d_rot_f.round() as usize;
        if !(0.0..=1.0).contains(&fraction) || (d_rot_f - d_rot as f64).abs() > 1e-9 || d_rot % 2 != 0 {
            return Err(Error::invalid(format!(
                "rotary: rotated sub-dimension {d_rot_f} of head_dim {dh} must be an even integer"
            )));
        }
        let half = d_rot / 2;
        let mut cos = Vec::with_capacity(s * half);
        let mut sin = Vec::with_capacity(s * half);
        for &p in positions {
            for j in 0..half {
                let theta = p as f64 * base.powf(-2.0 * j as f64 / d_rot as f64);
                cos.push(T::of(theta.cos()));
                sin.push(T::of(theta.sin()));
            }
        }
        let mut y = xv.data().to_vec();
        for bi in 0..b {
            for si in 0..s {
                for hi in 0..h {
                    let base_idx = ((bi * s + si) * h + hi) * dh;
                    for j in 0..half {
                        let (c, sn) = (cos[si * half + j], sin[si * half + j]);
                        let (i0, i1) = (base_idx + 2 * j, base_idx + 2 * j + 1);
                        let (a0, a1) = (y[i0], y[i1]);
                        y[i0] = a0 * c - a1 * sn;
                        y[i1] = a0 * sn + a1 * c;
                    }
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(value, Op::Rotary { x, cos, sin, half }, &[x]))
    }

    /// Softmax over the last axis. With `causal`, entry `(r, c)` of every
    /// trailing square matrix is masked to exactly zero for `c > r`.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let rows_per_mat = if causal {
            if xv.ndim() < 2 || xv.shape()[xv.ndim() - 2] != n {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("causal mask needs trailing square matrices, got {:?}", xv.shape()),
                ));
            }
            n
        } else {
            1
        };
        let mut y = vec![T::zero(); xv.len()];
        for (ri, (row, out)) in xv.rows().zip(y.chunks_mut(n)).enumerate() {
            let valid = if causal { ri % rows_per_mat + 1 } else { n };
            let m = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &e) in out[..valid].iter_mut().zip(&row[..valid]) {
                *o = (e - m).exp();
                s = s + *o;
            }
            for o in &mut out[..valid] {
                *o = *o / s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Mean negative log-likelihood of `targets` under softmax over the
    /// last axis of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.len() / v;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} logit rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {bad} out of range for vocab {v}"
            )));
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for ((row, p), &t) in lv.rows().zip(probs.chunks_mut(v)).zip(targets) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (pi, &e) in p.iter_mut().zip(row) {
                *pi = (e - m).exp();
                s = s + *pi;
            }
            for pi in p.iter_mut() {
                *pi = *pi / s;
            }
            total += (s.ln() + m - row[t]).f64();
        }
        let value = Tensor::scalar(T::of(total / rows as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Row lookup in `table: [rows, d]`; result shape is `prefix ++ [d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "gather_rows",
                format!("table {:?}, {} ids, prefix {prefix:?}", tv.shape(), ids.len()),
            ));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather_rows: id {bad} >= {rows}")));
        }
        let mut y = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            y.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, y)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if start + len > n || len == 0 {
            return Err(Error::shape(
                "slice_last",
                format!("{start}..{} of {n}", start + len),
            ));
        }
        let mut y = Vec::with_capacity(xv.len() / n * len);
        for row in xv.rows() {
            y.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(replace_last(xv.shape(), len), y)?;
        Ok(self.push(value, Op::SliceLast { x, start }, &[x]))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`; used to move heads in front of the
    /// sequence axis and back.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::shape("permute_0213", format!("{:?}", xv.shape())));
        }
        let s = xv.shape();
        let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
        let y = permute_0213_data(xv.data(), a, b, c, d);
        let value = Tensor::new(vec![a, c, b, d], y)?;
        Ok(self.push(value, Op::Permute0213(x), &[x]))
    }

    /// Elementwise `(1 - 2α + 2α²)^(-1/2)`.
    pub fn lerp_factor(&mut self, alpha: Var) -> Var {
        let two = T::of(2.0);
        let value = self
            .value(alpha)
            .map(|a| (T::one() - two * a + two * a * a).sqrt().recip());
        self.push(value, Op::LerpFactor(alpha), &[alpha])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&e| e * e).sum::<T>();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Replays adjoint rules from the scalar `loss` back to every leaf.
    ///
    /// Consumes the tape; leaves that require a gradient but are not
    /// reachable from `loss` get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            backprop(nodes, &mut grads, node, &g);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"),
                    None => Tensor::zeros(n.value.shape().to_vec()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn permute_0213_data<T: Copy>(x: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for ai in 0..a {
        for ci in 0..c {
            for bi in 0..b {
                let src = ((ai * b + bi) * c + ci) * d;
                y.extend_from_slice(&x[src..src + d]);
            }
        }
    }
    y
}

/// Gradient buffer of `v`, allocated on first use; `None` for nodes that
/// do not require a gradient.
fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => unreachable!("leaves are skipped"),
        Op::Linear { x, w } => {
            let (xv, wv) = (val(*x), val(*w));
            let (out, inp) = (wv.shape()[0], wv.shape()[1]);
            let n = xv.len() / inp;
            if let Some(dx) = slot(nodes, grads, *x) {
                gemm(g, Layout::row_major(n, out), wv.data(), Layout::row_major(out, inp), dx, true);
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                gemm(g, Layout::transposed(n, out), xv.data(), Layout::row_major(n, inp), dw, true);
            }
        }
        Op::Matmul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(g, Layout::row_major(m, n), bv.data(), Layout::transposed(k, n), da, true);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm(av.data(), Layout::transposed(m, k), g, Layout::row_major(m, n), db, true);
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (t, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = node.value.shape()[2];
            let (mk, kn, mn) = (m * k, k * n, m * n);
            if let Some(da) = slot(nodes, grads, *a) {
                // da = g · bᵀ   (or g · b when b was used transposed)
                let lb = if *trans_b {
                    Layout::row_major(n, k)
                } else {
                    Layout::transposed(k, n)
                };
                for i in 0..t {
                    gemm(
                        &g[i * mn..(i + 1) * mn],
                        Layout::row_major(m, n),
                        &bv.data()[i * kn..(i + 1) * kn],
                        lb,
                        &mut da[i * mk..(i + 1) * mk],
                        true,
                    );
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for i in 0..t {
                    let (gi, ai) = (&g[i * mn..(i + 1) * mn], &av.data()[i * mk..(i + 1) * mk]);
                    let dbi = &mut db[i * kn..(i + 1) * kn];
                    if *trans_b {
                        // db: [n, k] = gᵀ · a
                        gemm(gi, Layout::transposed(m, n), ai, Layout::row_major(m, k), dbi, true);
                    } else {
                        gemm(ai, Layout::transposed(m, k), gi, Layout::row_major(m, n), dbi, true);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(bv) {
                    *d = *d + g * o;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(av) {
                    *d = *d + g * o;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c);
            }
        }
        Op::MulAlong { x, v, axis } => {
            let (xv, vv) = (val(*x), val(*v));
            let (outer, len, inner) = xv.axis_split(*axis);
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for (a, &s) in vv.data().iter().enumerate() {
                        let base = (o * len + a) * inner;
                        for j in base..base + inner {
                            dx[j] = dx[j] + g[j] * s;
                        }
                    }
                }
            }
            if let Some(dv) = slot(nodes, grads, *v) {
                let xd = xv.data();
                for o in 0..outer {
                    for (a, dva) in dv.iter_mut().enumerate() {
                        let base = (o * len + a) * inner;
                        let mut acc = T::zero();
                        for j in base..base + inner {
                            acc = acc + g[j] * xd[j];
                        }
                        *dva = *dva + acc;
                    }
                }
            }
        }
        Op::Silu(x) => {
            let xd = val(*x).data();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, &g), &e) in d.iter_mut().zip(g).zip(xd) {
                    let s = sigmoid(e);
                    *d = *d + g * s * (T::one() + e * (T::one() - s));
                }
            }
        }
        Op::L2Normalize { x, axis, norms, eps } => {
            let xv = val(*x);
            let (outer, len, inner) = xv.axis_split(*axis);
            let xd = xv.data();
            let eps = *eps;
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let n = norms[o * inner + i];
                        let ne = n + eps;
                        let mut dot = T::zero();
                        for a in 0..len {
                            let j = (o * len + a) * inner + i;
                            dot = dot + xd[j] * g[j];
                        }
                        let coef = if n > T::zero() {
                            dot / (n * ne * ne)
                        } else {
                            T::zero()
                        };
                        for a in 0..len {
                            let j = (o * len + a) * inner + i;
                            dx[j] = dx[j] + g[j] / ne - xd[j] * coef;
                        }
                    }
                }
            }
        }
        Op::RmsScale { x, gamma, rms } => {
            let (xv, gv) = (val(*x), val(*gamma));
            let n = xv.last_dim();
            let nn = T::of(n as f64);
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for ((row, gr), &r) in xv.rows().zip(g.chunks(n)).zip(rms) {
                    for ((d, &e), &gg) in dg.iter_mut().zip(row).zip(gr) {
                        *d = *d + gg * e / r;
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                for (ri, ((row, gr), &r)) in xv.rows().zip(g.chunks(n)).zip(rms).enumerate() {
                    let mut dot = T::zero();
                    for ((&e, &gg), &gm) in row.iter().zip(gr).zip(gv.data()) {
                        dot = dot + gg * gm * e / r;
                    }
                    let dot = dot / nn;
                    let dxr = &mut dx[ri * n..(ri + 1) * n];
                    for (((d, &e), &gg), &gm) in dxr.iter_mut().zip(row).zip(gr).zip(gv.data()) {
                        *d = *d + (gg * gm - e / r * dot) / r;
                    }
                }
            }
        }
        Op::Rotary { x, cos, sin, half } => {
            let s = val(*x).shape();
            let (b, sq, h, dh) = (s[0], s[1], s[2], s[3]);
            if let Some(dx) = slot(nodes, grads, *x) {
                for bi in 0..b {
                    for si in 0..sq {
                        for hi in 0..h {
                            let base = ((bi * sq + si) * h + hi) * dh;
                            for j in 0..dh {
                                let idx = base + j;
                                if j < 2 * half {
                                    let p = j / 2;
                                    let (c, sn) = (cos[si * half + p], sin[si * half + p]);
                                    let (g0, g1) = (g[base + 2 * p], g[base + 2 * p + 1]);
                                    let v = if j % 2 == 0 { g0 * c + g1 * sn } else { g1 * c - g0 * sn };
                                    dx[idx] = dx[idx] + v;
                                } else {
                                    dx[idx] = dx[idx] + g[idx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let n = node.value.last_dim();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = *d + yy * (gg - dot);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let v = val(*logits).last_dim();
            let scale = g[0] / T::of(targets.len() as f64);
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut dl[r * v..(r + 1) * v];
                    for (d, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *d = *d + p * scale;
                    }
                    row[t] = row[t] - scale;
                }
            }
        }
        Op::Gather { table, ids } => {
            let d = val(*table).shape()[1];
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for (t, &gg) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *t = *t + gg;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
        }
        Op::SliceLast { x, start } => {
            let n = val(*x).last_dim();
            let len = node.value.last_dim();
            if let Some(d) = slot(nodes, grads, *x) {
                for (dr, gr) in d.chunks_mut(n).zip(g.chunks(len)) {
                    for (dd, &gg) in dr[*start..*start + len].iter_mut().zip(gr) {
                        *dd = *dd + gg;
                    }
                }
            }
        }
        Op::Permute0213(x) => {
            // Output is [a, c, b, d]; permuting it again restores [a, b, c, d].
            let s = node.value.shape();
            let back = permute_0213_data(g, s[0], s[1], s[2], s[3]);
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(&back).for_each(|(d, &g)| *d = *d + g);
            }
        }
        Op::LerpFactor(a) => {
            let ad = val(*a).data();
            let two = T::of(2.0);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &gg), &al) in d.iter_mut().zip(g).zip(ad) {
                    let p = T::one() - two * al + two * al * al;
                    *d = *d + gg * (T::one() - two * al) / (p * p.sqrt());
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::SumSquares(x) => {
            let xd = val(*x).data();
            if let Some(d) = slot(nodes, grads, *x) {
                let two = T::of(2.0);
                d.iter_mut().zip(xd).for_each(|(d, &e)| *d = *d + two * e * g[0]);
            }
        }
        Op::Mean(x) => {
            let n = T::of(val(*x).len() as f64);
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d = *d + g[0] / n);
            }
        }
    }
}

/// Gradients of every differentiable leaf, indexed by the leaf's [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
