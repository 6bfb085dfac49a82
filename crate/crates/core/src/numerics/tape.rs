//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every op of one forward computation. Parameters enter as
//! borrowed leaves; [`Tape::backward`] consumes the tape and returns one gradient
//! per trainable parameter reachable from the loss. Nodes that cannot reach a
//! trainable leaf are never differentiated.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};

use super::param::{Gradients, ParamId, ParamStore};
use super::rng::RngStream;
use super::scalar::Scalar;
use super::tensor::{matmul_dims, moments, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    AddConst(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Heads {
        x: Var,
        split: bool,
        batch: usize,
        len: usize,
        heads: usize,
        dh: usize,
    },
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
        len: usize,
        dh: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SmoothedCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
        eps: T,
        count: usize,
    },
    Sum(Var),
    Reshape(Var),
}

pub struct Tape<'a, T: Scalar> {
    id: u32,
    values: Vec<Cow<'a, Tensor<T>>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    param_of: Vec<Option<ParamId>>,
    n_params: usize,
    grad_enabled: bool,
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            param_of: Vec::new(),
            n_params: 0,
            grad_enabled: true,
        }
    }

    /// Tape that records values only; nothing on it is differentiable.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        debug_assert_eq!(v.tape, self.id, "variable from another tape");
        &self.values[v.idx]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        let idx = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad && self.grad_enabled);
        self.param_of.push(None);
        Var { tape: self.id, idx }
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.idx]
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Borrowed parameter leaf; differentiable iff the parameter is trainable.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.n_params = self.n_params.max(store.len());
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf, p.trainable);
        self.param_of[v.idx] = Some(id);
        v
    }

    /// Product of 2-D or same-batch 3-D operands. With `trans_b`, `b` is stored
    /// transposed (`[.., n, k]`).
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut sb = self.shape(b).to_vec();
        if trans_b {
            let r = sb.len();
            if r < 2 {
                return Err(Error::dims("matmul", &sa, &sb));
            }
            sb.swap(r - 1, r - 2);
        }
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for g in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::ONE,
                    &av[g * m * k..],
                    k as isize,
                    1,
                    &bv[g * k * n..],
                    rsb,
                    csb,
                    T::ZERO,
                    &mut out[g * m * n..],
                    n as isize,
                    1,
                );
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Cow::Owned(Tensor::new(&shape, out)?),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    /// `x·Wᵀ + b` for `x: [rows, din]`, `W: [dout, din]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let din = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[1] != din {
            return Err(Error::dims("linear", &sx, &sw));
        }
        let rows = self.value(x).numel() / din.max(1);
        let dout = sw[0];
        if let Some(b) = b {
            if self.value(b).numel() != dout {
                return Err(Error::dims("linear bias", &sw, self.shape(b)));
            }
        }
        let mut out = vec![T::ZERO; rows * dout];
        T::gemm(
            rows,
            din,
            dout,
            T::ONE,
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            T::ZERO,
            &mut out,
            dout as isize,
            1,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = dout;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Cow::Owned(Tensor::new(&shape, out)?),
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map_binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    fn map_unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        Tensor::new(av.shape(), av.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.map_binary(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.map_binary(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.map_unary(a, |x| x * s);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), ng)
    }

    /// Adds a vector over the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(Error::dims("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Cow::Owned(out), Op::AddBias(x, bias), ng))
    }

    /// Adds a constant (non-differentiable) tensor of identical shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dims("add_const", self.shape(x), c.shape()));
        }
        let mut out = self.value(x).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(c.data()) {
            *o += v;
        }
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), Op::AddConst(x), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map_unary(x, |v| if v > T::ZERO { v } else { T::ZERO });
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::Relu(x), ng)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_lastdim();
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dims("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![T::ZERO; xv.numel()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; xv.numel()];
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        for (r, row) in xv.data().chunks(d).enumerate() {
            let (mean, rs) = moments(row, eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let (xhat, rstd) = if ng { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            Cow::Owned(Tensor::new(&shape, out)?),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row gather from a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = match tv.shape() {
            [v, d] => (*v, *d),
            s => return Err(Error::dims("embedding", s, &[ids.len()])),
        };
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { id, vocab });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Cow::Owned(Tensor::new(&[ids.len(), d], out)?),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// `[batch*len, heads*dh]` → `[batch*heads, len, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        if xv.numel() != batch * len * width || width % heads != 0 {
            return Err(Error::dims("split_heads", xv.shape(), &[batch, len, heads]));
        }
        let dh = width / heads;
        let out = permute_heads(xv.data(), batch, len, heads, dh, true);
        let ng = self.ng(x);
        Ok(self.push(
            Cow::Owned(Tensor::new(&[batch * heads, len, dh], out)?),
            Op::Heads {
                x,
                split: true,
                batch,
                len,
                heads,
                dh,
            },
            ng,
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let (len, dh) = match xv.shape() {
            [g, l, d] if *g == batch * heads => (*l, *d),
            s => return Err(Error::dims("merge_heads", s, &[batch, heads])),
        };
        let out = permute_heads(xv.data(), batch, len, heads, dh, false);
        let ng = self.ng(x);
        Ok(self.push(
            Cow::Owned(Tensor::new(&[batch * len, heads * dh], out)?),
            Op::Heads {
                x,
                split: false,
                batch,
                len,
                heads,
                dh,
            },
            ng,
        ))
    }

    /// Rotates adjacent pairs of `x: [groups, len, dh]` by per-position angles.
    /// `cos`/`sin` are `[len, dh/2]`.
    pub fn rope(&mut self, x: Var, cos: &[T], sin: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let (len, dh) = match xv.shape() {
            [_, l, d] if d % 2 == 0 && cos.len() == l * d / 2 && sin.len() == cos.len() => {
                (*l, *d)
            }
            s => return Err(Error::dims("rope", s, &[cos.len()])),
        };
        let mut out = xv.data().to_vec();
        rotate_pairs(&mut out, cos, sin, len, dh, false);
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(
            Cow::Owned(Tensor::new(&shape, out)?),
            Op::Rope {
                x,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
                len,
                dh,
            },
            ng,
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < p { T::ZERO } else { keep })
            .collect();
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape(),
            xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )
        .expect("same shape");
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::Dropout { x, mask }, ng)
    }

    /// Label-smoothed cross-entropy over rows of `logits: [n, vocab]`, mean over
    /// non-padding rows (`None` targets).
    pub fn smoothed_ce(&mut self, logits: Var, targets: &[Option<usize>], eps: f64) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        let rows = lv.numel() / vocab.max(1);
        if rows != targets.len() {
            return Err(Error::dims("smoothed_ce", lv.shape(), &[targets.len()]));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Usage(format!("label smoothing {eps} not in [0, 1)")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Usage("every target is padding; loss is empty".into()));
        }
        let e = T::from_f64(eps);
        let vt = T::from_f64(vocab as f64);
        let mut probs = lv.data().to_vec();
        let mut total = T::ZERO;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::Index { id: t, vocab });
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(row[0], T::max);
            let mut sum = T::ZERO;
            let mut mean_z = T::ZERO;
            for &z in row.iter() {
                sum += (z - max).exp();
                mean_z += z;
            }
            mean_z = mean_z / vt;
            let lse = max + sum.ln();
            total += (T::ONE - e) * (lse - row[t]) + e * (lse - mean_z);
            let inv = T::ONE / sum;
            for z in row.iter_mut() {
                *z = (*z - max).exp() * inv;
            }
        }
        let loss = total / T::from_f64(count as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::SmoothedCe {
                logits,
                probs: if ng { probs } else { Vec::new() },
                targets: targets.to_vec(),
                eps: e,
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let ng = self.ng(x);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(t), Op::Reshape(x), ng))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id || loss.idx >= self.values.len() {
            return Err(Error::Usage("loss was not recorded on this tape".into()));
        }
        if !self.grad_enabled {
            return Err(Error::Usage("backward on an inference tape".into()));
        }
        if self.values[loss.idx].numel() != 1 {
            return Err(Error::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.values[loss.idx].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.idx] = Some(vec![T::ONE]);
        let mut out: Vec<Option<Tensor<T>>> = vec![None; self.n_params];

        for i in (0..=loss.idx).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    if let Some(pid) = self.param_of[i] {
                        let t = Tensor::new(self.values[i].shape(), gy)?;
                        match &mut out[pid.0] {
                            Some(acc) => {
                                for (a, g) in acc.data_mut().iter_mut().zip(t.data()) {
                                    *a += *g;
                                }
                            }
                            slot => *slot = Some(t),
                        }
                    }
                }
                op => self.backward_op(i, op, &gy, &mut grads),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        grads[v.idx].get_or_insert_with(|| vec![T::ZERO; self.values[v.idx].numel()])
    }

    fn backward_op(&self, out_idx: usize, op: &Op<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if self.ng(a) {
                    let bv = self.values[b.idx].data();
                    let ga = self.grad_buf(grads, a);
                    // dA[m,k] += dY[m,n] · Bᵀ
                    let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for g in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::ONE,
                            &gy[g * m * n..],
                            n as isize,
                            1,
                            &bv[g * k * n..],
                            rsb,
                            csb,
                            T::ONE,
                            &mut ga[g * m * k..],
                            k as isize,
                            1,
                        );
                    }
                }
                if self.ng(b) {
                    let av = self.values[a.idx].data();
                    let gb = self.grad_buf(grads, b);
                    for g in 0..batch {
                        if trans_b {
                            // dB[n,k] += dYᵀ[n,m] · A[m,k]
                            T::gemm(
                                n,
                                m,
                                k,
                                T::ONE,
                                &gy[g * m * n..],
                                1,
                                n as isize,
                                &av[g * m * k..],
                                k as isize,
                                1,
                                T::ONE,
                                &mut gb[g * k * n..],
                                k as isize,
                                1,
                            );
                        } else {
                            // dB[k,n] += Aᵀ[k,m] · dY[m,n]
                            T::gemm(
                                k,
                                m,
                                n,
                                T::ONE,
                                &av[g * m * k..],
                                1,
                                k as isize,
                                &gy[g * m * n..],
                                n as isize,
                                1,
                                T::ONE,
                                &mut gb[g * k * n..],
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                if self.ng(x) {
                    let wv = self.values[w.idx].data();
                    let gx = self.grad_buf(grads, x);
                    T::gemm(
                        rows,
                        dout,
                        din,
                        T::ONE,
                        gy,
                        dout as isize,
                        1,
                        wv,
                        din as isize,
                        1,
                        T::ONE,
                        gx,
                        din as isize,
                        1,
                    );
                }
                if self.ng(w) {
                    let xv = self.values[x.idx].data();
                    let gw = self.grad_buf(grads, w);
                    T::gemm(
                        dout,
                        rows,
                        din,
                        T::ONE,
                        gy,
                        1,
                        dout as isize,
                        xv,
                        din as isize,
                        1,
                        T::ONE,
                        gw,
                        din as isize,
                        1,
                    );
                }
                if let Some(b) = b {
                    if self.ng(b) {
                        let gb = self.grad_buf(grads, b);
                        for row in gy.chunks(dout) {
                            for (acc, &g) in gb.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(v) {
                        let gv = self.grad_buf(grads, v);
                        for (acc, &g) in gv.iter_mut().zip(gy) {
                            *acc += g;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.ng(v) {
                        let ov = self.values[other.idx].data();
                        let gv = self.grad_buf(grads, v);
                        for ((acc, &g), &o) in gv.iter_mut().zip(gy).zip(ov) {
                            *acc += g * o;
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                let gv = self.grad_buf(grads, a);
                for (acc, &g) in gv.iter_mut().zip(gy) {
                    *acc += g * s;
                }
            }
            &Op::AddBias(x, bias) => {
                if self.ng(x) {
                    let gx = self.grad_buf(grads, x);
                    for (acc, &g) in gx.iter_mut().zip(gy) {
                        *acc += g;
                    }
                }
                if self.ng(bias) {
                    let d = self.values[bias.idx].numel();
                    let gb = self.grad_buf(grads, bias);
                    for row in gy.chunks(d) {
                        for (acc, &g) in gb.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                }
            }
            &Op::AddConst(x) | &Op::Reshape(x) => {
                let gx = self.grad_buf(grads, x);
                for (acc, &g) in gx.iter_mut().zip(gy) {
                    *acc += g;
                }
            }
            &Op::Relu(x) => {
                let xv = self.values[x.idx].data();
                let gx = self.grad_buf(grads, x);
                for ((acc, &g), &v) in gx.iter_mut().zip(gy).zip(xv) {
                    if v > T::ZERO {
                        *acc += g;
                    }
                }
            }
            &Op::Softmax(x) => {
                let yv = self.values[out_idx].data();
                let d = self.values[out_idx].last_dim();
                let gx = self.grad_buf(grads, x);
                for ((gxr, gyr), yr) in gx.chunks_mut(d).zip(gy.chunks(d)).zip(yv.chunks(d)) {
                    let mut dot = T::ZERO;
                    for j in 0..d {
                        dot += gyr[j] * yr[j];
                    }
                    for j in 0..d {
                        gxr[j] += yr[j] * (gyr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.values[gamma.idx].numel();
                let gv = self.values[gamma.idx].data().to_vec();
                if self.ng(*gamma) {
                    let gg = self.grad_buf(grads, *gamma);
                    for (gr, hr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.ng(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for gr in gy.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
                if self.ng(*x) {
                    let dt = T::from_f64(d as f64);
                    let gx = self.grad_buf(grads, *x);
                    let mut dxhat = vec![T::ZERO; d];
                    for (r, (gr, hr)) in gy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_d = T::ZERO;
                        let mut mean_dh = T::ZERO;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d = mean_d / dt;
                        mean_dh = mean_dh / dt;
                        let rs = rstd[r];
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += rs * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.values[table.idx].last_dim();
                let gt = self.grad_buf(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gy[r * d + j];
                    }
                }
            }
            &Op::Heads {
                x,
                split,
                batch,
                len,
                heads,
                dh,
            } => {
                let back = permute_heads(gy, batch, len, heads, dh, !split);
                let gx = self.grad_buf(grads, x);
                for (acc, g) in gx.iter_mut().zip(back) {
                    *acc += g;
                }
            }
            Op::Rope {
                x,
                cos,
                sin,
                len,
                dh,
            } => {
                let mut back = gy.to_vec();
                rotate_pairs(&mut back, cos, sin, *len, *dh, true);
                let gx = self.grad_buf(grads, *x);
                for (acc, g) in gx.iter_mut().zip(back) {
                    *acc += g;
                }
            }
            Op::Dropout { x, mask } => {
                let gx = self.grad_buf(grads, *x);
                for ((acc, &g), &m) in gx.iter_mut().zip(gy).zip(mask) {
                    *acc += g * m;
                }
            }
            Op::SmoothedCe {
                logits,
                probs,
                targets,
                eps,
                count,
            } => {
                let vocab = self.values[logits.idx].last_dim();
                let scale = gy[0] / T::from_f64(*count as f64);
                let uniform = *eps / T::from_f64(vocab as f64);
                let on = T::ONE - *eps;
                let gl = self.grad_buf(grads, *logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let pr = &probs[r * vocab..(r + 1) * vocab];
                    let dst = &mut gl[r * vocab..(r + 1) * vocab];
                    for v in 0..vocab {
                        let mut g = pr[v] - uniform;
                        if v == t {
                            g -= on;
                        }
                        dst[v] += g * scale;
                    }
                }
            }
            &Op::Sum(x) => {
                let g = gy[0];
                let gx = self.grad_buf(grads, x);
                for acc in gx.iter_mut() {
                    *acc += g;
                }
            }
        }
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn permute_heads<T: Scalar>(
    src: &[T],
    batch: usize,
    len: usize,
    heads: usize,
    dh: usize,
    split: bool,
) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for b in 0..batch {
        for l in 0..len {
            for h in 0..heads {
                let merged = ((b * len + l) * heads + h) * dh;
                let split_at = ((b * heads + h) * len + l) * dh;
                let (from, to) = if split { (merged, split_at) } else { (split_at, merged) };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

fn rotate_pairs<T: Scalar>(x: &mut [T], cos: &[T], sin: &[T], len: usize, dh: usize, inverse: bool) {
    let half = dh / 2;
    for (row_idx, row) in x.chunks_mut(dh).enumerate() {
        let pos = row_idx % len;
        for i in 0..half {
            let c = cos[pos * half + i];
            let s = if inverse { -sin[pos * half + i] } else { sin[pos * half + i] };
            let (x1, x2) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x1 * c - x2 * s;
            row[2 * i + 1] = x1 * s + x2 * c;
        }
    }
}
