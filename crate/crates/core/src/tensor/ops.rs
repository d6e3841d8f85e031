use super::gemm::gemm;
use super::graph::Op;
use super::{dot, Graph, Result, Scalar, Tensor, TensorError, Var};

fn dims2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Invalid(format!(
            "{op}: expected a matrix, got shape {other:?}"
        ))),
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl<T: Scalar> Graph<T> {
    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push_op(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b: false,
            },
        ))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        Ok(self.push_op(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b: true,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x * c).collect(),
        );
        self.push_op(out, Op::Scale(a.0, c))
    }

    /// Adds a length-`d` bias to every row of `x[t×d]`. The only broadcast the
    /// engine supports.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = dims2(self.value(x), "add_row_bias")?;
        if self.value(bias).numel() != d {
            return Err(self.mismatch("add_row_bias", x, bias));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push_op(
            out,
            Op::AddRowBias {
                x: x.0,
                bias: bias.0,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push_op(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push_op(Tensor::scalar(s), Op::Mean(a.0))
    }

    /// `z · sigmoid(z)`, elementwise.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&z| z * sigmoid(z)).collect(),
        );
        self.push_op(out, Op::Silu(a.0))
    }

    /// Softmax over the last axis, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = v.clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        Ok(self.push_op(out, Op::SoftmaxRows(a.0)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[t×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, vocab) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t, vocab],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                extent: vocab,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &y) in probs.chunks_mut(vocab).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[y]).as_f64();
            softmax_in_place(row);
        }
        let loss = T::of(total / t as f64);
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Row-wise RMS normalization with a learned per-feature gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (_, d) = dims2(self.value(x), "rms_norm")?;
        if self.value(gain).numel() != d {
            return Err(self.mismatch("rms_norm", x, gain));
        }
        let gv = self.value(gain).data();
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(d) {
            let ms = dot(row, row) / T::of(d as f64);
            let r = T::one() / (ms + T::of(eps)).sqrt();
            for (o, &g) in row.iter_mut().zip(gv) {
                *o = *o * r * g;
            }
            inv_rms.push(r);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push_op(
            out,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv_rms,
            },
        ))
    }

    /// Selects rows `idx` of `x[t×d]`. Repeated indices are allowed; backward
    /// scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (t, d) = dims2(self.value(x), "gather_rows")?;
        if idx.is_empty() {
            return Err(TensorError::Invalid("gather_rows: empty index list".into()));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= t {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: t,
                });
            }
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        Ok(self.push_op(
            Tensor::from_parts(vec![idx.len(), d], out),
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Embedding lookup: rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Single-head causal self-attention over `rows / seq` independent
    /// sequences stacked row-wise. `q`, `k`, `v` are `[rows×d]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq: usize) -> Result<Var> {
        let (rows, d) = dims2(self.value(q), "causal_attention")?;
        for other in [k, v] {
            if self.shape(other) != self.shape(q) {
                return Err(self.mismatch("causal_attention", q, other));
            }
        }
        if seq == 0 || rows % seq != 0 {
            return Err(TensorError::Invalid(format!(
                "causal_attention: {rows} rows not divisible by sequence length {seq}"
            )));
        }
        let scale = T::of(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); rows * seq];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..rows / seq {
            let span = b * seq * d..(b + 1) * seq * d;
            let p = &mut probs[b * seq * seq..(b + 1) * seq * seq];
            gemm(
                seq,
                d,
                seq,
                &qd[span.clone()],
                false,
                &kd[span.clone()],
                true,
                p,
                false,
            );
            for (i, row) in p.chunks_mut(seq).enumerate() {
                for s in row[..=i].iter_mut() {
                    *s *= scale;
                }
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|s| *s = T::zero());
            }
            gemm(
                seq,
                seq,
                d,
                p,
                false,
                &vd[span.clone()],
                false,
                &mut out[span],
                false,
            );
        }
        Ok(self.push_op(
            Tensor::from_parts(vec![rows, d], out),
            Op::CausalAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                seq,
                probs,
            },
        ))
    }

    /// SwiGLU feed-forward: `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`.
    pub fn swiglu(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let (_, d) = dims2(self.value(x), "swiglu")?;
        let (dg, hg) = dims2(self.value(w_gate), "swiglu")?;
        if dg != d || self.shape(w_up) != [d, hg] || self.shape(w_down) != [hg, d] {
            return Err(TensorError::Invalid(format!(
                "swiglu: x {:?}, gate {:?}, up {:?}, down {:?} do not conform",
                self.shape(x),
                self.shape(w_gate),
                self.shape(w_up),
                self.shape(w_down)
            )));
        }
        let gate = self.matmul(x, w_gate)?;
        let act = self.silu(gate);
        let up = self.matmul(x, w_up)?;
        let h = self.mul(act, up)?;
        self.matmul(h, w_down)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        let (x, y) = (self.value(a), self.value(b));
        Ok(Tensor::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect(),
        ))
    }

    /// Gradients flowing from node `id` (with output gradient `g`) to its parents.
    pub(super) fn node_backward(&self, id: usize, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let like = |i: usize, data: Vec<T>| Tensor::from_parts(val(i).shape().to_vec(), data);
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = node.value.cols();
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); k * n];
                if trans_b {
                    // y = a·bᵀ, b is n×k
                    gemm(m, n, k, gd, false, val(b).data(), false, &mut da, false);
                    gemm(n, m, k, gd, true, val(a).data(), false, &mut db, false);
                } else {
                    gemm(m, n, k, gd, false, val(b).data(), true, &mut da, false);
                    gemm(k, m, n, val(a).data(), true, gd, false, &mut db, false);
                }
                vec![(a, like(a, da)), (b, like(b, db))]
            }
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![
                (a, g.clone()),
                (b, like(b, gd.iter().map(|&x| -x).collect())),
            ],
            &Op::Mul(a, b) => {
                let da = gd.iter().zip(val(b).data()).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(val(a).data()).map(|(&x, &y)| x * y).collect();
                vec![(a, like(a, da)), (b, like(b, db))]
            }
            &Op::Scale(a, c) => vec![(a, like(a, gd.iter().map(|&x| x * c).collect()))],
            &Op::AddRowBias { x, bias } => {
                let d = val(bias).numel();
                let mut db = vec![T::zero(); d];
                for row in gd.chunks(d) {
                    for (acc, &r) in db.iter_mut().zip(row) {
                        *acc += r;
                    }
                }
                vec![(x, g.clone()), (bias, like(bias, db))]
            }
            &Op::Sum(a) => vec![(a, like(a, vec![gd[0]; val(a).numel()]))],
            &Op::Mean(a) => {
                let n = val(a).numel();
                vec![(a, like(a, vec![gd[0] / T::of(n as f64); n]))]
            }
            &Op::Silu(a) => {
                let dx = val(a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&z, &gz)| {
                        let s = sigmoid(z);
                        gz * s * (T::one() + z * (T::one() - s))
                    })
                    .collect();
                vec![(a, like(a, dx))]
            }
            &Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(gd.chunks(cols))
                {
                    let s = dot(yr, gr);
                    for ((o, &yi), &gi) in dxr.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - s);
                    }
                }
                vec![(a, like(a, dx))]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = val(*logits).cols();
                let scale = gd[0] / T::of(targets.len() as f64);
                let mut dz = probs.clone();
                for (row, &y) in dz.chunks_mut(vocab).zip(targets) {
                    row[y] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, like(*logits, dz))]
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let d = val(*gain).numel();
                let gv = val(*gain).data();
                let xv = val(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgain = vec![T::zero(); d];
                let inv_d = T::of(1.0 / d as f64);
                for (((dxr, xr), gr), &r) in dx
                    .chunks_mut(d)
                    .zip(xv.chunks(d))
                    .zip(gd.chunks(d))
                    .zip(inv_rms)
                {
                    let mut proj = T::zero();
                    for j in 0..d {
                        proj += gr[j] * gv[j] * xr[j];
                        dgain[j] += gr[j] * xr[j] * r;
                    }
                    let c = r * r * r * proj * inv_d;
                    for j in 0..d {
                        dxr[j] = r * gr[j] * gv[j] - xr[j] * c;
                    }
                }
                vec![(*x, like(*x, dx)), (*gain, like(*gain, dgain))]
            }
            Op::GatherRows { x, idx } => {
                let d = val(*x).cols();
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &gv) in dx[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&gd[r * d..(r + 1) * d])
                    {
                        *o += gv;
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            &Op::CausalAttention {
                q,
                k,
                v,
                seq,
                ref probs,
            } => {
                let (rows, d) = (val(q).rows(), val(q).cols());
                let scale = T::of(1.0 / (d as f64).sqrt());
                let (qd, kd, vd) = (val(q).data(), val(k).data(), val(v).data());
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                let mut dv = vec![T::zero(); rows * d];
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..rows / seq {
                    let span = b * seq * d..(b + 1) * seq * d;
                    let p = &probs[b * seq * seq..(b + 1) * seq * seq];
                    let go = &gd[span.clone()];
                    gemm(
                        seq,
                        seq,
                        d,
                        p,
                        true,
                        go,
                        false,
                        &mut dv[span.clone()],
                        false,
                    );
                    gemm(
                        seq,
                        d,
                        seq,
                        go,
                        false,
                        &vd[span.clone()],
                        true,
                        &mut dp,
                        false,
                    );
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then fold in the score scale.
                    for (i, (dpr, pr)) in dp.chunks_mut(seq).zip(p.chunks(seq)).enumerate() {
                        let s = dot(&dpr[..=i], &pr[..=i]);
                        for j in 0..=i {
                            dpr[j] = pr[j] * (dpr[j] - s) * scale;
                        }
                        dpr[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                    }
                    gemm(
                        seq,
                        seq,
                        d,
                        &dp,
                        false,
                        &kd[span.clone()],
                        false,
                        &mut dq[span.clone()],
                        false,
                    );
                    gemm(
                        seq,
                        seq,
                        d,
                        &dp,
                        true,
                        &qd[span.clone()],
                        false,
                        &mut dk[span],
                        false,
                    );
                }
                vec![(q, like(q, dq)), (k, like(k, dk)), (v, like(v, dv))]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                let grads = op.backward(&ins, &node.value, g);
                assert_eq!(
                    grads.len(),
                    inputs.len(),
                    "custom op {} returned {} gradients for {} inputs",
                    op.name(),
                    grads.len(),
                    inputs.len()
                );
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(&i, gi)| {
                        gi.map(|t| {
                            assert_eq!(
                                t.shape(),
                                val(i).shape(),
                                "custom op {} gradient shape",
                                op.name()
                            );
                            (i, t)
                        })
                    })
                    .collect()
            }
        }
    }
}
