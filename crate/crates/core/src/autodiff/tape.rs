//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every op appends one node holding its forward value. `backward` walks
//! the nodes from the loss back to the first entry; tape order is a
//! topological order, so each op is visited exactly once and a variable's
//! gradient is the sum over all of its uses.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::autodiff::tensor::{matmul_raw, Tensor};
use crate::error::TensorError;
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    AddRow {
        x: usize,
        bias: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Relu {
        x: usize,
    },
    ConcatCols {
        a: usize,
        b: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    GatherRows {
        x: usize,
        index: Arc<[usize]>,
    },
    ScatterAddRows {
        x: usize,
        index: Arc<[usize]>,
    },
    IndexAddRows {
        base: usize,
        x: usize,
        index: Arc<[usize]>,
    },
    RowDot {
        a: usize,
        b: usize,
    },
    RowScale {
        x: usize,
        s: usize,
    },
    SegmentSoftmax {
        x: usize,
        segment: Arc<[usize]>,
        n: usize,
    },
    CrossEntropy {
        logits: usize,
        gold: usize,
        probs: Vec<T>,
    },
    Sum {
        x: usize,
    },
    MeanRows {
        x: usize,
    },
    MaxRows {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    /// Per-column normalization with statistics that depend on `x` (batch stats).
    ColNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Per-column normalization with constant statistics (running stats).
    ColAffine {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Per-row normalization.
    RowNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by [`Tape::batch_norm`], for the caller to fold
/// into running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Operation tape. One tape per forward pass; tapes share no state.
#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but materializes zeros of the variable's shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn rank2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::Rank {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn rank1<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<usize, TensorError> {
    if t.rank() != 1 {
        return Err(TensorError::Rank {
            op,
            expected: 1,
            shape: t.shape().to_vec(),
        });
    }
    Ok(t.shape()[0])
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Differentiable leaf (parameter or input whose gradient is wanted).
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (n, k) = rank2("matmul", ta)?;
        let (k2, m) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), n, k, m);
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::MatMul { a: ia, b: ib },
            ng,
        ))
    }

    /// Adds a `[m]` bias to every row of `[n,m]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let (n, m) = rank2("add_row", tx)?;
        if rank1("add_row", tb)? != m {
            return Err(mismatch("add_row", tx, tb));
        }
        let mut out = tx.data().to_vec();
        for r in 0..n {
            for (o, &b) in out[r * m..(r + 1) * m].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let ng = self.needs(&[ix, ib]);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::AddRow { x: ix, bias: ib },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a: ia, b: ib }, ng))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a: ia, b: ib }, ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(|v| v * c);
        let ng = self.needs(&[ix]);
        Ok(self.push(out, Op::Scale { x: ix, c }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let out = self.nodes[ix]
            .value
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(&[ix]);
        Ok(self.push(out, Op::Relu { x: ix }, ng))
    }

    /// `[n,p] ‖ [n,q] -> [n,p+q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (n, p) = rank2("concat_cols", ta)?;
        let (n2, q) = rank2("concat_cols", tb)?;
        if n != n2 {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(
            Tensor::from_parts(vec![n, p + q], out),
            Op::ConcatCols { a: ia, b: ib },
            ng,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_rows" });
        }
        let ids = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>, _>>()?;
        let first = &self.nodes[ids[0]].value;
        let (_, m) = rank2("concat_rows", first)?;
        let mut rows = 0;
        for &i in &ids {
            let t = &self.nodes[i].value;
            let (n, mi) = rank2("concat_rows", t)?;
            if mi != m {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += n;
        }
        let mut out = Vec::with_capacity(rows * m);
        for &i in &ids {
            out.extend_from_slice(self.nodes[i].value.data());
        }
        let ng = self.needs(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![rows, m], out),
            Op::ConcatRows { parts: ids },
            ng,
        ))
    }

    /// Selects rows: `out[r] = x[index[r]]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let (n, d) = rank2("gather_rows", tx)?;
        if index.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &r in index.iter() {
            if r >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    len: n,
                });
            }
            out.extend_from_slice(tx.row(r));
        }
        let ng = self.needs(&[ix]);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), d], out),
            Op::GatherRows { x: ix, index },
            ng,
        ))
    }

    /// Sums rows into `n` buckets: `out[index[r]] += x[r]`.
    pub fn scatter_add_rows(
        &mut self,
        x: Var,
        index: Arc<[usize]>,
        n: usize,
    ) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let (m, d) = rank2("scatter_add_rows", tx)?;
        if index.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                left: tx.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        if n == 0 {
            return Err(TensorError::Empty {
                op: "scatter_add_rows",
            });
        }
        let mut out = vec![T::zero(); n * d];
        for (r, &dst) in index.iter().enumerate() {
            if dst >= n {
                return Err(TensorError::Index {
                    op: "scatter_add_rows",
                    index: dst,
                    len: n,
                });
            }
            for (o, &v) in out[dst * d..(dst + 1) * d].iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        let ng = self.needs(&[ix]);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::ScatterAddRows { x: ix, index },
            ng,
        ))
    }

    /// Copy of `base` with `x[r]` added onto row `index[r]`; untouched rows
    /// are bit-identical to `base`.
    pub fn index_add_rows(
        &mut self,
        base: Var,
        x: Var,
        index: Arc<[usize]>,
    ) -> Result<Var, TensorError> {
        let (ib, ix) = (self.check(base)?, self.check(x)?);
        let (tb, tx) = (&self.nodes[ib].value, &self.nodes[ix].value);
        let (n, d) = rank2("index_add_rows", tb)?;
        let (m, d2) = rank2("index_add_rows", tx)?;
        if d != d2 || index.len() != m {
            return Err(mismatch("index_add_rows", tb, tx));
        }
        let mut out = tb.data().to_vec();
        for (r, &dst) in index.iter().enumerate() {
            if dst >= n {
                return Err(TensorError::Index {
                    op: "index_add_rows",
                    index: dst,
                    len: n,
                });
            }
            for (o, &v) in out[dst * d..(dst + 1) * d].iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        let ng = self.needs(&[ib, ix]);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::IndexAddRows {
                base: ib,
                x: ix,
                index,
            },
            ng,
        ))
    }

    /// Row-wise inner products `[m,d]·[m,d] -> [m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, _) = rank2("row_dot", ta)?;
        if ta.shape() != tb.shape() {
            return Err(mismatch("row_dot", ta, tb));
        }
        let out = (0..m)
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(&x, &y)| x * y).sum())
            .collect();
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(
            Tensor::from_parts(vec![m], out),
            Op::RowDot { a: ia, b: ib },
            ng,
        ))
    }

    /// Scales row `r` of `[m,d]` by `s[r]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        let (tx, ts) = (&self.nodes[ix].value, &self.nodes[is].value);
        let (m, d) = rank2("row_scale", tx)?;
        if rank1("row_scale", ts)? != m {
            return Err(mismatch("row_scale", tx, ts));
        }
        let mut out = tx.data().to_vec();
        for r in 0..m {
            let c = ts.data()[r];
            for o in &mut out[r * d..(r + 1) * d] {
                *o *= c;
            }
        }
        let ng = self.needs(&[ix, is]);
        Ok(self.push(
            Tensor::from_parts(vec![m, d], out),
            Op::RowScale { x: ix, s: is },
            ng,
        ))
    }

    /// Softmax of a `[m]` vector within groups `segment[r] ∈ [0, n)`,
    /// max-shifted per group.
    pub fn segment_softmax(
        &mut self,
        x: Var,
        segment: Arc<[usize]>,
        n: usize,
    ) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let m = rank1("segment_softmax", tx)?;
        if segment.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                left: vec![m],
                right: vec![segment.len()],
            });
        }
        let mut max = vec![T::neg_infinity(); n];
        for (r, &s) in segment.iter().enumerate() {
            if s >= n {
                return Err(TensorError::Index {
                    op: "segment_softmax",
                    index: s,
                    len: n,
                });
            }
            max[s] = max[s].max(tx.data()[r]);
        }
        let mut out: Vec<T> = tx
            .data()
            .iter()
            .zip(segment.iter())
            .map(|(&v, &s)| (v - max[s]).exp())
            .collect();
        let mut denom = vec![T::zero(); n];
        for (&e, &s) in out.iter().zip(segment.iter()) {
            denom[s] += e;
        }
        for (o, &s) in out.iter_mut().zip(segment.iter()) {
            *o /= denom[s];
        }
        let ng = self.needs(&[ix]);
        Ok(self.push(
            Tensor::from_parts(vec![m], out),
            Op::SegmentSoftmax { x: ix, segment, n },
            ng,
        ))
    }

    /// Softmax over a non-empty `[n]` vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let m = rank1("softmax", &self.nodes[ix].value)?;
        let seg: Arc<[usize]> = vec![0; m].into();
        self.segment_softmax(x, seg, 1)
    }

    /// `-log softmax(logits)[gold]` as a `[1]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var, TensorError> {
        let il = self.check(logits)?;
        let tl = &self.nodes[il].value;
        let k = rank1("cross_entropy", tl)?;
        if gold >= k {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: gold,
                len: k,
            });
        }
        let probs = stable_softmax(tl.data());
        let max = tl.data().iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + tl.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = lse - tl.data()[gold];
        let ng = self.needs(&[il]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                gold,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().copied().sum();
        let ng = self.needs(&[ix]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: ix }, ng))
    }

    /// Column means `[n,d] -> [1,d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let (n, d) = rank2("mean_rows", tx)?;
        let mut out = vec![T::zero(); d];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(n as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.needs(&[ix]);
        Ok(self.push(
            Tensor::from_parts(vec![1, d], out),
            Op::MeanRows { x: ix },
            ng,
        ))
    }

    /// Column maxima `[n,d] -> [1,d]`; ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let (n, d) = rank2("max_rows", tx)?;
        let mut out = tx.row(0).to_vec();
        let mut argmax = vec![0; d];
        for r in 1..n {
            for (c, &v) in tx.row(r).iter().enumerate() {
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let ng = self.needs(&[ix]);
        Ok(self.push(
            Tensor::from_parts(vec![1, d], out),
            Op::MaxRows { x: ix, argmax },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.reshape(shape)?;
        let ng = self.needs(&[ix]);
        Ok(self.push(out, Op::Reshape { x: ix }, ng))
    }

    /// Training-mode batch normalization over the rows of `[n,d]` with
    /// biased batch variance. Returns the output and the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>), TensorError> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let tx = &self.nodes[ix].value;
        let (n, d) = rank2("batch_norm", tx)?;
        self.check_affine("batch_norm", ig, ib, d)?;
        let nf = T::lit(n as f64);
        let mut mean = vec![T::zero(); d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(tx.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![T::zero(); d];
        for r in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= nf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = normalize_cols(tx.data(), n, d, &mean, &inv_std);
        let out = self.affine_cols(&xhat, n, d, ig, ib);
        let ng = self.needs(&[ix, ig, ib]);
        let v = self.push(
            out,
            Op::ColNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var, TensorError> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let tx = &self.nodes[ix].value;
        let (n, d) = rank2("batch_norm", tx)?;
        self.check_affine("batch_norm", ig, ib, d)?;
        if mean.len() != d || var.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: vec![d],
                right: vec![mean.len(), var.len()],
            });
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = normalize_cols(tx.data(), n, d, mean, &inv_std);
        let out = self.affine_cols(&xhat, n, d, ig, ib);
        let ng = self.needs(&[ix, ig, ib]);
        Ok(self.push(
            out,
            Op::ColAffine {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Layer normalization over the columns of each row of `[n,d]`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var, TensorError> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let tx = &self.nodes[ix].value;
        let (n, d) = rank2("layer_norm", tx)?;
        self.check_affine("layer_norm", ig, ib, d)?;
        let df = T::lit(d as f64);
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let out = self.affine_cols(&xhat, n, d, ig, ib);
        let ng = self.needs(&[ix, ig, ib]);
        Ok(self.push(
            out,
            Op::RowNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    fn check_affine(
        &self,
        op: &'static str,
        ig: usize,
        ib: usize,
        d: usize,
    ) -> Result<(), TensorError> {
        for i in [ig, ib] {
            let t = &self.nodes[i].value;
            if rank1(op, t)? != d {
                return Err(TensorError::ShapeMismatch {
                    op,
                    left: vec![d],
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn affine_cols(&self, xhat: &[T], n: usize, d: usize, ig: usize, ib: usize) -> Tensor<T> {
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                out.push(xhat[r * d + c] * g[c] + b[c]);
            }
        }
        Tensor::from_parts(vec![n, d], out)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let il = self.check(loss)?;
        let lv = &self.nodes[il].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; il + 1];
        grads[il] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=il).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
        if !self.nodes[i].needs_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        i: usize,
        f: impl FnOnce() -> Tensor<T>,
    ) {
        if self.nodes[i].needs_grad {
            let g = f();
            self.accumulate(grads, i, g);
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                self.accumulate_with(grads, *a, || {
                    // dA = G Bᵀ
                    let mut out = vec![T::zero(); n * k];
                    for (grow, orow) in g.data().chunks_exact(m).zip(out.chunks_exact_mut(k)) {
                        for (o, brow) in orow.iter_mut().zip(tb.data().chunks_exact(m)) {
                            *o = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    Tensor::from_parts(vec![n, k], out)
                });
                self.accumulate_with(grads, *b, || {
                    // dB = Aᵀ G
                    let mut out = vec![T::zero(); k * m];
                    for (arow, grow) in ta.data().chunks_exact(k).zip(g.data().chunks_exact(m)) {
                        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(m)) {
                            if av == T::zero() {
                                continue;
                            }
                            for (o, &gv) in orow.iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    Tensor::from_parts(vec![k, m], out)
                });
            }
            Op::AddRow { x, bias } => {
                self.accumulate_with(grads, *x, || g.clone());
                self.accumulate_with(grads, *bias, || {
                    let (n, m) = (g.shape()[0], g.shape()[1]);
                    let mut out = vec![T::zero(); m];
                    for r in 0..n {
                        for (o, &v) in out.iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                            *o += v;
                        }
                    }
                    Tensor::from_parts(vec![m], out)
                });
            }
            Op::Add { a, b } => {
                self.accumulate_with(grads, *a, || g.clone());
                self.accumulate_with(grads, *b, || g.clone());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                self.accumulate_with(grads, *a, || {
                    let d = g
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    Tensor::from_parts(g.shape().to_vec(), d)
                });
                self.accumulate_with(grads, *b, || {
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    Tensor::from_parts(g.shape().to_vec(), d)
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate_with(grads, *x, || g.map(|v| v * c));
            }
            Op::Relu { x } => {
                let tx = val(*x);
                self.accumulate_with(grads, *x, || {
                    let d = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    Tensor::from_parts(g.shape().to_vec(), d)
                });
            }
            Op::ConcatCols { a, b } => {
                let n = g.shape()[0];
                let p = val(*a).shape()[1];
                let q = val(*b).shape()[1];
                self.accumulate_with(grads, *a, || {
                    let mut out = Vec::with_capacity(n * p);
                    for r in 0..n {
                        out.extend_from_slice(&g.row(r)[..p]);
                    }
                    Tensor::from_parts(vec![n, p], out)
                });
                self.accumulate_with(grads, *b, || {
                    let mut out = Vec::with_capacity(n * q);
                    for r in 0..n {
                        out.extend_from_slice(&g.row(r)[p..]);
                    }
                    Tensor::from_parts(vec![n, q], out)
                });
            }
            Op::ConcatRows { parts } => {
                let m = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).shape()[0];
                    let start = offset;
                    self.accumulate_with(grads, p, || {
                        Tensor::from_parts(
                            vec![rows, m],
                            g.data()[start * m..(start + rows) * m].to_vec(),
                        )
                    });
                    offset += rows;
                }
            }
            Op::GatherRows { x, index } => {
                let (n, d) = (val(*x).shape()[0], val(*x).shape()[1]);
                self.accumulate_with(grads, *x, || {
                    let mut out = vec![T::zero(); n * d];
                    for (r, &src) in index.iter().enumerate() {
                        for (o, &v) in out[src * d..(src + 1) * d].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    Tensor::from_parts(vec![n, d], out)
                });
            }
            Op::ScatterAddRows { x, index } => {
                let d = g.shape()[1];
                self.accumulate_with(grads, *x, || {
                    let mut out = Vec::with_capacity(index.len() * d);
                    for &dst in index.iter() {
                        out.extend_from_slice(g.row(dst));
                    }
                    Tensor::from_parts(vec![index.len(), d], out)
                });
            }
            Op::IndexAddRows { base, x, index } => {
                let d = g.shape()[1];
                self.accumulate_with(grads, *base, || g.clone());
                self.accumulate_with(grads, *x, || {
                    let mut out = Vec::with_capacity(index.len() * d);
                    for &dst in index.iter() {
                        out.extend_from_slice(g.row(dst));
                    }
                    Tensor::from_parts(vec![index.len(), d], out)
                });
            }
            Op::RowDot { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, d) = (ta.shape()[0], ta.shape()[1]);
                let scaled = |t: &Tensor<T>| {
                    let mut out = Vec::with_capacity(m * d);
                    for r in 0..m {
                        let gr = g.data()[r];
                        out.extend(t.row(r).iter().map(|&v| v * gr));
                    }
                    Tensor::from_parts(vec![m, d], out)
                };
                self.accumulate_with(grads, *a, || scaled(tb));
                self.accumulate_with(grads, *b, || scaled(ta));
            }
            Op::RowScale { x, s } => {
                let (tx, ts) = (val(*x), val(*s));
                let (m, d) = (tx.shape()[0], tx.shape()[1]);
                self.accumulate_with(grads, *x, || {
                    let mut out = Vec::with_capacity(m * d);
                    for r in 0..m {
                        let c = ts.data()[r];
                        out.extend(g.row(r).iter().map(|&v| v * c));
                    }
                    Tensor::from_parts(vec![m, d], out)
                });
                self.accumulate_with(grads, *s, || {
                    let out = (0..m)
                        .map(|r| g.row(r).iter().zip(tx.row(r)).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::from_parts(vec![m], out)
                });
            }
            Op::SegmentSoftmax { x, segment, n } => {
                let y = &node.value;
                self.accumulate_with(grads, *x, || {
                    // dx_r = y_r (g_r - Σ_{s(r')=s(r)} g_r' y_r')
                    let mut dot = vec![T::zero(); *n];
                    for ((&gv, &yv), &s) in g.data().iter().zip(y.data()).zip(segment.iter()) {
                        dot[s] += gv * yv;
                    }
                    let out = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(segment.iter())
                        .map(|((&gv, &yv), &s)| yv * (gv - dot[s]))
                        .collect();
                    Tensor::from_parts(y.shape().to_vec(), out)
                });
            }
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            } => {
                let go = g.item();
                self.accumulate_with(grads, *logits, || {
                    let mut out: Vec<T> = probs.iter().map(|&p| p * go).collect();
                    out[*gold] -= go;
                    Tensor::from_parts(vec![probs.len()], out)
                });
            }
            Op::Sum { x } => {
                let go = g.item();
                self.accumulate_with(grads, *x, || Tensor::full(val(*x).shape(), go));
            }
            Op::MeanRows { x } => {
                let (n, d) = (val(*x).shape()[0], val(*x).shape()[1]);
                self.accumulate_with(grads, *x, || {
                    let inv = T::one() / T::lit(n as f64);
                    let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                    let mut out = Vec::with_capacity(n * d);
                    for _ in 0..n {
                        out.extend_from_slice(&row);
                    }
                    Tensor::from_parts(vec![n, d], out)
                });
            }
            Op::MaxRows { x, argmax } => {
                let (n, d) = (val(*x).shape()[0], val(*x).shape()[1]);
                self.accumulate_with(grads, *x, || {
                    let mut out = vec![T::zero(); n * d];
                    for (c, &r) in argmax.iter().enumerate() {
                        out[r * d + c] = g.data()[c];
                    }
                    Tensor::from_parts(vec![n, d], out)
                });
            }
            Op::Reshape { x } => {
                let shape = val(*x).shape().to_vec();
                self.accumulate_with(grads, *x, || Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::ColNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = (g.shape()[0], g.shape()[1]);
                let gam = val(*gamma).data();
                self.norm_param_grads(grads, g, xhat, *gamma, *beta, n, d);
                self.accumulate_with(grads, *x, || {
                    // dx = inv_std/n · (n·dxhat − Σ dxhat − xhat·Σ dxhat·xhat), per column
                    let nf = T::lit(n as f64);
                    let mut sum_dxh = vec![T::zero(); d];
                    let mut sum_dxh_xh = vec![T::zero(); d];
                    for r in 0..n {
                        for c in 0..d {
                            let dxh = g.data()[r * d + c] * gam[c];
                            sum_dxh[c] += dxh;
                            sum_dxh_xh[c] += dxh * xhat[r * d + c];
                        }
                    }
                    let mut out = Vec::with_capacity(n * d);
                    for r in 0..n {
                        for c in 0..d {
                            let dxh = g.data()[r * d + c] * gam[c];
                            out.push(
                                inv_std[c] / nf
                                    * (nf * dxh - sum_dxh[c] - xhat[r * d + c] * sum_dxh_xh[c]),
                            );
                        }
                    }
                    Tensor::from_parts(vec![n, d], out)
                });
            }
            Op::ColAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = (g.shape()[0], g.shape()[1]);
                let gam = val(*gamma).data();
                self.norm_param_grads(grads, g, xhat, *gamma, *beta, n, d);
                self.accumulate_with(grads, *x, || {
                    let mut out = Vec::with_capacity(n * d);
                    for r in 0..n {
                        for c in 0..d {
                            out.push(g.data()[r * d + c] * gam[c] * inv_std[c]);
                        }
                    }
                    Tensor::from_parts(vec![n, d], out)
                });
            }
            Op::RowNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = (g.shape()[0], g.shape()[1]);
                let gam = val(*gamma).data();
                self.norm_param_grads(grads, g, xhat, *gamma, *beta, n, d);
                self.accumulate_with(grads, *x, || {
                    let df = T::lit(d as f64);
                    let mut out = Vec::with_capacity(n * d);
                    for r in 0..n {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            let dxh = g.data()[r * d + c] * gam[c];
                            s1 += dxh;
                            s2 += dxh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dxh = g.data()[r * d + c] * gam[c];
                            out.push(inv_std[r] / df * (df * dxh - s1 - xhat[r * d + c] * s2));
                        }
                    }
                    Tensor::from_parts(vec![n, d], out)
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_param_grads(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        xhat: &[T],
        gamma: usize,
        beta: usize,
        n: usize,
        d: usize,
    ) {
        self.accumulate_with(grads, gamma, || {
            let mut out = vec![T::zero(); d];
            for r in 0..n {
                for c in 0..d {
                    out[c] += g.data()[r * d + c] * xhat[r * d + c];
                }
            }
            Tensor::from_parts(vec![d], out)
        });
        self.accumulate_with(grads, beta, || {
            let mut out = vec![T::zero(); d];
            for r in 0..n {
                for (o, &v) in out.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            Tensor::from_parts(vec![d], out)
        });
    }
}

fn normalize_cols<T: Scalar>(x: &[T], n: usize, d: usize, mean: &[T], inv_std: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        for c in 0..d {
            out.push((x[r * d + c] - mean[c]) * inv_std[c]);
        }
    }
    out
}

/// Max-shifted softmax of a slice.
pub fn stable_softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
