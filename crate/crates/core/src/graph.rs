//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and whatever it needs for the backward sweep. Operations are
//! matrix-granular (matmul, fused attention, layer norm, fused losses) so a
//! tape for one training step has a few hundred nodes, not millions.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batched attention geometry.
///
/// Queries are `batch` sequences of `q_len` rows. Keys and values are blocks
/// of `k_len` rows; query sequence `b` reads block `kv_index[b]` (identity when
/// `None`) and may only attend to the key positions listed in
/// `allowed[block]`. Positions outside that list are never read.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub kv_index: Option<Vec<usize>>,
    pub allowed: Vec<Vec<usize>>,
}

impl AttnLayout {
    #[inline]
    fn block(&self, b: usize) -> usize {
        match &self.kv_index {
            Some(ix) => ix[b],
            None => b,
        }
    }
}

enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddTiled {
        x: Var,
        table: Var,
        len: usize,
    },
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<T>,
        offsets: Vec<usize>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Var, Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    /// Fused scalar loss whose local gradient was computed in the forward pass.
    FusedLoss {
        x: Var,
        local_grad: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
}

/// The tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by parameter id.
pub struct Gradients<T> {
    pub params: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; n_params],
        }
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Single-element value of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "input shape");
        self.push(value, rows, cols, Op::Input)
    }

    /// Registers parameter `id` on the tape; repeated calls return the same node.
    pub fn param(&mut self, id: usize, data: &[T], rows: usize, cols: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(data.to_vec(), rows, cols, Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![T::zero(); n * m];
        kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, n, k, m);
        self.push(out, n, m, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t inner dims");
        let mut out = vec![T::zero(); n * m];
        kernels::matmul_bt(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, n, k, m);
        self.push(out, n, m, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(out, r, c, Op::Add(a, b))
    }

    /// Adds a `1×m` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(bias), (1, c), "bias shape");
        let bv = &self.nodes[bias.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        self.push(out, r, c, Op::AddBias(x, bias))
    }

    /// Adds the first `len` rows of `table` to each consecutive block of `len`
    /// rows of `x` (positional embeddings).
    pub fn add_tiled(&mut self, x: Var, table: Var, len: usize) -> Var {
        let (r, c) = self.shape(x);
        let (tr, tc) = self.shape(table);
        assert!(tc == c && len <= tr && len > 0 && r % len == 0, "add_tiled shapes");
        let tv = &self.nodes[table.0].value[..len * c];
        let mut out = self.nodes[x.0].value.clone();
        for block in out.chunks_exact_mut(len * c) {
            for (o, &t) in block.iter_mut().zip(tv) {
                *o += t;
            }
        }
        self.push(out, r, c, Op::AddTiled { x, table, len })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let (r, c) = self.shape(x);
        let out = self.nodes[x.0].value.iter().map(|&v| v * s).collect();
        self.push(out, r, c, Op::Scale(x, s))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let eps = T::of(1e-5);
        let n = T::of(c as f64);
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            out,
            r,
            c,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.nodes[x.0].value.iter().map(|&v| gelu(v)).collect();
        self.push(out, r, c, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        self.push(out, r, c, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.nodes[x.0].value.iter().map(|&v| sigmoid(v)).collect();
        self.push(out, r, c, Op::Sigmoid(x))
    }

    /// Inverted dropout with an explicit keep-mask draw.
    pub fn dropout<F: FnMut() -> f64>(&mut self, x: Var, p: f64, mut uniform: F) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (r, c) = self.shape(x);
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..r * c)
            .map(|_| if uniform() >= p { keep } else { T::zero() })
            .collect();
        let out = self.nodes[x.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        self.push(out, r, c, Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product attention; see [`AttnLayout`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        assert_eq!(self.shape(v), (kr, kd), "k/v shapes");
        assert_eq!(kd, d, "q/k width");
        assert_eq!(qr, layout.batch * layout.q_len, "query rows");
        assert_eq!(kr % layout.k_len, 0, "key rows");
        assert_eq!(d % layout.heads, 0, "head split");
        let hd = d / layout.heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;

        let mut offsets = Vec::with_capacity(layout.batch + 1);
        let mut total = 0;
        for b in 0..layout.batch {
            offsets.push(total);
            let n_allowed = layout.allowed[layout.block(b)].len();
            assert!(n_allowed > 0, "attention row with no allowed keys");
            total += layout.heads * layout.q_len * n_allowed;
        }
        offsets.push(total);
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); qr * d];
        let mut scores: Vec<T> = Vec::new();

        for b in 0..layout.batch {
            let blk = layout.block(b);
            let allowed = &layout.allowed[blk];
            let na = allowed.len();
            for h in 0..layout.heads {
                let off = h * hd;
                for i in 0..layout.q_len {
                    let qrow = (b * layout.q_len + i) * d + off;
                    let qs = &qv[qrow..qrow + hd];
                    scores.clear();
                    let mut max = T::neg_infinity();
                    for &j in allowed {
                        let krow = (blk * layout.k_len + j) * d + off;
                        let s = kernels::dot(qs, &kv[krow..krow + hd]) * scale;
                        if s > max {
                            max = s;
                        }
                        scores.push(s);
                    }
                    let mut sum = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let p_off = offsets[b] + (h * layout.q_len + i) * na;
                    let orow = qrow;
                    for (jj, &j) in allowed.iter().enumerate() {
                        let p = scores[jj] / sum;
                        probs[p_off + jj] = p;
                        let vrow = (blk * layout.k_len + j) * d + off;
                        kernels::axpy(p, &vv[vrow..vrow + hd], &mut out[orow..orow + hd]);
                    }
                }
            }
        }
        self.push(
            out,
            qr,
            d,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                offsets,
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let (r, c) = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            assert!(i < r, "gather row out of range");
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let n = rows.len();
        self.push(out, n, c, Op::Gather { x, rows })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat rows");
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&self.nodes[a.0].value[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.nodes[b.0].value[i * cb..(i + 1) * cb]);
        }
        self.push(out, ra, ca + cb, Op::ConcatCols(a, b))
    }

    /// Row-wise L2 normalization. Errors on an all-zero row.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks_exact(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() || !n.is_finite() {
                return Err(Error::ZeroNorm);
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        Ok(self.push(out, r, c, Op::L2Normalize { x, norms }))
    }

    /// Mean softmax cross-entropy of `logits` rows against class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(r, targets.len(), "one target per row");
        assert!(r > 0, "cross entropy of zero rows");
        let lv = &self.nodes[logits.0].value;
        let mut grad = vec![T::zero(); r * c];
        let mut total = T::zero();
        let inv_n = T::one() / T::of(r as f64);
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "target class out of range");
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().map(|&v| (v - max).exp()).sum::<T>();
            let lse = max + sum.ln();
            total += lse - row[t];
            for j in 0..c {
                let p = (row[j] - lse).exp();
                grad[i * c + j] = p * inv_n;
            }
            grad[i * c + t] -= inv_n;
        }
        self.push(
            vec![total * inv_n],
            1,
            1,
            Op::FusedLoss {
                x: logits,
                local_grad: grad,
            },
        )
    }

    /// Mean box-regression loss over `pred` rows `(cx, cy, w, h)` against
    /// targets in the same format: smooth-L1 averaged over the 4 coordinates,
    /// plus `1 − GIoU` when `giou` is set.
    pub fn bbox_loss(&mut self, pred: Var, targets: &[[T; 4]], giou: bool) -> Var {
        let (r, c) = self.shape(pred);
        assert_eq!(c, 4, "bbox predictions are 4-wide");
        assert_eq!(r, targets.len(), "one target per box");
        assert!(r > 0, "bbox loss of zero rows");
        let pv = &self.nodes[pred.0].value;
        let inv_n = T::one() / T::of(r as f64);
        let mut grad = vec![T::zero(); r * 4];
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let p = [pv[i * 4], pv[i * 4 + 1], pv[i * 4 + 2], pv[i * 4 + 3]];
            let (l, g) = box_loss_and_grad(&p, t, giou);
            total += l;
            for j in 0..4 {
                grad[i * 4 + j] = g[j] * inv_n;
            }
        }
        self.push(
            vec![total * inv_n],
            1,
            1,
            Op::FusedLoss {
                x: pred,
                local_grad: grad,
            },
        )
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, T)>) -> Var {
        let mut total = T::zero();
        for &(v, w) in &terms {
            assert_eq!(self.shape(v), (1, 1), "weighted_sum of non-scalar");
            total += self.scalar(v) * w;
        }
        self.push(vec![total], 1, 1, Op::WeightedSum(terms))
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let n = loss.0 + 1;
        let mut grads: Vec<Vec<T>> = (0..n).map(|_| Vec::new()).collect();
        grads[loss.0] = vec![T::one()];
        let mut params: Vec<Option<Vec<T>>> = vec![None; self.param_vars.len()];

        for idx in (0..n).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let g = core::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => params[*id] = Some(g),
                Op::MatMul(a, b) => {
                    let (nr, k) = self.shape(*a);
                    let m = node.cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga = acc(&mut grads, *a, nr * k);
                    // dA = dC · Bᵀ
                    kernels::matmul_bt_acc(&g, bv, ga, nr, m, k);
                    let gb = acc(&mut grads, *b, k * m);
                    // dB = Aᵀ · dC
                    kernels::matmul_at_acc(av, &g, gb, nr, k, m);
                }
                Op::MatMulT(a, b) => {
                    let (nr, k) = self.shape(*a);
                    let m = node.cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                    let ga = acc(&mut grads, *a, nr * k);
                    kernels::matmul_acc(&g, bv, ga, nr, m, k);
                    let gb = acc(&mut grads, *b, m * k);
                    kernels::matmul_at_acc(&g, av, gb, nr, m, k);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::AddBias(x, b) => {
                    let c = node.cols;
                    add_into(acc(&mut grads, *x, g.len()), &g);
                    let gb = acc(&mut grads, *b, c);
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
                Op::AddTiled { x, table, len } => {
                    let c = node.cols;
                    add_into(acc(&mut grads, *x, g.len()), &g);
                    let (tr, _) = self.shape(*table);
                    let gt = acc(&mut grads, *table, tr * c);
                    for block in g.chunks_exact(len * c) {
                        add_into(&mut gt[..len * c], block);
                    }
                }
                Op::Scale(x, s) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for (o, &d) in gx.iter_mut().zip(&g) {
                        *o += d * *s;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (r, c) = (node.rows, node.cols);
                    let gv = &self.nodes[gamma.0].value;
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); r * c];
                    let n = T::of(c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            dgamma[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                            let d = gr[j] * gv[j];
                            dxhat[j] = d;
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    add_into(acc(&mut grads, *x, r * c), &dx);
                    add_into(acc(&mut grads, *gamma, c), &dgamma);
                    add_into(acc(&mut grads, *beta, c), &dbeta);
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, &d), &v) in gx.iter_mut().zip(&g).zip(xv) {
                        *o += d * gelu_grad(v);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, &d), &v) in gx.iter_mut().zip(&g).zip(xv) {
                        if v > T::zero() {
                            *o += d;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = &node.value;
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, &d), &y) in gx.iter_mut().zip(&g).zip(yv) {
                        *o += d * y * (T::one() - y);
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, &d), &m) in gx.iter_mut().zip(&g).zip(mask) {
                        *o += d * m;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                    offsets,
                } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, layout, probs, offsets);
                }
                Op::Gather { x, rows } => {
                    let c = node.cols;
                    let (xr, _) = self.shape(*x);
                    let gx = acc(&mut grads, *x, xr * c);
                    for (k, &i) in rows.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = self.shape(*a);
                    let (_, cb) = self.shape(*b);
                    let w = ca + cb;
                    {
                        let gaa = acc(&mut grads, *a, r * ca);
                        for i in 0..r {
                            add_into(&mut gaa[i * ca..(i + 1) * ca], &g[i * w..i * w + ca]);
                        }
                    }
                    let gbb = acc(&mut grads, *b, r * cb);
                    for i in 0..r {
                        add_into(&mut gbb[i * cb..(i + 1) * cb], &g[i * w + ca..(i + 1) * w]);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let c = node.cols;
                    let yv = &node.value;
                    let gx = acc(&mut grads, *x, g.len());
                    for (i, &nrm) in norms.iter().enumerate() {
                        let y = &yv[i * c..(i + 1) * c];
                        let dy = &g[i * c..(i + 1) * c];
                        let proj = kernels::dot(y, dy);
                        for j in 0..c {
                            gx[i * c + j] += (dy[j] - y[j] * proj) / nrm;
                        }
                    }
                }
                Op::FusedLoss { x, local_grad } => {
                    let up = g[0];
                    let gx = acc(&mut grads, *x, local_grad.len());
                    for (o, &l) in gx.iter_mut().zip(local_grad) {
                        *o += up * l;
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        let gv = acc(&mut grads, v, 1);
                        gv[0] += g[0] * w;
                    }
                }
            }
        }
        Gradients { params }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Vec<T>],
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[T],
        offsets: &[usize],
    ) {
        let (qr, d) = self.shape(q);
        let (kr, _) = self.shape(k);
        let hd = d / layout.heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut dq = vec![T::zero(); qr * d];
        let mut dk = vec![T::zero(); kr * d];
        let mut dv = vec![T::zero(); kr * d];
        let mut dp: Vec<T> = Vec::new();
        for b in 0..layout.batch {
            let blk = layout.block(b);
            let allowed = &layout.allowed[blk];
            let na = allowed.len();
            for h in 0..layout.heads {
                let off = h * hd;
                for i in 0..layout.q_len {
                    let qrow = (b * layout.q_len + i) * d + off;
                    let go = &g[qrow..qrow + hd];
                    let p = &probs[offsets[b] + (h * layout.q_len + i) * na..][..na];
                    dp.clear();
                    let mut pdp = T::zero();
                    for (jj, &j) in allowed.iter().enumerate() {
                        let vrow = (blk * layout.k_len + j) * d + off;
                        kernels::axpy(p[jj], go, &mut dv[vrow..vrow + hd]);
                        let dpj = kernels::dot(go, &vv[vrow..vrow + hd]);
                        pdp += p[jj] * dpj;
                        dp.push(dpj);
                    }
                    for (jj, &j) in allowed.iter().enumerate() {
                        let ds = p[jj] * (dp[jj] - pdp) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = (blk * layout.k_len + j) * d + off;
                        kernels::axpy(ds, &kv[krow..krow + hd], &mut dq[qrow..qrow + hd]);
                        kernels::axpy(ds, &qv[qrow..qrow + hd], &mut dk[krow..krow + hd]);
                    }
                }
            }
        }
        add_into(acc(grads, q, qr * d), &dq);
        add_into(acc(grads, k, kr * d), &dk);
        add_into(acc(grads, v, kr * d), &dv);
    }
}

fn acc<T: Scalar>(grads: &mut [Vec<T>], v: Var, len: usize) -> &mut [T] {
    let g = &mut grads[v.0];
    if g.is_empty() {
        *g = vec![T::zero(); len];
    }
    g
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Smooth-L1 (β = 1) on one coordinate difference, with its derivative.
#[inline]
fn smooth_l1<T: Scalar>(d: T) -> (T, T) {
    if d.abs() < T::one() {
        (T::of(0.5) * d * d, d)
    } else {
        (d.abs() - T::of(0.5), d.signum())
    }
}

/// Box loss for one `(cx, cy, w, h)` prediction and its gradient.
pub(crate) fn box_loss_and_grad<T: Scalar>(p: &[T; 4], t: &[T; 4], giou: bool) -> (T, [T; 4]) {
    let quarter = T::of(0.25);
    let mut loss = T::zero();
    let mut grad = [T::zero(); 4];
    for j in 0..4 {
        let (l, dl) = smooth_l1(p[j] - t[j]);
        loss += l * quarter;
        grad[j] = dl * quarter;
    }
    if giou {
        let (gl, gg) = giou_term(p, t);
        loss += gl;
        for j in 0..4 {
            grad[j] += gg[j];
        }
    }
    (loss, grad)
}

/// `1 − GIoU` between two `(cx, cy, w, h)` boxes, with its gradient w.r.t. `p`.
pub(crate) fn giou_term<T: Scalar>(p: &[T; 4], t: &[T; 4]) -> (T, [T; 4]) {
    let half = T::of(0.5);
    let zero = T::zero();
    let (x1, x2) = (p[0] - half * p[2], p[0] + half * p[2]);
    let (y1, y2) = (p[1] - half * p[3], p[1] + half * p[3]);
    let (tx1, tx2) = (t[0] - half * t[2], t[0] + half * t[2]);
    let (ty1, ty2) = (t[1] - half * t[3], t[1] + half * t[3]);

    let iw_raw = x2.min(tx2) - x1.max(tx1);
    let ih_raw = y2.min(ty2) - y1.max(ty1);
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let inter = iw * ih;
    let area_p = (x2 - x1) * (y2 - y1);
    let area_t = (tx2 - tx1) * (ty2 - ty1);
    let union = area_p + area_t - inter;
    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let hull = cw * ch;
    let loss = T::of(2.0) - inter / union - union / hull;

    // Partials w.r.t. (x1, x2, y1, y2).
    let (mut di, mut dap, mut dc) = ([zero; 4], [zero; 4], [zero; 4]);
    if iw_raw > zero && ih_raw > zero {
        if x2 < tx2 {
            di[1] = ih;
        }
        if x1 > tx1 {
            di[0] = -ih;
        }
        if y2 < ty2 {
            di[3] = iw;
        }
        if y1 > ty1 {
            di[2] = -iw;
        }
    }
    dap[0] = -(y2 - y1);
    dap[1] = y2 - y1;
    dap[2] = -(x2 - x1);
    dap[3] = x2 - x1;
    if x1 < tx1 {
        dc[0] = -ch;
    }
    if x2 > tx2 {
        dc[1] = ch;
    }
    if y1 < ty1 {
        dc[2] = -cw;
    }
    if y2 > ty2 {
        dc[3] = cw;
    }
    let mut dxy = [zero; 4];
    for j in 0..4 {
        let du = dap[j] - di[j];
        let d_iou = (di[j] * union - inter * du) / (union * union);
        let d_uc = (du * hull - union * dc[j]) / (hull * hull);
        dxy[j] = -d_iou - d_uc;
    }
    // (x1, x2, y1, y2) -> (cx, cy, w, h)
    let grad = [
        dxy[0] + dxy[1],
        dxy[2] + dxy[3],
        half * (dxy[1] - dxy[0]),
        half * (dxy[3] - dxy[2]),
    ];
    (loss, grad)
}

pub(crate) mod kernels {
    use crate::scalar::Scalar;

    #[inline]
    pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
        let mut s0 = T::zero();
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        let mut s3 = T::zero();
        let n = a.len().min(b.len());
        let chunks = n / 4;
        for c in 0..chunks {
            let i = c * 4;
            s0 += a[i] * b[i];
            s1 += a[i + 1] * b[i + 1];
            s2 += a[i + 2] * b[i + 2];
            s3 += a[i + 3] * b[i + 3];
        }
        for i in chunks * 4..n {
            s0 += a[i] * b[i];
        }
        (s0 + s1) + (s2 + s3)
    }

    #[inline]
    pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    /// `out = a (n×k) · b (k×m)`.
    pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
        matmul_acc(a, b, out, n, k, m)
    }

    /// `out += a (n×k) · b (k×m)`.
    pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                axpy(av, &b[kk * m..(kk + 1) * m], orow);
            }
        }
    }

    /// `out = a (n×k) · bᵀ` where `b` is `m×k`.
    pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// `out += a (n×m) · bᵀ` where `b` is `k×m`; `out` is `n×k`.
    pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, m: usize, k: usize) {
        for i in 0..n {
            let arow = &a[i * m..(i + 1) * m];
            for j in 0..k {
                out[i * k + j] += dot(arow, &b[j * m..(j + 1) * m]);
            }
        }
    }

    /// `out += aᵀ · b` where `a` is `n×k`, `b` is `n×m`; `out` is `k×m`.
    pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * m..(i + 1) * m];
            for (kk, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                axpy(av, brow, &mut out[kk * m..(kk + 1) * m]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * x.abs().max(y.abs()) + 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn giou_gradient_matches_finite_difference() {
        let cases = [
            ([0.4, 0.5, 0.3, 0.2], [0.45, 0.56, 0.25, 0.3]),
            ([0.2, 0.2, 0.1, 0.1], [0.7, 0.8, 0.2, 0.1]),
            ([0.5, 0.5, 0.6, 0.6], [0.5, 0.52, 0.2, 0.3]),
        ];
        for (p, t) in cases {
            let (_, g) = box_loss_and_grad(&p, &t, true);
            let fd = finite_diff(
                |x| box_loss_and_grad(&[x[0], x[1], x[2], x[3]], &t, true).0,
                &p,
            );
            assert_close(&g, &fd, 1e-5);
        }
    }

    #[test]
    fn attention_respects_allowed_keys() {
        let mut g = Graph::<f64>::new(0);
        let q = g.input(vec![0.1, 0.2, 0.3, 0.4], 2, 2);
        let k = g.input(vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0], 3, 2);
        let v = g.input(vec![1.0, 2.0, 3.0, 4.0, 99.0, 99.0], 3, 2);
        let layout = AttnLayout {
            batch: 1,
            q_len: 2,
            k_len: 3,
            heads: 1,
            kv_index: None,
            allowed: vec![vec![0, 1]],
        };
        let out = g.attention(q, k, v, layout);
        for &o in g.value(out) {
            assert!(o < 5.0);
        }
    }

    #[test]
    fn layer_norm_and_attention_gradients() {
        let build = |x: &[f64]| -> (Graph<f64>, Var) {
            let mut g = Graph::<f64>::new(1);
            let xv = g.param(0, x, 4, 4);
            let gamma = g.input(vec![1.0, 0.5, 2.0, 1.5], 1, 4);
            let beta = g.input(vec![0.1, 0.0, -0.1, 0.2], 1, 4);
            let h = g.layer_norm(xv, gamma, beta);
            let w = g.input((0..16).map(|i| (i as f64 * 0.37).sin()).collect(), 4, 4);
            let q = g.matmul(h, w);
            let k = g.matmul_t(h, w);
            let layout = AttnLayout {
                batch: 2,
                q_len: 2,
                k_len: 2,
                heads: 2,
                kv_index: Some(vec![1, 0]),
                allowed: vec![vec![0, 1], vec![1]],
            };
            let a = g.attention(q, k, h, layout);
            let a = g.gelu(a);
            let logits = g.gather_rows(a, vec![0, 3, 2]);
            let loss = g.cross_entropy(logits, &[1, 2, 3]);
            (g, loss)
        };
        let x: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64) * 0.1 - 0.4).collect();
        let fd = finite_diff(
            |x| {
                let (g, l) = build(x);
                g.scalar(l)
            },
            &x,
        );
        let (g, loss) = build(&x);
        let grads = g.backward(loss);
        assert_close(grads.params[0].as_ref().unwrap(), &fd, 1e-5);
    }
}
