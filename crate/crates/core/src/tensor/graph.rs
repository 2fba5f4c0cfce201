//! Wengert-style tape. Every operation appends a node whose inputs are
//! strictly earlier nodes, so reverse creation order is a valid reverse
//! topological order for backpropagation.

use std::sync::Arc;

use super::{BinaryMask, Real, Tensor};
use crate::error::{Error, Result};

/// Additive offset applied to blocked attention scores before normalization.
pub const MASK_OFFSET: f64 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    /// `[.., m, k] x [k, n]` with the right-hand side shared across rows.
    MatMulShared { a: Var, b: Var, rows: usize, k: usize, n: usize },
    /// `[bt, m, k] x [bt, k, n]`.
    MatMulBatched { a: Var, b: Var, bt: usize, m: usize, k: usize, n: usize },
    /// `[bt, m, k] x [bt, n, k]^T`.
    MatMulNt { a: Var, b: Var, bt: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sum(Var),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T> },
    Reshape(Var),
    SwapAxes01 { x: Var, d0: usize, d1: usize, inner: usize },
    Concat1 { a: Var, b: Var, outer: usize, a_mid: usize, b_mid: usize, inner: usize },
    MaskedSoftmax { x: Var, width: usize },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient after [`Graph::backward`]; `None` for nodes the loss never reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with unreached nodes reported as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v).map_or_else(|| vec![T::zero(); self.value(v).numel()], <[T]>::to_vec)
    }

    /// Copy of the node value carrying its gradient buffer.
    pub fn with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = (*self.nodes[v.0].value).clone();
        t.set_grad(self.grad_or_zeros(v)).expect("gradient shaped like value");
        t
    }

    // ----- operations -------------------------------------------------

    /// Matrix product. `a: [.., m, k]` with `b: [k, n]`, or batched
    /// `a: [bt, m, k]` with `b: [bt, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::shape(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
            }
            let n = sb[1];
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out = vec![T::zero(); rows * n];
            T::gemm(rows, k, n, self.value(a).data(), k as isize, 1, self.value(b).data(), n as isize, 1, &mut out, false);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            let rg = self.rg(&[a, b]);
            return Ok(self.push(Tensor::new(shape, out)?, Op::MatMulShared { a, b, rows, k, n }, rg));
        }
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sb[1] != k {
            return Err(Error::shape(format!("batched matmul mismatch: {sa:?} x {sb:?}")));
        }
        let (bt, m, n) = (sa[0], sa[1], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bt {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    k as isize,
                    1,
                    &bv[i * k * n..],
                    n as isize,
                    1,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![bt, m, n], out)?, Op::MatMulBatched { a, b, bt, m, k, n }, rg))
    }

    /// `a · bᵀ` for `a: [bt, m, k]`, `b: [bt, n, k]` (rank-2 operands act as `bt = 1`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let split = |s: &[usize]| match s.len() {
            2 => Some((1, s[0], s[1])),
            3 => Some((s[0], s[1], s[2])),
            _ => None,
        };
        let ((bt, m, k), (bt2, n, k2)) = match (split(&sa), split(&sb)) {
            (Some(x), Some(y)) if sa.len() == sb.len() => (x, y),
            _ => return Err(Error::shape(format!("matmul_nt rank mismatch: {sa:?} x {sb:?}"))),
        };
        if bt != bt2 || k != k2 {
            return Err(Error::shape(format!("matmul_nt mismatch: {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); bt * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bt {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    k as isize,
                    1,
                    &bv[i * n * k..],
                    1,
                    k as isize,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![bt, m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMulNt { a, b, bt, m, k, n }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x / (T::one() + (-x).exp())).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// RMS normalization over the last extent with a learned gain `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let width = *self.shape(x).last().ok_or_else(|| Error::shape("rms_norm on scalar"))?;
        if self.shape(w) != [width] {
            return Err(Error::shape(format!("rms_norm gain {:?} vs width {width}", self.shape(w))));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let rows = xv.len() / width.max(1);
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        let (wf, epsf) = (T::of(width as f64), T::of(eps));
        for r in 0..rows {
            let xr = &xv[r * width..(r + 1) * width];
            let ms = xr.iter().map(|&v| v * v).sum::<T>() / wf;
            let inv = T::one() / (ms + epsf).sqrt();
            inv_rms.push(inv);
            for (o, (&xi, &wi)) in out[r * width..(r + 1) * width].iter_mut().zip(xr.iter().zip(wv)) {
                *o = xi * inv * wi;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    /// Row gather from a `[vocab, width]` table; gradient scatters back.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("embedding table must be rank 2"));
        }
        let (vocab, width) = (shape[0], shape[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { index: id, bound: vocab });
            }
            out.extend_from_slice(&tv[id * width..(id + 1) * width]);
        }
        let out = Tensor::new(vec![ids.len(), width], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Rotary position encoding on `x: [heads, n, dim]`, rotating adjacent
    /// pairs `(2i, 2i+1)` by `position · base^(-2i/dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != positions.len() || !shape[2].is_multiple_of(2) {
            return Err(Error::shape(format!(
                "rope expects [heads, {}, even dim], got {shape:?}",
                positions.len()
            )));
        }
        let (heads, n, dim) = (shape[0], shape[1], shape[2]);
        let half = dim / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / dim as f64);
                cos.push(T::of(theta.cos()));
                sin.push(T::of(theta.sin()));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for h in 0..heads {
            for r in 0..n {
                let base_idx = (h * n + r) * dim;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let (x0, x1) = (xv[base_idx + 2 * i], xv[base_idx + 2 * i + 1]);
                    out[base_idx + 2 * i] = x0 * c - x1 * s;
                    out[base_idx + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rope { x, cos, sin }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.nodes[x.0].value).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[d0, d1, inner] -> [d1, d0, inner]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(format!("swap_axes01 expects rank 3, got {shape:?}")));
        }
        let (d0, d1, inner) = (shape[0], shape[1], shape[2]);
        let out = swap01(self.value(x).data(), d0, d1, inner);
        let out = Tensor::new(vec![d1, d0, inner], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SwapAxes01 { x, d0, d1, inner }, rg))
    }

    /// Concatenation of rank-3 tensors along axis 1.
    pub fn concat1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape(format!("concat1 mismatch: {sa:?} + {sb:?}")));
        }
        let (outer, a_mid, b_mid, inner) = (sa[0], sa[1], sb[1], sa[2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * a_mid * inner..(o + 1) * a_mid * inner]);
            out.extend_from_slice(&bv[o * b_mid * inner..(o + 1) * b_mid * inner]);
        }
        let out = Tensor::new(vec![outer, a_mid + b_mid, inner], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat1 { a, b, outer, a_mid, b_mid, inner }, rg))
    }

    /// Row softmax over the last extent with blocked entries pushed to
    /// [`MASK_OFFSET`]; the mask broadcasts over leading extents.
    pub fn masked_softmax(&mut self, x: Var, mask: &BinaryMask) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&1);
        let rows_per_mask = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if mask.cols() != width || mask.rows() != rows_per_mask {
            return Err(Error::shape(format!(
                "mask {}x{} does not fit scores {shape:?}",
                mask.rows(),
                mask.cols()
            )));
        }
        for r in 0..mask.rows() {
            if mask.row_sum(r) == 0 {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        let xv = self.value(x).data();
        let offset = T::of(MASK_OFFSET);
        let mut out = vec![T::zero(); xv.len()];
        for (row_idx, (orow, xrow)) in out.chunks_mut(width.max(1)).zip(xv.chunks(width.max(1))).enumerate() {
            let allowed = mask.row(row_idx % rows_per_mask);
            let mut max = T::neg_infinity();
            for (o, (&s, &ok)) in orow.iter_mut().zip(xrow.iter().zip(allowed)) {
                *o = if ok { s } else { s + offset };
                max = max.max(*o);
            }
            let mut total = T::zero();
            for (o, &ok) in orow.iter_mut().zip(allowed) {
                *o = if ok { (*o - max).exp() } else { T::zero() };
                total = total + *o;
            }
            for o in orow.iter_mut() {
                *o = *o / total;
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskedSoftmax { x, width }, rg))
    }

    /// Summed cross-entropy `-log softmax(logits[row])[target]` over the
    /// listed `(row, target)` pairs. Rank-1 logits act as a single row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, vocab) = match shape.as_slice() {
            [v] => (1, *v),
            [r, v] => (*r, *v),
            _ => return Err(Error::shape(format!("cross_entropy expects rank 1 or 2, got {shape:?}"))),
        };
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(targets.len() * vocab);
        let mut total = T::zero();
        for &(row, target) in targets {
            if row >= rows {
                return Err(Error::Index { index: row, bound: rows });
            }
            if target >= vocab {
                return Err(Error::Index { index: target, bound: vocab });
            }
            let lr = &lv[row * vocab..(row + 1) * vocab];
            let max = lr.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = lr.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total = total + (log_z - lr[target]);
            probs.extend(lr.iter().map(|&v| (v - log_z).exp()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(total), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    // ----- reverse pass -----------------------------------------------

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. A graph supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Detach the node so operand values can be read while gradient
        // buffers of earlier nodes are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out = Arc::clone(&self.nodes[i].value);
        match &op {
            Op::Leaf => {}
            Op::MatMulShared { a, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                let av = self.value_arc(*a);
                let bv = self.value_arc(*b);
                if let Some(ga) = self.acc(*a) {
                    // dA = dC · Bᵀ
                    T::gemm(rows, n, k, g, n as isize, 1, bv.data(), 1, n as isize, ga, true);
                }
                if let Some(gb) = self.acc(*b) {
                    // dB = Aᵀ · dC
                    T::gemm(k, rows, n, av.data(), 1, k as isize, g, n as isize, 1, gb, true);
                }
            }
            Op::MatMulBatched { a, b, bt, m, k, n } => {
                let (bt, m, k, n) = (*bt, *m, *k, *n);
                let av = self.value_arc(*a);
                let bv = self.value_arc(*b);
                if let Some(ga) = self.acc(*a) {
                    for t in 0..bt {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..],
                            n as isize,
                            1,
                            &bv.data()[t * k * n..],
                            1,
                            n as isize,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for t in 0..bt {
                        T::gemm(
                            k,
                            m,
                            n,
                            &av.data()[t * m * k..],
                            1,
                            k as isize,
                            &g[t * m * n..],
                            n as isize,
                            1,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::MatMulNt { a, b, bt, m, k, n } => {
                let (bt, m, k, n) = (*bt, *m, *k, *n);
                let av = self.value_arc(*a);
                let bv = self.value_arc(*b);
                if let Some(ga) = self.acc(*a) {
                    // dA = dC · B
                    for t in 0..bt {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..],
                            n as isize,
                            1,
                            &bv.data()[t * n * k..],
                            k as isize,
                            1,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    // dB = dCᵀ · A
                    for t in 0..bt {
                        T::gemm(
                            n,
                            m,
                            k,
                            &g[t * m * n..],
                            1,
                            n as isize,
                            &av.data()[t * m * k..],
                            k as isize,
                            1,
                            &mut gb[t * n * k..(t + 1) * n * k],
                            true,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value_arc(*a);
                let bv = self.value_arc(*b);
                if let Some(ga) = self.acc(*a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *d = *d + s * o;
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av.data()) {
                        *d = *d + s * o;
                    }
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * f);
                }
            }
            Op::Silu(a) => {
                let av = self.value_arc(*a);
                if let Some(ga) = self.acc(*a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                        let sig = T::one() / (T::one() + (-x).exp());
                        *d = *d + s * sig * (T::one() + x * (T::one() - sig));
                    }
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xv = self.value_arc(*x);
                let wv = self.value_arc(*w);
                let width = wv.numel();
                let wf = T::of(width as f64);
                if let Some(gx) = self.acc(*x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let (xr, gr) = (&xv.data()[span.clone()], &g[span.clone()]);
                        let dot: T = xr.iter().zip(gr).zip(wv.data()).map(|((&xi, &gi), &wi)| xi * gi * wi).sum();
                        let coef = dot * inv * inv * inv / wf;
                        for (j, d) in gx[span].iter_mut().enumerate() {
                            *d = *d + gr[j] * wv.data()[j] * inv - xr[j] * coef;
                        }
                    }
                }
                if let Some(gw) = self.acc(*w) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        for ((d, &xi), &gi) in gw.iter_mut().zip(&xv.data()[span.clone()]).zip(&g[span]) {
                            *d = *d + gi * xi * inv;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let width = self.shape(*table)[1];
                if let Some(gt) = self.acc(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &s) in gt[id * width..(id + 1) * width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin } => {
                let shape = self.shape(*x).to_vec();
                let (heads, n, dim) = (shape[0], shape[1], shape[2]);
                let half = dim / 2;
                if let Some(gx) = self.acc(*x) {
                    for h in 0..heads {
                        for r in 0..n {
                            let base_idx = (h * n + r) * dim;
                            for i in 0..half {
                                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                                let (g0, g1) = (g[base_idx + 2 * i], g[base_idx + 2 * i + 1]);
                                gx[base_idx + 2 * i] = gx[base_idx + 2 * i] + g0 * c + g1 * s;
                                gx[base_idx + 2 * i + 1] = gx[base_idx + 2 * i + 1] - g0 * s + g1 * c;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
            }
            Op::SwapAxes01 { x, d0, d1, inner } => {
                let back = swap01(g, *d1, *d0, *inner);
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(&back).for_each(|(d, &s)| *d = *d + s);
                }
            }
            Op::Concat1 { a, b, outer, a_mid, b_mid, inner } => {
                let (outer, a_mid, b_mid, inner) = (*outer, *a_mid, *b_mid, *inner);
                let row = (a_mid + b_mid) * inner;
                if let Some(ga) = self.acc(*a) {
                    for o in 0..outer {
                        let src = &g[o * row..o * row + a_mid * inner];
                        for (d, &s) in ga[o * a_mid * inner..(o + 1) * a_mid * inner].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for o in 0..outer {
                        let src = &g[o * row + a_mid * inner..(o + 1) * row];
                        for (d, &s) in gb[o * b_mid * inner..(o + 1) * b_mid * inner].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, width } => {
                let width = (*width).max(1);
                if let Some(gx) = self.acc(*x) {
                    for ((drow, grow), prow) in gx.chunks_mut(width).zip(g.chunks(width)).zip(out.data().chunks(width)) {
                        let dot: T = grow.iter().zip(prow).map(|(&gi, &pi)| gi * pi).sum();
                        for ((d, &gi), &pi) in drow.iter_mut().zip(grow).zip(prow) {
                            *d = *d + pi * (gi - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = *self.shape(*logits).last().expect("rank >= 1");
                let s = g[0];
                if let Some(gl) = self.acc(*logits) {
                    for (t, &(row, target)) in targets.iter().enumerate() {
                        let p = &probs[t * vocab..(t + 1) * vocab];
                        let dst = &mut gl[row * vocab..(row + 1) * vocab];
                        for (j, (d, &pj)) in dst.iter_mut().zip(p).enumerate() {
                            let onehot = if j == target { T::one() } else { T::zero() };
                            *d = *d + s * (pj - onehot);
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn swap01<T: Copy>(src: &[T], d0: usize, d1: usize, inner: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..d1 {
        for i in 0..d0 {
            let at = (i * d1 + j) * inner;
            out.extend_from_slice(&src[at..at + inner]);
        }
    }
    out
}
