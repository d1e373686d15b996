//! Tape-based reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! The op set is exactly what the encoder/decoder stack needs: matmul,
//! residual adds, layer norm, GELU, fused multi-head attention (which also
//! stores its softmax maps for later inspection), embedding gathers, row
//! concatenation, and a weighted cross-entropy head. Generic over [`Scalar`]
//! so training runs in f32 while gradient verification runs in f64.

use rand::Rng;
use std::collections::HashMap;

/// Element type of the tape. The gemm hook dispatches to the matching
/// matrixmultiply kernel.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// c = alpha * a(m x k) * b(k x n) + beta * c, with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $exp:expr, $tanh:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                $exp(self)
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                $tanh(self)
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn max(self, other: Self) -> Self {
                if self > other { self } else { other }
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                unsafe {
                    $gemm(
                        m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), rsc, csc,
                    )
                }
            }
        }
    };
}

// f32 uses a branch-free polynomial exp (~2e-7 relative error) that the
// compiler can vectorize; the softmax hot loop spends most of its time here.
// f64 keeps libm so the gradient-check path stays at full precision.
impl_scalar!(f32, matrixmultiply::sgemm, fast_exp_f32, fast_tanh_f32);
impl_scalar!(f64, matrixmultiply::dgemm, f64::exp, f64::tanh);

/// exp(x) = 2^k * e^f with f = x - k ln2, |f| <= ln2/2, e^f by degree-6
/// Taylor, 2^k assembled from the exponent bits. Rounding uses the
/// add-magic-constant trick so the whole body is branch-free SSE2.
#[inline]
fn fast_exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2: f32 = std::f32::consts::LN_2;
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23: adding snaps to integers
    let x = x.clamp(-87.0, 88.0);
    let kf = (x * LOG2E + MAGIC) - MAGIC;
    let f = x - kf * LN2;
    let p = 1.0
        + f * (1.0
            + f * (0.5
                + f * (1.0 / 6.0 + f * (1.0 / 24.0 + f * (1.0 / 120.0 + f * (1.0 / 720.0))))));
    let scale = f32::from_bits((((kf as i32) + 127) << 23) as u32);
    p * scale
}

#[inline]
fn fast_tanh_f32(x: f32) -> f32 {
    if x.abs() > 9.0 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    let e = fast_exp_f32(2.0 * x);
    (e - 1.0) / (e + 1.0)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-gain, gain), drawn in f64 for cross-precision reproducibility.
    Uniform { gain: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamEntry<S> {
    name: String,
    data: Vec<S>,
    rows: usize,
    cols: usize,
}

/// Named, flat storage for every learnable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let data = match init {
            Init::Uniform { gain } => (0..rows * cols)
                .map(|_| S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * gain))
                .collect(),
            Init::Zeros => vec![S::ZERO; rows * cols],
            Init::Ones => vec![S::ONE; rows * cols],
        };
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, data, rows, cols });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        (self.entries[id.0].rows, self.entries[id.0].cols)
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.entries[id.0].data
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Convert every tensor to another scalar type (f32 <-> f64).
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    data: e.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
                    rows: e.rows,
                    cols: e.cols,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-parameter gradient buffers, parallel to a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub by_param: Vec<Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(params: &ParamSet<S>) -> Self {
        Gradients { by_param: params.entries.iter().map(|e| vec![S::ZERO; e.data.len()]).collect() }
    }

    pub fn accumulate(&mut self, other: &Gradients<S>) {
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for buf in &mut self.by_param {
            for x in buf.iter_mut() {
                *x = *x * c;
            }
        }
    }
}

enum Op<S> {
    Leaf { param: Option<usize> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, c: S },
    Gelu { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, stats: Vec<(S, S)> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<S> },
    Gather { table: Var, ids: Vec<usize> },
    Concat { a: Var, b: Var },
    WeightedCe { logits: Var, targets: Vec<usize>, weights: Vec<S>, probs: Vec<S> },
}

struct Node<S> {
    data: Vec<S>,
    rows: usize,
    cols: usize,
    op: Op<S>,
}

/// A single forward computation. Build ops, then call [`Tape::backward`].
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<S>, rows: usize, cols: usize, op: Op<S>) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { data, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Constant input (no gradient routing).
    pub fn input(&mut self, data: Vec<S>, rows: usize, cols: usize) -> Var {
        self.push(data, rows, cols, Op::Leaf { param: None })
    }

    /// Parameter leaf; gradients accumulate into its [`ParamId`] slot.
    pub fn param(&mut self, params: &ParamSet<S>, id: ParamId) -> Var {
        let e = &params.entries[id.0];
        self.push(e.data.clone(), e.rows, e.cols, Op::Leaf { param: Some(id.0) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = vec![S::ZERO; m * n];
        S::gemm(
            m,
            ka,
            n,
            S::ONE,
            &self.nodes[a.0].data,
            ka as isize,
            1,
            &self.nodes[b.0].data,
            n as isize,
            1,
            S::ZERO,
            &mut out,
            n as isize,
            1,
        );
        self.push(out, m, n, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (rows, cols) = self.shape(a);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(data, rows, cols, Op::Add { a, b })
    }

    /// Add a (1 x cols) bias row to every row of a.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "bias shape mismatch");
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.nodes[bias.0].data[c];
            }
        }
        self.push(data, rows, cols, Op::AddRow { a, bias })
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let (rows, cols) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        self.push(data, rows, cols, Op::Scale { a, c })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|&x| gelu(x)).collect();
        self.push(data, rows, cols, Op::Gelu { a })
    }

    /// Row-wise layer norm with affine parameters (each 1 x cols).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(gamma), (1, cols));
        assert_eq!(self.shape(beta), (1, cols));
        let inv_n = S::from_f64(1.0 / cols as f64);
        let eps = S::from_f64(LN_EPS);
        let mut data = vec![S::ZERO; rows * cols];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &self.nodes[a.0].data[r * cols..(r + 1) * cols];
            let mut mean = S::ZERO;
            for &x in row {
                mean += x;
            }
            mean = mean * inv_n;
            let mut var = S::ZERO;
            for &x in row {
                var += (x - mean) * (x - mean);
            }
            var = var * inv_n;
            let inv_std = S::ONE / (var + eps).sqrt();
            stats.push((mean, inv_std));
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv_std;
                data[r * cols + c] =
                    xhat * self.nodes[gamma.0].data[c] + self.nodes[beta.0].data[c];
            }
        }
        self.push(data, rows, cols, Op::LayerNorm { a, gamma, beta, stats })
    }

    /// Multi-head scaled dot-product attention over pre-projected q, k, v.
    /// Softmax maps are retained on the node (see [`Tape::attention_probs`]).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (tq, d) = self.shape(q);
        let (tk, dk) = self.shape(k);
        assert_eq!(d, dk, "q/k width mismatch");
        assert_eq!(self.shape(v), (tk, d), "v shape mismatch");
        assert_eq!(d % heads, 0, "width {d} not divisible by heads {heads}");
        if causal {
            assert_eq!(tq, tk, "causal attention requires square maps");
        }
        let hd = d / heads;
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());
        let mut probs = vec![S::ZERO; heads * tq * tk];
        let mut out = vec![S::ZERO; tq * d];
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[k.0].data;
        let vd = &self.nodes[v.0].data;
        for h in 0..heads {
            let off = h * hd;
            let scores = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            // scores = Qh (tq x hd) * Kh^T (hd x tk)
            S::gemm(
                tq,
                hd,
                tk,
                scale,
                &qd[off..],
                d as isize,
                1,
                &kd[off..],
                1,
                d as isize,
                S::ZERO,
                scores,
                tk as isize,
                1,
            );
            for i in 0..tq {
                let row = &mut scores[i * tk..(i + 1) * tk];
                let limit = if causal { i + 1 } else { tk };
                let mut maxv = row[0];
                for &x in &row[..limit] {
                    maxv = maxv.max(x);
                }
                let mut sum = S::ZERO;
                for x in &mut row[..limit] {
                    *x = (*x - maxv).exp();
                    sum += *x;
                }
                let inv = S::ONE / sum;
                for x in &mut row[..limit] {
                    *x = *x * inv;
                }
                for x in &mut row[limit..] {
                    *x = S::ZERO;
                }
            }
            // out_h = P (tq x tk) * Vh (tk x hd)
            S::gemm(
                tq,
                tk,
                hd,
                S::ONE,
                scores,
                tk as isize,
                1,
                &vd[off..],
                d as isize,
                1,
                S::ZERO,
                &mut out[off..],
                d as isize,
                1,
            );
        }
        self.push(out, tq, d, Op::Attention { q, k, v, heads, probs })
    }

    /// Softmax maps of an attention node: (heads, Tq, Tk) flattened.
    pub fn attention_probs(&self, attn: Var) -> Option<(&[S], usize, usize, usize)> {
        match &self.nodes[attn.0].op {
            Op::Attention { heads, probs, q, k, .. } => {
                let tq = self.nodes[q.0].rows;
                let tk = self.nodes[k.0].rows;
                Some((probs.as_slice(), *heads, tq, tk))
            }
            _ => None,
        }
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let (rows, cols) = self.shape(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in &ids {
            assert!(id < rows, "gather index {id} out of range {rows}");
            data.extend_from_slice(&self.nodes[table.0].data[id * cols..(id + 1) * cols]);
        }
        let n = ids.len();
        self.push(data, n, cols, Op::Gather { table, ids })
    }

    /// Stack a's rows on top of b's rows.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, cb, "concat width mismatch");
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        self.push(data, ra + rb, ca, Op::Concat { a, b })
    }

    /// Weighted token cross entropy:
    /// sum_t w_t * (logsumexp(logits_t) - logits_t[y_t]) / #unmasked,
    /// where w_t == 0 masks a position. Returns a scalar node.
    pub fn weighted_ce(&mut self, logits: Var, targets: &[usize], weights: &[S]) -> Var {
        let (rows, cols) = self.shape(logits);
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let unmasked = weights.iter().filter(|w| w.to_f64() != 0.0).count();
        assert!(unmasked > 0, "all positions masked");
        let inv_n = S::from_f64(1.0 / unmasked as f64);
        let mut probs = vec![S::ZERO; rows * cols];
        let mut loss = S::ZERO;
        for r in 0..rows {
            let row = &self.nodes[logits.0].data[r * cols..(r + 1) * cols];
            let mut maxv = row[0];
            for &x in row {
                maxv = maxv.max(x);
            }
            let mut sum = S::ZERO;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - maxv).exp();
                probs[r * cols + c] = e;
                sum += e;
            }
            let inv_sum = S::ONE / sum;
            for c in 0..cols {
                probs[r * cols + c] = probs[r * cols + c] * inv_sum;
            }
            assert!(targets[r] < cols, "target id {} out of vocab {cols}", targets[r]);
            let log_p = (row[targets[r]] - maxv) - sum.ln();
            loss += weights[r] * -log_p;
        }
        loss = loss * inv_n;
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.push(vec![loss], 1, 1, Op::WeightedCe { logits, targets, weights, probs })
    }

    /// Reverse pass from a scalar loss; gradients land in per-parameter
    /// buffers indexed like `params`.
    pub fn backward(&self, loss: Var, params: &ParamSet<S>) -> Gradients<S> {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);
        let mut out = Gradients::zeros_like(params);

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        for (g, o) in grad.iter().zip(out.by_param[*p].iter_mut()) {
                            *o += *g;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = self.nodes[b.0].cols;
                    {
                        let ga = ensure(&mut grads, a.0, m * k);
                        // dA = dC * B^T
                        S::gemm(
                            m,
                            n,
                            k,
                            S::ONE,
                            &grad,
                            n as isize,
                            1,
                            &self.nodes[b.0].data,
                            1,
                            n as isize,
                            S::ONE,
                            ga,
                            k as isize,
                            1,
                        );
                    }
                    let gb = ensure(&mut grads, b.0, k * n);
                    // dB = A^T * dC
                    S::gemm(
                        k,
                        m,
                        n,
                        S::ONE,
                        &self.nodes[a.0].data,
                        1,
                        k as isize,
                        &grad,
                        n as isize,
                        1,
                        S::ONE,
                        gb,
                        n as isize,
                        1,
                    );
                }
                Op::Add { a, b } => {
                    for v in [a, b] {
                        let g = ensure(&mut grads, v.0, grad.len());
                        for (o, &x) in g.iter_mut().zip(&grad) {
                            *o += x;
                        }
                    }
                }
                Op::AddRow { a, bias } => {
                    let (rows, cols) = (node.rows, node.cols);
                    {
                        let ga = ensure(&mut grads, a.0, rows * cols);
                        for (o, &x) in ga.iter_mut().zip(&grad) {
                            *o += x;
                        }
                    }
                    let gb = ensure(&mut grads, bias.0, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += grad[r * cols + c];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let ga = ensure(&mut grads, a.0, grad.len());
                    for (o, &x) in ga.iter_mut().zip(&grad) {
                        *o += x * *c;
                    }
                }
                Op::Gelu { a } => {
                    let ga = ensure(&mut grads, a.0, grad.len());
                    for (i, (o, &g)) in ga.iter_mut().zip(&grad).enumerate() {
                        *o += g * gelu_grad(self.nodes[a.0].data[i]);
                    }
                }
                Op::LayerNorm { a, gamma, beta, stats } => {
                    let (rows, cols) = (node.rows, node.cols);
                    let inv_n = S::from_f64(1.0 / cols as f64);
                    let gamma_data = &self.nodes[gamma.0].data;
                    let a_data = &self.nodes[a.0].data;
                    {
                        let ga = ensure(&mut grads, a.0, rows * cols);
                        for r in 0..rows {
                            let (mean, inv_std) = stats[r];
                            let dy = &grad[r * cols..(r + 1) * cols];
                            let mut sum_dyg = S::ZERO;
                            let mut sum_dyg_xhat = S::ZERO;
                            for c in 0..cols {
                                let xhat = (a_data[r * cols + c] - mean) * inv_std;
                                let dyg = dy[c] * gamma_data[c];
                                sum_dyg += dyg;
                                sum_dyg_xhat += dyg * xhat;
                            }
                            sum_dyg = sum_dyg * inv_n;
                            sum_dyg_xhat = sum_dyg_xhat * inv_n;
                            for c in 0..cols {
                                let xhat = (a_data[r * cols + c] - mean) * inv_std;
                                let dyg = dy[c] * gamma_data[c];
                                ga[r * cols + c] += (dyg - sum_dyg - xhat * sum_dyg_xhat) * inv_std;
                            }
                        }
                    }
                    {
                        let gg = ensure(&mut grads, gamma.0, cols);
                        for r in 0..rows {
                            let (mean, inv_std) = stats[r];
                            for c in 0..cols {
                                let xhat = (a_data[r * cols + c] - mean) * inv_std;
                                gg[c] += grad[r * cols + c] * xhat;
                            }
                        }
                    }
                    let gb = ensure(&mut grads, beta.0, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += grad[r * cols + c];
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (tq, d) = self.shape(*q);
                    let tk = self.nodes[k.0].rows;
                    let hd = d / heads;
                    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
                    let qd = &self.nodes[q.0].data;
                    let kd = &self.nodes[k.0].data;
                    let vd = &self.nodes[v.0].data;
                    let mut dscores = vec![S::ZERO; tq * tk];
                    for h in 0..*heads {
                        let off = h * hd;
                        let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                        // dV_h += P^T * dOut_h
                        {
                            let gv = ensure(&mut grads, v.0, tk * d);
                            S::gemm(
                                tk,
                                tq,
                                hd,
                                S::ONE,
                                p,
                                1,
                                tk as isize,
                                &grad[off..],
                                d as isize,
                                1,
                                S::ONE,
                                &mut gv[off..],
                                d as isize,
                                1,
                            );
                        }
                        // dP = dOut_h * V_h^T
                        S::gemm(
                            tq,
                            hd,
                            tk,
                            S::ONE,
                            &grad[off..],
                            d as isize,
                            1,
                            &vd[off..],
                            1,
                            d as isize,
                            S::ZERO,
                            &mut dscores,
                            tk as isize,
                            1,
                        );
                        // softmax backward row-wise, then the score scale
                        for i in 0..tq {
                            let prow = &p[i * tk..(i + 1) * tk];
                            let drow = &mut dscores[i * tk..(i + 1) * tk];
                            let mut dot = S::ZERO;
                            for (dp, &pp) in drow.iter().zip(prow) {
                                dot += *dp * pp;
                            }
                            for (dp, &pp) in drow.iter_mut().zip(prow) {
                                *dp = pp * (*dp - dot) * scale;
                            }
                        }
                        // dQ_h += dS * K_h ; dK_h += dS^T * Q_h
                        {
                            let gq = ensure(&mut grads, q.0, tq * d);
                            S::gemm(
                                tq,
                                tk,
                                hd,
                                S::ONE,
                                &dscores,
                                tk as isize,
                                1,
                                &kd[off..],
                                d as isize,
                                1,
                                S::ONE,
                                &mut gq[off..],
                                d as isize,
                                1,
                            );
                        }
                        let gk = ensure(&mut grads, k.0, tk * d);
                        S::gemm(
                            tk,
                            tq,
                            hd,
                            S::ONE,
                            &dscores,
                            1,
                            tk as isize,
                            &qd[off..],
                            d as isize,
                            1,
                            S::ONE,
                            &mut gk[off..],
                            d as isize,
                            1,
                        );
                    }
                }
                Op::Gather { table, ids } => {
                    let cols = node.cols;
                    let gt = ensure(&mut grads, table.0, self.nodes[table.0].data.len());
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] += grad[i * cols + c];
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a.0].data.len();
                    {
                        let ga = ensure(&mut grads, a.0, na);
                        for (o, &x) in ga.iter_mut().zip(&grad[..na]) {
                            *o += x;
                        }
                    }
                    let gb = ensure(&mut grads, b.0, self.nodes[b.0].data.len());
                    for (o, &x) in gb.iter_mut().zip(&grad[na..]) {
                        *o += x;
                    }
                }
                Op::WeightedCe { logits, targets, weights, probs } => {
                    let (rows, cols) = self.shape(*logits);
                    let unmasked = weights.iter().filter(|w| w.to_f64() != 0.0).count();
                    let inv_n = S::from_f64(1.0 / unmasked as f64);
                    let g0 = grad[0];
                    let gl = ensure(&mut grads, logits.0, rows * cols);
                    for r in 0..rows {
                        let w = weights[r] * inv_n * g0;
                        if w.to_f64() == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            let indicator = if c == targets[r] { S::ONE } else { S::ZERO };
                            gl[r * cols + c] += w * (probs[r * cols + c] - indicator);
                        }
                    }
                }
            }
        }
        out
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure<S: Scalar>(grads: &mut [Option<Vec<S>>], idx: usize, len: usize) -> &mut Vec<S> {
    let slot = &mut grads[idx];
    if slot.is_none() {
        *slot = Some(vec![S::ZERO; len]);
    }
    slot.as_mut().unwrap()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (S::ONE + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(
        params: &ParamSet<f64>,
        id: ParamId,
        idx: usize,
        eps: f64,
        f: &dyn Fn(&ParamSet<f64>) -> f64,
    ) -> f64 {
        let mut plus = params.clone();
        plus.data_mut(id)[idx] += eps;
        let mut minus = params.clone();
        minus.data_mut(id)[idx] -= eps;
        (f(&plus) - f(&minus)) / (2.0 * eps)
    }

    /// Check every coordinate of every parameter against central differences.
    fn check_all(
        params: &ParamSet<f64>,
        build: &dyn Fn(&ParamSet<f64>, &mut Tape<f64>) -> Var,
    ) {
        let f = |ps: &ParamSet<f64>| {
            let mut t = Tape::new();
            let v = build(ps, &mut t);
            t.scalar(v)
        };
        let mut tape = Tape::new();
        let loss = build(params, &mut tape);
        let grads = tape.backward(loss, params);
        for id in params.ids() {
            for idx in 0..params.data(id).len() {
                let analytic = grads.by_param[id.0][idx];
                let numeric = fd_grad(params, id, idx, 1e-5, &f);
                let denom = 1.0f64.max(analytic.abs()).max(numeric.abs());
                assert!(
                    (analytic - numeric).abs() / denom < 1e-6,
                    "param {} [{}]: analytic {} vs numeric {}",
                    params.name(id),
                    idx,
                    analytic,
                    numeric
                );
            }
        }
    }

    fn rand_param(
        ps: &mut ParamSet<f64>,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        ps.register(name, rows, cols, Init::Uniform { gain: 0.8 }, rng)
    }

    #[test]
    fn grad_matmul_gelu_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let w1 = rand_param(&mut ps, "w1", 3, 4, &mut rng);
        let w2 = rand_param(&mut ps, "w2", 4, 2, &mut rng);
        let b = rand_param(&mut ps, "b", 1, 2, &mut rng);
        let build = move |ps: &ParamSet<f64>, tape: &mut Tape<f64>| {
            let x = tape.input(vec![0.3, -0.2, 0.5, 0.9, -0.8, 0.1], 2, 3);
            let a = tape.param(ps, w1);
            let bb = tape.param(ps, w2);
            let bias = tape.param(ps, b);
            let h = tape.matmul(x, a);
            let h = tape.gelu(h);
            let o = tape.matmul(h, bb);
            let o = tape.add_row(o, bias);
            tape.weighted_ce(o, &[1, 0], &[1.0, 10.0])
        };
        check_all(&ps, &build);
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let w = rand_param(&mut ps, "w", 3, 4, &mut rng);
        let g = rand_param(&mut ps, "g", 1, 4, &mut rng);
        let b = rand_param(&mut ps, "b", 1, 4, &mut rng);
        let wo = rand_param(&mut ps, "wo", 4, 2, &mut rng);
        let build = move |ps: &ParamSet<f64>, tape: &mut Tape<f64>| {
            let x = tape.input(vec![0.1, 0.7, -0.4, 0.2, 0.9, -0.5], 2, 3);
            let w = tape.param(ps, w);
            let g = tape.param(ps, g);
            let b = tape.param(ps, b);
            let wo = tape.param(ps, wo);
            let h = tape.matmul(x, w);
            let h = tape.layer_norm(h, g, b);
            let o = tape.matmul(h, wo);
            tape.weighted_ce(o, &[0, 1], &[1.0, 1.0])
        };
        check_all(&ps, &build);
    }

    #[test]
    fn grad_attention_both_masks() {
        for causal in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut ps = ParamSet::new();
            let wq = rand_param(&mut ps, "wq", 4, 4, &mut rng);
            let wk = rand_param(&mut ps, "wk", 4, 4, &mut rng);
            let wv = rand_param(&mut ps, "wv", 4, 4, &mut rng);
            let wo = rand_param(&mut ps, "wo", 4, 2, &mut rng);
            let build = move |ps: &ParamSet<f64>, tape: &mut Tape<f64>| {
                let x = tape.input(
                    vec![0.2, -0.1, 0.4, 0.3, -0.6, 0.5, 0.1, -0.2, 0.7, 0.0, -0.3, 0.9],
                    3,
                    4,
                );
                let q = tape.param(ps, wq);
                let k = tape.param(ps, wk);
                let v = tape.param(ps, wv);
                let o = tape.param(ps, wo);
                let qx = tape.matmul(x, q);
                let kx = tape.matmul(x, k);
                let vx = tape.matmul(x, v);
                let a = tape.attention(qx, kx, vx, 2, causal);
                let out = tape.matmul(a, o);
                tape.weighted_ce(out, &[0, 1, 0], &[1.0, 2.0, 1.0])
            };
            check_all(&ps, &build);
        }
    }

    #[test]
    fn grad_gather_concat_masked_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let table = rand_param(&mut ps, "table", 5, 3, &mut rng);
        let wo = rand_param(&mut ps, "wo", 3, 2, &mut rng);
        let build = move |ps: &ParamSet<f64>, tape: &mut Tape<f64>| {
            let t = tape.param(ps, table);
            let a = tape.gather(t, vec![0, 2, 2]);
            let b = tape.gather(t, vec![4, 1]);
            let x = tape.concat_rows(a, b);
            let w = tape.param(ps, wo);
            let o = tape.matmul(x, w);
            tape.weighted_ce(o, &[0, 1, 1, 0, 1], &[1.0, 1.0, 0.0, 2.0, 1.0])
        };
        check_all(&ps, &build);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape: Tape<f64> = Tape::new();
        let q = tape.input((0..12).map(|_| rng.gen::<f64>() - 0.5).collect(), 3, 4);
        let k = tape.input((0..20).map(|_| rng.gen::<f64>() - 0.5).collect(), 5, 4);
        let v = tape.input((0..20).map(|_| rng.gen::<f64>() - 0.5).collect(), 5, 4);
        let a = tape.attention(q, k, v, 2, false);
        let (probs, heads, tq, tk) = tape.attention_probs(a).unwrap();
        for h in 0..heads {
            for i in 0..tq {
                let sum: f64 = probs[h * tq * tk + i * tk..h * tq * tk + (i + 1) * tk].iter().sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn singleton_kv_gives_unit_attention() {
        let mut tape: Tape<f64> = Tape::new();
        let q = tape.input(vec![0.5, -0.5, 0.25, 0.1], 2, 2);
        let k = tape.input(vec![0.3, 0.7], 1, 2);
        let v = tape.input(vec![1.5, -2.5], 1, 2);
        let a = tape.attention(q, k, v, 1, false);
        let (probs, _, tq, tk) = tape.attention_probs(a).unwrap();
        assert_eq!((tq, tk), (2, 1));
        assert!(probs.iter().all(|&p| p == 1.0));
        assert_eq!(tape.data(a), &[1.5, -2.5, 1.5, -2.5]);
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape: Tape<f64> = Tape::new();
        let x: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
        let q = tape.input(x.clone(), 4, 4);
        let k = tape.input(x.clone(), 4, 4);
        let v = tape.input(x, 4, 4);
        let a = tape.attention(q, k, v, 2, true);
        let (probs, heads, tq, tk) = tape.attention_probs(a).unwrap();
        for h in 0..heads {
            for i in 0..tq {
                for j in i + 1..tk {
                    assert_eq!(probs[h * tq * tk + i * tk + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn uniform_ce_is_log_vocab() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.input(vec![0.0; 2 * 351], 2, 351);
        let loss = tape.weighted_ce(logits, &[5, 100], &[1.0, 1.0]);
        assert!((tape.scalar(loss) - (351f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn f32_and_f64_losses_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let w = rand_param(&mut ps, "w", 4, 4, &mut rng);
        let mut t64: Tape<f64> = Tape::new();
        let x = t64.input(vec![0.25; 8], 2, 4);
        let p = t64.param(&ps, w);
        let h = t64.matmul(x, p);
        let h = t64.gelu(h);
        let l = t64.weighted_ce(h, &[0, 3], &[1.0, 1.0]);

        let ps32 = ps.cast::<f32>();
        let mut t32: Tape<f32> = Tape::new();
        let x2 = t32.input(vec![0.25f32; 8], 2, 4);
        let p2 = t32.param(&ps32, w);
        let h2 = t32.matmul(x2, p2);
        let h2 = t32.gelu(h2);
        let l2 = t32.weighted_ce(h2, &[0, 3], &[1.0, 1.0]);
        assert!((t64.scalar(l) - f64::from(t32.scalar(l2))).abs() < 1e-5);
    }
}
