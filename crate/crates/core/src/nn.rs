//! Minimal reverse-mode differentiation over row-major 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! trainable parameters or constants; `backward` walks the tape in reverse
//! and accumulates gradients only along paths that reach a parameter.
//!
//! The op set is exactly what the velocity predictor needs: fused linear
//! layers, pointwise activations, parameter-free layer norm, adaLN modulation
//! and gating, masked mean pooling, rotary multi-head attention and an MSE
//! reduction.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type with a GEMM kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    /// `C = alpha * A * B + beta * C` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n`, `m x n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    /// Exponential used by activations and softmax.
    fn fast_exp(self) -> Self {
        self.exp()
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn fast_exp(self) -> f32 {
        expf(self)
    }
}

/// Polynomial `exp` for f32 (Cephes coefficients, ~2 ulp on the clamped range).
/// Branch-free so elementwise loops vectorize.
#[inline(always)]
fn expf(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding 1.5 * 2^23 rounds to the nearest integer in the low mantissa bits
    const SHIFTER: f32 = 12_582_912.0;
    let x = x.max(-87.0).min(88.0);
    let z = x * LOG2E + SHIFTER;
    let n = (z.to_bits() as i32).wrapping_sub(0x4B40_0000);
    let fx = z - SHIFTER;
    let r = x - fx * LN2_HI - fx * LN2_LO;
    let mut y = 1.987_569_1e-4f32;
    y = y * r + 1.398_199_9e-3;
    y = y * r + 8.333_452e-3;
    y = y * r + 4.166_579_6e-2;
    y = y * r + 0.166_666_65;
    y = y * r + 0.5;
    y = y * r * r + r + 1.0;
    y * f32::from_bits((n.wrapping_add(127) as u32) << 23)
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn last(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `out[offset..] (strided) = alpha * a * b + beta * out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Scalar>(
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    out: &mut [T],
    out_offset: usize,
    rsc: usize,
    csc: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.last() < a.data.len() || k == 0);
    assert!(b.last() < b.data.len() || k == 0);
    assert!(out_offset + (m - 1) * rsc + (n - 1) * csc < out.len());
    // SAFETY: bounds of all three views were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr().add(out_offset),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn view(&self) -> View<'_, T> {
        View::dense(&self.data, self.rows, self.cols)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Silu(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Modulate { x: Var, shift: Var, scale: Var, group: usize },
    GatedResidual { x: Var, gate: Var, y: Var, group: usize },
    SliceCols { x: Var, start: usize },
    AddConstRows { x: Var },
    MaskedMean { x: Var, weights: Vec<T>, group: usize },
    Attention(Box<AttnCache<T>>),
    Mse { pred: Var, target: Tensor<T> },
}

#[derive(Debug)]
struct AttnCache<T> {
    qkv: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    cos: Vec<T>,
    sin: Vec<T>,
    q_rot: Vec<T>,
    k_rot: Vec<T>,
    probs: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[inline(always)]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).fast_exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU constants, converted once per op.
#[derive(Clone, Copy)]
struct GeluConsts<T> {
    c: T,
    a: T,
    a3: T,
}

impl<T: Scalar> GeluConsts<T> {
    fn new() -> Self {
        Self { c: T::lit(GELU_C), a: T::lit(GELU_A), a3: T::lit(3.0 * GELU_A) }
    }

    // 0.5 * (1 + tanh(u)) == sigmoid(2u); one exp instead of a libm tanh
    #[inline(always)]
    fn value(&self, x: T) -> T {
        let u = self.c * (x + self.a * x * x * x);
        x * sigmoid(u + u)
    }

    #[inline(always)]
    fn grad(&self, x: T) -> T {
        let u = self.c * (x + self.a * x * x * x);
        let s = sigmoid(u + u);
        let du = self.c * (T::one() + self.a3 * x * x);
        s + x * s * (T::one() - s) * (du + du)
    }
}

/// Rotary tables `cos/sin[pos * half + p]` for angle `pos * base^(-2p/dim)`.
pub(crate) fn rope_tables<T: Scalar>(seq: usize, head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for pos in 0..seq {
        for p in 0..half {
            let theta = (pos as f64) * base.powf(-2.0 * p as f64 / head_dim as f64);
            cos.push(T::lit(theta.cos()));
            sin.push(T::lit(theta.sin()));
        }
    }
    (cos, sin)
}

pub const ROPE_BASE: f64 = 10_000.0;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `x * w (+ b)`, with `b` a `1 x m` row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.rows, "linear: {}x{} * {}x{}", xv.rows, xv.cols, wv.rows, wv.cols);
        let (n, m) = (xv.rows, wv.cols);
        let mut out = Tensor::zeros(n, m);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), m, "linear bias width");
            for r in 0..n {
                out.data[r * m..(r + 1) * m].copy_from_slice(&bv.data);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm_into(T::one(), xv.view(), wv.view(), beta, &mut out.data, 0, m, 1);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shape");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::from_vec(xv.rows, xv.cols, data);
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let k = GeluConsts::new();
        let data = xv.data.iter().map(|&v| k.value(v)).collect();
        let out = Tensor::from_vec(xv.rows, xv.cols, data);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise normalization to zero mean and unit variance, no affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let eps = T::lit(1e-6);
        let xv = self.value(x);
        let (n, d) = (xv.rows, xv.cols);
        let dn = T::from_usize(d).unwrap();
        let mut out = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in out.data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, inv_std }, ng)
    }

    /// `x * (1 + scale) + shift`, where `shift`/`scale` hold one row per group
    /// of `group` consecutive rows of `x`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var, group: usize) -> Var {
        let (xv, sh, sc) = (self.value(x), self.value(shift), self.value(scale));
        let d = xv.cols;
        assert_eq!(sh.cols, d);
        assert_eq!(sc.cols, d);
        assert_eq!(xv.rows, sh.rows * group, "modulate grouping");
        let mut out = Tensor::zeros(xv.rows, d);
        for r in 0..xv.rows {
            let g = r / group;
            let (s0, s1) = (sh.row(g), sc.row(g));
            for (j, o) in out.data[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = xv.data[r * d + j] * (T::one() + s1[j]) + s0[j];
            }
        }
        let ng = self.ng(x) || self.ng(shift) || self.ng(scale);
        self.push(out, Op::Modulate { x, shift, scale, group }, ng)
    }

    /// `x + gate * y` with `gate` broadcast over groups of `group` rows.
    pub fn gated_residual(&mut self, x: Var, gate: Var, y: Var, group: usize) -> Var {
        let (xv, gv, yv) = (self.value(x), self.value(gate), self.value(y));
        let d = xv.cols;
        assert_eq!((xv.rows, d), (yv.rows, yv.cols));
        assert_eq!(xv.rows, gv.rows * group);
        let mut out = Tensor::zeros(xv.rows, d);
        for r in 0..xv.rows {
            let g = gv.row(r / group);
            for j in 0..d {
                out.data[r * d + j] = xv.data[r * d + j] + g[j] * yv.data[r * d + j];
            }
        }
        let ng = self.ng(x) || self.ng(gate) || self.ng(y);
        self.push(out, Op::GatedResidual { x, gate, y, group }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols);
        let mut out = Tensor::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Adds constant row `c[r % c.rows]` to every row `r` of `x`.
    pub fn add_const_rows(&mut self, x: Var, c: &Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols, c.cols);
        assert_eq!(xv.rows % c.rows, 0);
        let mut out = xv.clone();
        for r in 0..out.rows {
            let cr = c.row(r % c.rows);
            for (o, &v) in out.data[r * c.cols..(r + 1) * c.cols].iter_mut().zip(cr) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::AddConstRows { x }, ng)
    }

    /// Weighted mean of each group of `group` consecutive rows:
    /// `out[g] = sum_i w_i x_i / sum_i w_i`. Rows with zero weight contribute
    /// nothing, whatever their value.
    pub fn masked_mean(&mut self, x: Var, weights: Vec<T>, group: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(weights.len(), xv.rows);
        assert_eq!(xv.rows % group, 0);
        let d = xv.cols;
        let groups = xv.rows / group;
        let mut out = Tensor::zeros(groups, d);
        let mut norm_w = weights.clone();
        for g in 0..groups {
            let total: T = weights[g * group..(g + 1) * group].iter().copied().sum();
            assert!(total > T::zero(), "masked_mean: empty group");
            for i in 0..group {
                let r = g * group + i;
                let w = weights[r] / total;
                norm_w[r] = w;
                if w == T::zero() {
                    continue;
                }
                for j in 0..d {
                    out.data[g * d + j] += w * xv.data[r * d + j];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaskedMean { x, weights: norm_w, group }, ng)
    }

    /// Multi-head self-attention with rotary position embedding.
    ///
    /// `qkv` is `(batch * seq) x (3 * dim)` holding the query, key and value
    /// projections side by side; the result is `(batch * seq) x dim`.
    pub fn rope_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let qv = self.value(qkv);
        assert_eq!(qv.rows, batch * seq);
        assert_eq!(qv.cols % 3, 0);
        let dim = qv.cols / 3;
        assert_eq!(dim % heads, 0);
        let hd = dim / heads;
        assert_eq!(hd % 2, 0, "rotary embedding needs an even head dimension");
        let half = hd / 2;
        let (cos, sin) = rope_tables::<T>(seq, hd, ROPE_BASE);
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let w3 = 3 * dim;
        let blk = seq * hd;
        let mut q_rot = vec![T::zero(); batch * heads * blk];
        let mut k_rot = vec![T::zero(); batch * heads * blk];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = Tensor::zeros(batch * seq, dim);
        for b in 0..batch {
            for h in 0..heads {
                let bh = b * heads + h;
                let qr = &mut q_rot[bh * blk..(bh + 1) * blk];
                let kr = &mut k_rot[bh * blk..(bh + 1) * blk];
                for s in 0..seq {
                    let row = &qv.data[(b * seq + s) * w3..(b * seq + s + 1) * w3];
                    for p in 0..half {
                        let (c, sn) = (cos[s * half + p], sin[s * half + p]);
                        let qo = h * hd + 2 * p;
                        let (q0, q1) = (row[qo], row[qo + 1]);
                        qr[s * hd + 2 * p] = q0 * c - q1 * sn;
                        qr[s * hd + 2 * p + 1] = q0 * sn + q1 * c;
                        let ko = dim + h * hd + 2 * p;
                        let (k0, k1) = (row[ko], row[ko + 1]);
                        kr[s * hd + 2 * p] = k0 * c - k1 * sn;
                        kr[s * hd + 2 * p + 1] = k0 * sn + k1 * c;
                    }
                }
                let pr = &mut probs[bh * seq * seq..(bh + 1) * seq * seq];
                gemm_into(
                    scale,
                    View::dense(qr, seq, hd),
                    View::dense(kr, seq, hd).t(),
                    T::zero(),
                    pr,
                    0,
                    seq,
                    1,
                );
                for s in 0..seq {
                    let row = &mut pr[s * seq..(s + 1) * seq];
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - mx).fast_exp();
                        z += *v;
                    }
                    for v in row.iter_mut() {
                        *v = *v / z;
                    }
                }
                let v_view = View {
                    data: &qv.data,
                    offset: b * seq * w3 + 2 * dim + h * hd,
                    rows: seq,
                    cols: hd,
                    rs: w3,
                    cs: 1,
                };
                gemm_into(
                    T::one(),
                    View::dense(pr, seq, seq),
                    v_view,
                    T::zero(),
                    &mut out.data,
                    b * seq * dim + h * hd,
                    dim,
                    1,
                );
            }
        }
        let ng = self.ng(qkv);
        let cache = AttnCache { qkv, batch, seq, heads, cos, sin, q_rot, k_rot, probs };
        self.push(out, Op::Attention(Box::new(cache)), ng)
    }

    /// Mean squared error against a constant target, accumulated in f64.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let pv = self.value(pred);
        assert_eq!((pv.rows, pv.cols), (target.rows, target.cols), "mse shape");
        let n = pv.len() as f64;
        let s: f64 = pv
            .data
            .iter()
            .zip(&target.data)
            .map(|(&a, &b)| {
                let d = (a - b).to_f64().unwrap();
                d * d
            })
            .sum();
        let out = Tensor::from_vec(1, 1, vec![T::lit(s / n)]);
        let ng = self.ng(pred);
        self.push(out, Op::Mse { pred, target }, ng)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    gemm_into(T::one(), g.view(), wv.view().t(), T::zero(), &mut dx.data, 0, xv.cols, 1);
                    self.accumulate(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(wv.rows, wv.cols);
                    gemm_into(T::one(), xv.view().t(), g.view(), T::zero(), &mut dw.data, 0, wv.cols, 1);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (d, &v) in db.data.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.rows, xv.cols, data));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let k = GeluConsts::new();
                let data = xv.data.iter().zip(&g.data).map(|(&v, &gv)| gv * k.grad(v)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.rows, xv.cols, data));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let (n, d) = (y.rows, y.cols);
                let dn = T::from_usize(d).unwrap();
                let mut dx = Tensor::zeros(n, d);
                for r in 0..n {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for j in 0..d {
                        dx.data[r * d + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Modulate { x, shift, scale, group } => {
                let (xv, sc) = (self.value(*x), self.value(*scale));
                let d = xv.cols;
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xv.rows, d);
                    for r in 0..xv.rows {
                        let s1 = sc.row(r / group);
                        for j in 0..d {
                            dx.data[r * d + j] = g.data[r * d + j] * (T::one() + s1[j]);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                let need_shift = self.ng(*shift);
                let need_scale = self.ng(*scale);
                if need_shift || need_scale {
                    let mut dsh = Tensor::zeros(sc.rows, d);
                    let mut dsc = Tensor::zeros(sc.rows, d);
                    for r in 0..xv.rows {
                        let gi = r / group;
                        for j in 0..d {
                            let gv = g.data[r * d + j];
                            dsh.data[gi * d + j] += gv;
                            dsc.data[gi * d + j] += gv * xv.data[r * d + j];
                        }
                    }
                    self.accumulate(grads, *shift, dsh);
                    self.accumulate(grads, *scale, dsc);
                }
            }
            Op::GatedResidual { x, gate, y, group } => {
                let (gv, yv) = (self.value(*gate), self.value(*y));
                let d = yv.cols;
                self.accumulate(grads, *x, g.clone());
                if self.ng(*y) {
                    let mut dy = Tensor::zeros(yv.rows, d);
                    for r in 0..yv.rows {
                        let gr = gv.row(r / group);
                        for j in 0..d {
                            dy.data[r * d + j] = g.data[r * d + j] * gr[j];
                        }
                    }
                    self.accumulate(grads, *y, dy);
                }
                if self.ng(*gate) {
                    let mut dg = Tensor::zeros(gv.rows, d);
                    for r in 0..yv.rows {
                        let gi = r / group;
                        for j in 0..d {
                            dg.data[gi * d + j] += g.data[r * d + j] * yv.data[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gate, dg);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let len = g.cols;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    dx.data[r * xv.cols + start..r * xv.cols + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AddConstRows { x } => self.accumulate(grads, *x, g.clone()),
            Op::MaskedMean { x, weights, group } => {
                let xv = self.value(*x);
                let d = xv.cols;
                let mut dx = Tensor::zeros(xv.rows, d);
                for r in 0..xv.rows {
                    let w = weights[r];
                    if w == T::zero() {
                        continue;
                    }
                    let gr = g.row(r / group);
                    for j in 0..d {
                        dx.data[r * d + j] = w * gr[j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let coef = g.data[0] * T::lit(2.0 / pv.len() as f64);
                let data = pv.data.iter().zip(&target.data).map(|(&a, &b)| coef * (a - b)).collect();
                self.accumulate(grads, *pred, Tensor::from_vec(pv.rows, pv.cols, data));
            }
        }
    }

    fn attention_backward(&self, c: &AttnCache<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        if !self.ng(c.qkv) {
            return;
        }
        let qv = self.value(c.qkv);
        let (batch, seq, heads) = (c.batch, c.seq, c.heads);
        let dim = qv.cols / 3;
        let hd = dim / heads;
        let half = hd / 2;
        let w3 = 3 * dim;
        let blk = seq * hd;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mut dqkv = Tensor::zeros(qv.rows, qv.cols);
        let mut dp = vec![T::zero(); seq * seq];
        let mut dq_rot = vec![T::zero(); blk];
        let mut dk_rot = vec![T::zero(); blk];
        for b in 0..batch {
            for h in 0..heads {
                let bh = b * heads + h;
                let pr = &c.probs[bh * seq * seq..(bh + 1) * seq * seq];
                let qr = &c.q_rot[bh * blk..(bh + 1) * blk];
                let kr = &c.k_rot[bh * blk..(bh + 1) * blk];
                let g_view = View {
                    data: &g.data,
                    offset: b * seq * dim + h * hd,
                    rows: seq,
                    cols: hd,
                    rs: dim,
                    cs: 1,
                };
                let v_view = View {
                    data: &qv.data,
                    offset: b * seq * w3 + 2 * dim + h * hd,
                    rows: seq,
                    cols: hd,
                    rs: w3,
                    cs: 1,
                };
                // dV = P^T dO
                gemm_into(
                    T::one(),
                    View::dense(pr, seq, seq).t(),
                    g_view,
                    T::zero(),
                    &mut dqkv.data,
                    b * seq * w3 + 2 * dim + h * hd,
                    w3,
                    1,
                );
                // dP = dO V^T
                gemm_into(T::one(), g_view, v_view.t(), T::zero(), &mut dp, 0, seq, 1);
                for s in 0..seq {
                    let prow = &pr[s * seq..(s + 1) * seq];
                    let drow = &mut dp[s * seq..(s + 1) * seq];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = p * (*d - dot) * scale;
                    }
                }
                gemm_into(T::one(), View::dense(&dp, seq, seq), View::dense(kr, seq, hd), T::zero(), &mut dq_rot, 0, hd, 1);
                gemm_into(
                    T::one(),
                    View::dense(&dp, seq, seq).t(),
                    View::dense(qr, seq, hd),
                    T::zero(),
                    &mut dk_rot,
                    0,
                    hd,
                    1,
                );
                for s in 0..seq {
                    let row = &mut dqkv.data[(b * seq + s) * w3..(b * seq + s + 1) * w3];
                    for p in 0..half {
                        let (cs, sn) = (c.cos[s * half + p], c.sin[s * half + p]);
                        let (a0, a1) = (dq_rot[s * hd + 2 * p], dq_rot[s * hd + 2 * p + 1]);
                        row[h * hd + 2 * p] = a0 * cs + a1 * sn;
                        row[h * hd + 2 * p + 1] = -a0 * sn + a1 * cs;
                        let (k0, k1) = (dk_rot[s * hd + 2 * p], dk_rot[s * hd + 2 * p + 1]);
                        row[dim + h * hd + 2 * p] = k0 * cs + k1 * sn;
                        row[dim + h * hd + 2 * p + 1] = -k0 * sn + k1 * cs;
                    }
                }
            }
        }
        self.accumulate(grads, c.qkv, dqkv);
    }
}
