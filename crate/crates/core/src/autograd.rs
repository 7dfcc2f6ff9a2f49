//! Append-only tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly, pushes its result onto the tape and
//! returns a [`Var`] handle. [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients into the bound [`ParamStore`] entries.

use std::collections::HashMap;

use crate::error::{invalid, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{numel_of, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddChannel { x: Var, bias: Var, per_sample: bool },
    MulChannel { x: Var, scale: Var, per_sample: bool },
    Conv2d(Box<ConvRecord>),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax(Var),
    Silu(Var),
    Permute { x: Var, map: Vec<usize> },
    Reshape(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat { parts: Vec<Var>, axis: usize },
    RepeatBatch { x: Var, times: usize },
    Embedding { table: Var, ids: Vec<usize> },
    GroupNorm { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct ConvRecord {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    cols: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    frozen_params: bool,
}

/// `c = a·b (+ beta·c)` for row-major operands, optionally reading `a` or `b` transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the m×k, k×n and m×n extents checked above,
    // and the strides address only elements inside those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn expect_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(Error::shape(op, "rank", a.rank(), b.rank()));
    }
    for (axis, (x, y)) in a.shape().iter().zip(b.shape()).enumerate() {
        if x != y {
            return Err(Error::shape(op, format!("axis {axis}"), x, y));
        }
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters are bound as constants; nothing is differentiated.
    pub fn inference() -> Self {
        Self {
            frozen_params: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(!value.requires_grad() && value.grad().is_none());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to leaf or parameter `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn plain(t: &Tensor) -> Tensor {
        Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor")
    }

    /// Records a non-differentiated input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Self::plain(&t);
        self.push(t, Op::Leaf, false)
    }

    /// Records an input whose gradient is kept after `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let t = Self::plain(&t);
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter, reusing the existing node if it was bound before.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = Self::plain(&store.get(id).tensor);
        let needs = !self.frozen_params;
        let v = self.push(value, Op::Param(id), needs);
        self.params.insert(id, v);
        v
    }

    // ---- elementwise ----------------------------------------------------

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_same(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), n))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let n = self.needs(a);
        self.push(t, Op::Scale(a, s), n)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let n = self.needs(a);
        self.push(t, Op::AddScalar(a), n)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let n = self.needs(a);
        self.push(t, Op::Silu(a), n)
    }

    /// Validates a channel-wise operand: `[C]` shared, or `[B, C]` per sample.
    fn channel_operand(&self, op: &'static str, x: Var, c: Var) -> Result<bool> {
        let xs = self.shape(x);
        let cs = self.shape(c);
        if xs.len() < 2 {
            return Err(Error::shape(op, "rank", ">= 2", xs.len()));
        }
        match cs {
            [ch] if *ch == xs[1] => Ok(false),
            [b, ch] if *b == xs[0] && *ch == xs[1] => Ok(true),
            _ => Err(Error::shape(
                op,
                "channel operand",
                format!("[{}] or [{}, {}]", xs[1], xs[0], xs[1]),
                format!("{cs:?}"),
            )),
        }
    }

    /// `x[b, c, ...] + bias[c]` (or `bias[b, c]`).
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let per_sample = self.channel_operand("add_channel", x, bias)?;
        let xs = self.value(x);
        let (b, c) = (xs.shape()[0], xs.shape()[1]);
        let inner = xs.numel() / (b * c);
        let bv = self.value(bias).data();
        let mut out = xs.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let add = if per_sample { bv[bi * c + ci] } else { bv[ci] };
                let base = (bi * c + ci) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += add);
            }
        }
        let t = Tensor::new(xs.shape(), out)?;
        let n = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddChannel { x, bias, per_sample }, n))
    }

    /// `x[b, c, ...] * scale[c]` (or `scale[b, c]`).
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let per_sample = self.channel_operand("mul_channel", x, scale)?;
        let xs = self.value(x);
        let (b, c) = (xs.shape()[0], xs.shape()[1]);
        let inner = xs.numel() / (b * c);
        let sv = self.value(scale).data();
        let mut out = xs.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let s = if per_sample { sv[bi * c + ci] } else { sv[ci] };
                let base = (bi * c + ci) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v *= s);
            }
        }
        let t = Tensor::new(xs.shape(), out)?;
        let n = self.needs(x) || self.needs(scale);
        Ok(self.push(t, Op::MulChannel { x, scale, per_sample }, n))
    }

    // ---- linear algebra -------------------------------------------------

    /// 2-D convolution of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", "input rank", 4, xs.len()));
        }
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", "weight rank", 4, ws.len()));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape("conv2d", "input channels (axis 1)", ws[1], xs[1]));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(invalid!("conv2d kernel must be odd, got {}x{}", ws[2], ws[3]));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be positive"));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [ws[0]] {
                return Err(Error::shape("conv2d", "bias length", ws[0], format!("{bs:?}")));
            }
        }
        if xs[2] + 2 * pad < ws[2] {
            return Err(Error::shape("conv2d", "height (axis 2)", format!(">= {}", ws[2]), xs[2] + 2 * pad));
        }
        if xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape("conv2d", "width (axis 3)", format!(">= {}", ws[3]), xs[3] + 2 * pad));
        }
        let g = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
        };
        let (k, p) = (g.k(), g.p());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = vec![0.0; g.batch * k * p];
        let mut out = vec![0.0; g.batch * g.cout * p];
        for bi in 0..g.batch {
            let col = &mut cols[bi * k * p..(bi + 1) * k * p];
            im2col(&xv[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w], &g, col);
            let o = &mut out[bi * g.cout * p..(bi + 1) * g.cout * p];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (co, chunk) in o.chunks_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bv[co]);
                }
            }
            gemm(g.cout, k, p, wv, false, col, false, o, if b.is_some() { 1.0 } else { 0.0 });
        }
        let t = Tensor::new(&[g.batch, g.cout, g.ho, g.wo], out)?;
        let n = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let cols = if n { cols } else { Vec::new() };
        Ok(self.push(t, Op::Conv2d(Box::new(ConvRecord { x, w, b, geom: g, cols })), n))
    }

    /// Batched product `[B, M, K] × [B, K, N]`; rank-2 operands are treated as `B = 1`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => {
                if k != k2 {
                    return Err(Error::shape("matmul", "inner dimension", k, k2));
                }
                (1, *m, *k, *n)
            }
            ([b1, m, k], [b2, k2, n]) => {
                if b1 != b2 {
                    return Err(Error::shape("matmul", "batch (axis 0)", b1, b2));
                }
                if k != k2 {
                    return Err(Error::shape("matmul", "inner dimension", k, k2));
                }
                (*b1, *m, *k, *n)
            }
            _ => return Err(Error::shape("matmul", "rank", "2 or 3 on both sides", format!("{sa:?} x {sb:?}"))),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let t = Tensor::new(&shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul { a, b, batch, m, k, n }, needs))
    }

    /// `x[..., K] · w[K, N] + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let Some(&k) = xs.last() else {
            return Err(Error::shape("linear", "input rank", ">= 1", 0));
        };
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape("linear", "weight", format!("[{k}, N]"), format!("{ws:?}")));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("linear", "bias length", n, format!("{:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / k;
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = n;
        let t = Tensor::new(&shape, out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(t, Op::Linear { x, w, b }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let Some(&d) = ta.shape().last() else {
            return Err(Error::shape("softmax", "rank", ">= 1", 0));
        };
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(ta.shape(), out)?;
        let n = self.needs(a);
        Ok(self.push(t, Op::Softmax(a), n))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Self::plain(self.value(a)).reshape(shape)?;
        let n = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), n))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid!("permute {perm:?} is not a permutation of rank {}", shape.len()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel_of(&shape);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        let mut offset = 0usize;
        for _ in 0..total {
            map.push(offset);
            for ax in (0..out_shape.len()).rev() {
                idx[ax] += 1;
                offset += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(&out_shape, data)?;
        let n = self.needs(a);
        Ok(self.push(t, Op::Permute { x: a, map }, n))
    }

    /// 2×2 average pooling over the last two axes.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::shape("avg_pool2", "rank", ">= 2", r));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if h % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("axis {} (height)", r - 2), "even", h));
        }
        if w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("axis {} (width)", r - 1), "even", w));
        }
        let planes = numel_of(&shape) / (h * w);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let s = &src[p * h * w..];
            for i in 0..ho {
                for j in 0..wo {
                    let v = s[2 * i * w + 2 * j] + s[2 * i * w + 2 * j + 1] + s[(2 * i + 1) * w + 2 * j] + s[(2 * i + 1) * w + 2 * j + 1];
                    out[p * ho * wo + i * wo + j] = 0.25 * v;
                }
            }
        }
        let mut os = shape;
        os[r - 2] = ho;
        os[r - 1] = wo;
        let t = Tensor::new(&os, out)?;
        let n = self.needs(a);
        Ok(self.push(t, Op::AvgPool2(a), n))
    }

    /// Nearest-neighbour 2× upsampling over the last two axes.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::shape("upsample2", "rank", ">= 2", r));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = numel_of(&shape) / (h * w);
        let src = self.value(a).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[p * 4 * h * w + i * 2 * w + j] = src[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let mut os = shape;
        os[r - 2] = 2 * h;
        os[r - 1] = 2 * w;
        let t = Tensor::new(&os, out)?;
        let n = self.needs(a);
        Ok(self.push(t, Op::Upsample2(a), n))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| invalid!("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(invalid!("concat axis {axis} out of range for rank {}", first.len()));
        }
        let mut total = 0;
        for (i, &p) in parts.iter().enumerate() {
            let s = self.shape(p);
            if s.len() != first.len() {
                return Err(Error::shape("concat", format!("part {i} rank"), first.len(), s.len()));
            }
            for (ax, (&x, &y)) in first.iter().zip(s).enumerate() {
                if ax != axis && x != y {
                    return Err(Error::shape("concat", format!("part {i} axis {ax}"), x, y));
                }
            }
            total += s[axis];
        }
        let outer = numel_of(&first[..axis]);
        let inner = numel_of(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        let n = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, n))
    }

    /// Repeats each axis-0 slice `times` times consecutively: `[N, ...] -> [N·times, ...]`.
    pub fn repeat_batch(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(invalid!("repeat_batch times must be positive"));
        }
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("repeat_batch", "rank", ">= 1", 0));
        }
        let inner = numel_of(&shape[1..]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len() * times);
        for chunk in src.chunks(inner) {
            for _ in 0..times {
                out.extend_from_slice(chunk);
            }
        }
        let mut os = shape;
        os[0] *= times;
        let t = Tensor::new(&os, out)?;
        let n = self.needs(a);
        Ok(self.push(t, Op::RepeatBatch { x: a, times }, n))
    }

    /// Row lookup in a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", "table rank", 2, ts.len()));
        }
        if ids.is_empty() {
            return Err(invalid!("embedding lookup of zero ids"));
        }
        let (v, d) = (ts[0], ts[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(invalid!("token id {id} out of range for vocabulary of {v}"));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let n = self.needs(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, n))
    }

    /// Normalizes each `(sample, group)` slice of `[B, C, ...]` to zero mean, unit variance.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("group_norm", "rank", ">= 2", shape.len()));
        }
        let (b, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(invalid!("group_norm: {c} channels not divisible into {groups} groups"));
        }
        let m = numel_of(&shape) / (b * groups);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(b * groups);
        for (s, o) in src.chunks(m).zip(out.chunks_mut(m)) {
            let mean = s.iter().sum::<f64>() / m as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (a, &v) in o.iter_mut().zip(s) {
                *a = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(&shape, out)?;
        let n = self.needs(x);
        Ok(self.push(t, Op::GroupNorm { x, inv_std }, n))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let n = self.needs(a);
        self.push(t, Op::Sum(a), n)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let n = self.needs(a);
        self.push(t, Op::Mean(a), n)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same("mse", self.value(a), self.value(b))?;
        let ta = self.value(a).data();
        let tb = self.value(b).data();
        let s: f64 = ta.iter().zip(tb).map(|(x, y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(s / ta.len() as f64);
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mse(a, b), n))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d`loss` back through the tape and adds parameter gradients into `store`.
    ///
    /// Gradients of recorded leaves are available from [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward", "loss", "scalar", format!("{:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            // Intermediate gradients are released as soon as they are consumed.
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                if node.needs_grad {
                    store.get_mut(*id).tensor.accumulate_grad(g);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Silu(a) => {
                let va = val(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, s), &x) in ga.iter_mut().zip(g).zip(va) {
                        let sg = sigmoid(x);
                        *d += s * sg * (1.0 + x * (1.0 - sg));
                    }
                }
            }
            Op::AddChannel { x, bias, per_sample } => {
                let shape = nodes[x.0].value.shape();
                let (b, c) = (shape[0], shape[1]);
                let inner = g.len() / (b * c);
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let s: f64 = g[(bi * c + ci) * inner..(bi * c + ci + 1) * inner].iter().sum();
                            gb[if *per_sample { bi * c + ci } else { ci }] += s;
                        }
                    }
                }
            }
            Op::MulChannel { x, scale, per_sample } => {
                let shape = nodes[x.0].value.shape();
                let (b, c) = (shape[0], shape[1]);
                let inner = g.len() / (b * c);
                let sv = val(*scale);
                let xv = val(*x);
                let idx = |bi: usize, ci: usize| if *per_sample { bi * c + ci } else { ci };
                if let Some(gx) = slot(nodes, grads, *x) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let s = sv[idx(bi, ci)];
                            let r = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
                            gx[r.clone()].iter_mut().zip(&g[r]).for_each(|(d, v)| *d += s * v);
                        }
                    }
                }
                if let Some(gs) = slot(nodes, grads, *scale) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let r = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
                            let s: f64 = g[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum();
                            gs[idx(bi, ci)] += s;
                        }
                    }
                }
            }
            Op::Conv2d(rec) => {
                let ConvRecord { x, w, b, geom, cols } = rec.as_ref();
                let (k, p) = (geom.k(), geom.p());
                if let Some(b) = b {
                    if let Some(gb) = slot(nodes, grads, *b) {
                        for bi in 0..geom.batch {
                            for co in 0..geom.cout {
                                let off = (bi * geom.cout + co) * p;
                                gb[co] += g[off..off + p].iter().sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    for bi in 0..geom.batch {
                        let gy = &g[bi * geom.cout * p..(bi + 1) * geom.cout * p];
                        let col = &cols[bi * k * p..(bi + 1) * k * p];
                        gemm(geom.cout, p, k, gy, false, col, true, gw, 1.0);
                    }
                }
                let wv = nodes[w.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut dcol = vec![0.0; k * p];
                    let plane = geom.cin * geom.h * geom.w;
                    for bi in 0..geom.batch {
                        let gy = &g[bi * geom.cout * p..(bi + 1) * geom.cout * p];
                        gemm(k, geom.cout, p, &wv, true, gy, false, &mut dcol, 0.0);
                        col2im(&dcol, geom, &mut gx[bi * plane..(bi + 1) * plane]);
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let va = val(*a);
                let vb = val(*b);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &vb[bi * k * n..(bi + 1) * k * n],
                            true,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &va[bi * m * k..(bi + 1) * m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = nodes[w.0].value.shape();
                let (k, n) = (ws[0], ws[1]);
                let rows = g.len() / n;
                let xv = val(*x);
                let wv = val(*w);
                if let Some(b) = b {
                    if let Some(gb) = slot(nodes, grads, *b) {
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    }
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    gemm(k, rows, n, &xv, true, g, false, gw, 1.0);
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    gemm(rows, n, k, g, false, &wv, true, gx, 1.0);
                }
            }
            Op::Softmax(a) => {
                let y = &nodes[i].value;
                let d = *y.shape().last().expect("rank >= 1");
                let yv = y.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((dst, gy), yy) in ga.chunks_mut(d).zip(g.chunks(d)).zip(yv.chunks(d)) {
                        let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] += yy[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::Permute { x, map } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (o, &src) in map.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::AvgPool2(a) => {
                let shape = nodes[a.0].value.shape();
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                let (ho, wo) = (h / 2, w / 2);
                if let Some(ga) = slot(nodes, grads, *a) {
                    let planes = ga.len() / (h * w);
                    for p in 0..planes {
                        for i in 0..h {
                            for j in 0..w {
                                ga[p * h * w + i * w + j] += 0.25 * g[p * ho * wo + (i / 2) * wo + j / 2];
                            }
                        }
                    }
                }
            }
            Op::Upsample2(a) => {
                let shape = nodes[a.0].value.shape();
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    let planes = ga.len() / (h * w);
                    for p in 0..planes {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                ga[p * h * w + (i / 2) * w + j / 2] += g[p * 4 * h * w + i * 2 * w + j];
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[i].value.shape();
                let total = out_shape[*axis];
                let outer = numel_of(&out_shape[..*axis]);
                let inner = numel_of(&out_shape[axis + 1..]);
                let mut start = 0;
                for &p in parts {
                    let d = nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = slot(nodes, grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + d) * inner];
                            add_into(&mut gp[o * d * inner..(o + 1) * d * inner], src);
                        }
                    }
                    start += d;
                }
            }
            Op::RepeatBatch { x, times } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let inner = gx.len() / nodes[x.0].value.shape()[0];
                    for (j, chunk) in g.chunks(inner).enumerate() {
                        let n = j / times;
                        add_into(&mut gx[n * inner..(n + 1) * inner], chunk);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::GroupNorm { x, inv_std } => {
                let xhat = nodes[i].value.data();
                let m = xhat.len() / inv_std.len();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (gi, &is) in inv_std.iter().enumerate() {
                        let r = gi * m..(gi + 1) * m;
                        let gy = &g[r.clone()];
                        let xh = &xhat[r.clone()];
                        let sum_g: f64 = gy.iter().sum();
                        let sum_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let mf = m as f64;
                        for ((d, &dy), &xv) in gx[r].iter_mut().zip(gy).zip(xh) {
                            *d += is / mf * (mf * dy - sum_g - xv * sum_gx);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Mse(a, b) => {
                let va = val(*a);
                let vb = val(*b);
                let scale = 2.0 * g[0] / va.len() as f64;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(va).zip(vb) {
                        *d += scale * (x - y);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((d, x), y) in gb.iter_mut().zip(va).zip(vb) {
                        *d -= scale * (x - y);
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
