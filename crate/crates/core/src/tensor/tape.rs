use super::kernels::{self, ConvGeometry, KSIZE};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    PowScalar,
    MinScalar,
    MaxScalar,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Softplus,
    MatMul,
    BatchMatMul,
    BatchGram,
    Transpose,
    Conv2d,
    MaxPool2,
    AvgPool2,
    AdaptiveAvgPool,
    GlobalAvgPool,
    SumAll,
    SumAxis,
    BatchTrace,
    ScaleItems,
    AddRowBias,
    ChannelAffine,
    Reshape,
    Gather,
    Concat,
    SegmentSum,
    LogSoftmax,
}

impl OpKind {
    pub const ALL: [OpKind; 35] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddScalar,
        OpKind::MulScalar,
        OpKind::PowScalar,
        OpKind::MinScalar,
        OpKind::MaxScalar,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::BatchGram,
        OpKind::Transpose,
        OpKind::Conv2d,
        OpKind::MaxPool2,
        OpKind::AvgPool2,
        OpKind::AdaptiveAvgPool,
        OpKind::GlobalAvgPool,
        OpKind::SumAll,
        OpKind::SumAxis,
        OpKind::BatchTrace,
        OpKind::ScaleItems,
        OpKind::AddRowBias,
        OpKind::ChannelAffine,
        OpKind::Reshape,
        OpKind::Gather,
        OpKind::Concat,
        OpKind::SegmentSum,
        OpKind::LogSoftmax,
    ];
}

/// Accepts `MinScalar`, `min_scalar` or `minscalar`.
impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let want = s.replace('_', "").to_lowercase();
        OpKind::ALL
            .into_iter()
            .find(|k| format!("{k:?}").to_lowercase() == want)
            .ok_or_else(|| Error::Config(format!("unknown op kind `{s}`")))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    MinScalar(Var, f64),
    MaxScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    BatchGram(Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        batch: usize,
        c_out: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    AdaptiveAvgPool {
        input: Var,
        out: usize,
    },
    GlobalAvgPool(Var),
    SumAll(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    BatchTrace(Var),
    ScaleItems(Var, Var),
    AddRowBias(Var, Var),
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    Reshape(Var),
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SegmentSum {
        input: Var,
        segment: Vec<usize>,
    },
    LogSoftmax(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::PowScalar(..) => OpKind::PowScalar,
            Op::MinScalar(..) => OpKind::MinScalar,
            Op::MaxScalar(..) => OpKind::MaxScalar,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Softplus(..) => OpKind::Softplus,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::BatchGram(..) => OpKind::BatchGram,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::AvgPool2(..) => OpKind::AvgPool2,
            Op::AdaptiveAvgPool { .. } => OpKind::AdaptiveAvgPool,
            Op::GlobalAvgPool(..) => OpKind::GlobalAvgPool,
            Op::SumAll(..) => OpKind::SumAll,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::BatchTrace(..) => OpKind::BatchTrace,
            Op::ScaleItems(..) => OpKind::ScaleItems,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Gather { .. } => OpKind::Gather,
            Op::Concat { .. } => OpKind::Concat,
            Op::SegmentSum { .. } => OpKind::SegmentSum,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::ScaleItems(a, b)
            | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::MinScalar(a, _)
            | Op::MaxScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::BatchGram(a)
            | Op::Transpose(a)
            | Op::AvgPool2(a)
            | Op::GlobalAvgPool(a)
            | Op::SumAll(a)
            | Op::BatchTrace(a)
            | Op::Reshape(a)
            | Op::LogSoftmax(a) => vec![*a],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::MaxPool2 { input, .. }
            | Op::AdaptiveAvgPool { input, .. }
            | Op::SumAxis { input, .. }
            | Op::Gather { input, .. }
            | Op::SegmentSum { input, .. } => vec![*input],
            Op::ChannelAffine {
                input,
                scale,
                shift,
            } => vec![*input, *scale, *shift],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations in execution order.
///
/// Parents always precede their children, so a single reverse sweep over the
/// node list is a valid topological traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Accumulated gradients of leaf nodes, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Negates every backward contribution of `kind`. Used only to prove that
    /// the gradient checks catch a broken backward rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Parent indices of every node, in recording order.
    pub fn parent_lists(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .map(|n| n.op.parents().into_iter().map(Var::index).collect())
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let v = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        let integral = p.fract() == 0.0;
        for &x in self.value(a).data() {
            if x < 0.0 && !integral {
                return Err(Error::Domain(format!("{x}^{p} is not real")));
            }
            if x == 0.0 && p < 0.0 {
                return Err(Error::Domain(format!("0^{p} is undefined")));
            }
        }
        Ok(self.unary(a, |x| x.powf(p), Op::PowScalar(a, p)))
    }

    /// Elementwise `min(a, c)`. At a tie the gradient flows to `a`.
    pub fn min_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x.min(c), Op::MinScalar(a, c))
    }

    /// Elementwise `max(a, c)`. At a tie the gradient flows to `a`.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x.max(c), Op::MaxScalar(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim(format!(
                "matmul expects matrices, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Per-item matrix product of `[B, m, k]` and `[B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[ba, m, k], &[bb, k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim("batch_matmul expects rank-3 operands"));
        };
        if ba != bb || k != k2 {
            return Err(Error::dim(format!(
                "batch_matmul shapes {:?} and {:?} are incompatible",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            kernels::gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![ba, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul(a, b)))
    }

    /// `X Xᵀ` for a `[K, N]` matrix or each item of a `[B, K, N]` batch.
    pub fn batch_gram(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, k, n) = match *t.shape() {
            [k, n] => (1, k, n),
            [b, k, n] => (b, k, n),
            _ => return Err(Error::dim("gram expects a [K,N] or [B,K,N] tensor")),
        };
        let mut out = vec![0.0; b * k * k];
        for i in 0..b {
            let xi = &t.data()[i * k * n..(i + 1) * k * n];
            kernels::gemm(k, n, k, xi, false, xi, true, 0.0, &mut out[i * k * k..(i + 1) * k * k]);
        }
        let shape = if t.rank() == 2 { vec![k, k] } else { vec![b, k, k] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BatchGram(x)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    // ---- convolution and pooling ----------------------------------------

    /// 3×3 cross-correlation (no kernel flip). `input` is `[C, H, W]` or
    /// `[B, C, H, W]`; `kernel` is `[C_out, C_in, 3, 3]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let (batch, c_in, h, w) = match *ti.shape() {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::dim("conv2d expects [C,H,W] or [B,C,H,W] input")),
        };
        let &[c_out, kc, kh, kw] = tk.shape() else {
            return Err(Error::dim("conv2d kernel must be [C_out, C_in, 3, 3]"));
        };
        if kc != c_in || kh != KSIZE || kw != KSIZE {
            return Err(Error::dim(format!(
                "kernel {:?} does not match {c_in} input channels with a 3x3 window",
                tk.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if h + 2 * padding < KSIZE || w + 2 * padding < KSIZE {
            return Err(Error::dim(format!(
                "3x3 kernel larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            stride,
            padding,
            h_out: (h + 2 * padding - KSIZE) / stride + 1,
            w_out: (w + 2 * padding - KSIZE) / stride + 1,
        };
        let (in_len, hw_out, rows) = (c_in * h * w, geom.cols_len(), geom.cols_rows());
        let chunk = kernels::images_per_chunk(&geom).min(batch);
        let mut cols = vec![0.0; rows * chunk * hw_out];
        let mut prod = vec![0.0; c_out * chunk * hw_out];
        let mut out = vec![0.0; batch * c_out * hw_out];
        for start in (0..batch).step_by(chunk) {
            let nb = chunk.min(batch - start);
            let ld = nb * hw_out;
            for j in 0..nb {
                let b = start + j;
                kernels::im2col(&ti.data()[b * in_len..(b + 1) * in_len], &geom, &mut cols, ld, j * hw_out);
            }
            kernels::gemm(c_out, rows, ld, tk.data(), false, &cols[..rows * ld], false, 0.0, &mut prod[..c_out * ld]);
            for j in 0..nb {
                for o in 0..c_out {
                    let dst = ((start + j) * c_out + o) * hw_out;
                    out[dst..dst + hw_out].copy_from_slice(&prod[o * ld + j * hw_out..o * ld + (j + 1) * hw_out]);
                }
            }
        }
        let shape = if ti.rank() == 3 {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, c_out, geom.h_out, geom.w_out]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                c_out,
            },
        ))
    }

    fn spatial(&self, a: Var, name: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(Error::dim(format!("{name} needs at least two spatial dimensions")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((s[..s.len() - 2].iter().product(), h, w))
    }

    /// 2×2 max-pooling with stride 2 over the last two dimensions (floor mode).
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let (planes, h, w) = self.spatial(a, "max_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::dim(format!("max_pool2 on {h}x{w} collapses to nothing")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MaxPool2 { input: a, argmax }))
    }

    /// 2×2 average pooling with stride 2 (ceil mode: edge windows average the
    /// pixels that exist).
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (planes, h, w) = self.spatial(a, "avg_pool2")?;
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let src = self.value(a).data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (mut sum, mut cnt) = (0.0, 0.0);
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for x in 2 * ox..(2 * ox + 2).min(w) {
                            sum += src[p * h * w + y * w + x];
                            cnt += 1.0;
                        }
                    }
                    out[p * ho * wo + oy * wo + ox] = sum / cnt;
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::AvgPool2(a)))
    }

    /// Average pooling of the last two dimensions onto an `out`×`out` grid.
    /// Bin `i` of a side of length `h` covers `[⌊ih/out⌋, ⌈(i+1)h/out⌉)`.
    pub fn adaptive_avg_pool(&mut self, a: Var, out: usize) -> Result<Var> {
        let (planes, h, w) = self.spatial(a, "adaptive_avg_pool")?;
        if out == 0 || h == 0 || w == 0 {
            return Err(Error::dim("adaptive_avg_pool needs a nonempty input and grid"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(planes * out * out);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..out {
                let ys = adaptive_bin(oy, out, h);
                for ox in 0..out {
                    let xs = adaptive_bin(ox, out, w);
                    let cnt = (ys.len() * xs.len()) as f64;
                    let sum: f64 = ys
                        .clone()
                        .flat_map(|y| plane[y * w + xs.start..y * w + xs.end].iter())
                        .sum();
                    data.push(sum / cnt);
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        let r = shape.len();
        shape[r - 2] = out;
        shape[r - 1] = out;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::AdaptiveAvgPool { input: a, out }))
    }

    /// Mean over the last two dimensions.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (planes, h, w) = self.spatial(a, "global_avg_pool")?;
        let hw = h * w;
        let src = self.value(a).data();
        let out = (0..planes)
            .map(|p| src[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let s = self.shape(a);
        let value = Tensor::new(s[..s.len() - 2].to_vec(), out)?;
        Ok(self.push(value, Op::GlobalAvgPool(a)))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} invalid for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::SumAxis { input: a, axis }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let dim = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::dim(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.mul_scalar(s, 1.0 / dim as f64))
    }

    /// Trace of a `[K, K]` matrix (scalar result) or of every item of `[B, K, K]`.
    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (b, k, shape) = match *t.shape() {
            [k, k2] if k == k2 => (1, k, vec![]),
            [b, k, k2] if k == k2 => (b, k, vec![b]),
            _ => return Err(Error::dim(format!("trace of non-square {:?}", t.shape()))),
        };
        let out = (0..b)
            .map(|i| (0..k).map(|j| t.data()[i * k * k + j * k + j]).sum())
            .collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BatchTrace(a)))
    }

    // ---- broadcasting helpers -----------------------------------------------

    /// Multiplies item `i` of `a` (leading axis) by `s[i]`.
    pub fn scale_items(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let items = ts.numel();
        let lead = if ta.rank() == 0 { 1 } else { ta.shape()[0] };
        let scalar_pair = ta.rank() <= 2 && ts.rank() == 0;
        if !scalar_pair && (ts.rank() != 1 || lead != items) {
            return Err(Error::dim(format!(
                "scale_items: {:?} cannot be scaled per item by {:?}",
                ta.shape(),
                ts.shape()
            )));
        }
        let per = ta.numel() / items.max(1);
        let data = ta
            .data()
            .chunks(per.max(1))
            .zip(ts.data())
            .flat_map(|(chunk, &k)| chunk.iter().map(move |x| x * k))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ScaleItems(a, s)))
    }

    /// Adds `bias[F]` to every row of `a[.., F]`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let f = *ta.shape().last().unwrap_or(&0);
        if tb.shape() != [f] {
            return Err(Error::dim(format!(
                "bias {:?} does not match rows of {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let data = ta
            .data()
            .chunks(f.max(1))
            .flat_map(|row| row.iter().zip(tb.data()).map(|(x, b)| x + b))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRowBias(a, bias)))
    }

    /// `x[b, c, ..] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(Error::dim("channel_affine needs [B, C, ..] input"));
        }
        let c = tx.shape()[1];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::dim(format!("channel_affine expects [{c}] scale and shift")));
        }
        let inner: usize = tx.shape()[2..].iter().product();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut data = tx.data().to_vec();
        if inner > 0 {
            for (i, plane) in data.chunks_mut(inner).enumerate() {
                let (a, b) = (sc[i % c], sh[i % c]);
                plane.iter_mut().for_each(|v| *v = *v * a + b);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ChannelAffine { input: x, scale, shift }))
    }

    // ---- structural ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Selects items along the leading axis; indices may repeat.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let Some(&lead) = t.shape().first() else {
            return Err(Error::dim("gather on a scalar"));
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= lead) {
            return Err(Error::dim(format!("gather index {bad} out of range {lead}")));
        }
        let per = t.numel() / lead.max(1);
        let mut data = Vec::with_capacity(index.len() * per);
        for &i in index {
            data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                input: a,
                index: index.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} invalid for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(Error::dim(format!("concat: {s:?} incompatible with {base:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                data.extend_from_slice(&self.value(p).data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Sums items of the leading axis into `num_segments` buckets.
    pub fn segment_sum(&mut self, a: Var, segment: &[usize], num_segments: usize) -> Result<Var> {
        let t = self.value(a);
        let Some(&lead) = t.shape().first() else {
            return Err(Error::dim("segment_sum on a scalar"));
        };
        if segment.len() != lead {
            return Err(Error::dim(format!(
                "segment_sum: {} ids for {lead} items",
                segment.len()
            )));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= num_segments) {
            return Err(Error::dim(format!("segment id {bad} >= {num_segments}")));
        }
        let per = t.numel() / lead.max(1);
        let mut data = vec![0.0; num_segments * per];
        for (i, &s) in segment.iter().enumerate() {
            for (acc, v) in data[s * per..(s + 1) * per]
                .iter_mut()
                .zip(&t.data()[i * per..(i + 1) * per])
            {
                *acc += v;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = num_segments;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::SegmentSum {
                input: a,
                segment: segment.to_vec(),
            },
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some(&c) = t.shape().last() else {
            return Err(Error::dim("log_softmax on a scalar"));
        };
        if c == 0 {
            return Err(Error::dim("log_softmax over an empty axis"));
        }
        let data = t
            .data()
            .chunks(c)
            .flat_map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row.iter().map(move |x| x - lse)
            })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(a)))
    }

    // ---- reverse sweep ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape; every leaf
    /// that requires a gradient and influences `loss` receives one.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes, fault } = self;
        let lnode = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("loss is not on this tape".into()))?;
        if lnode.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lnode.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            propagate(&nodes, &mut grads, node, &g);
        }
        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn adaptive_bin(i: usize, out: usize, len: usize) -> std::ops::Range<usize> {
    (i * len) / out..((i + 1) * len).div_ceil(out)
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn accumulate_map(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if let Some(dst) = slot(grads, nodes, v) {
        for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(i, gi);
        }
    }
}

/// Like [`accumulate_map`] for ops whose output is smaller than the input.
fn accumulate_with(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl Fn(usize) -> f64) {
    if let Some(dst) = slot(grads, nodes, v) {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += f(i);
        }
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_map(grads, nodes, *a, g, |_, gi| gi);
            accumulate_map(grads, nodes, *b, g, |_, gi| gi);
        }
        Op::Sub(a, b) => {
            accumulate_map(grads, nodes, *a, g, |_, gi| gi);
            accumulate_map(grads, nodes, *b, g, |_, gi| -gi);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate_map(grads, nodes, *a, g, |i, gi| gi * vb[i]);
            accumulate_map(grads, nodes, *b, g, |i, gi| gi * va[i]);
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate_map(grads, nodes, *a, g, |i, gi| gi / vb[i]);
            accumulate_map(grads, nodes, *b, g, |i, gi| -gi * va[i] / (vb[i] * vb[i]));
        }
        Op::AddScalar(a) => accumulate_map(grads, nodes, *a, g, |_, gi| gi),
        Op::MulScalar(a, c) => accumulate_map(grads, nodes, *a, g, |_, gi| gi * c),
        Op::PowScalar(a, p) => {
            let va = val(*a);
            accumulate_map(grads, nodes, *a, g, |i, gi| gi * p * va[i].powf(p - 1.0));
        }
        Op::MinScalar(a, c) => {
            let va = val(*a);
            accumulate_map(grads, nodes, *a, g, |i, gi| if va[i] <= *c { gi } else { 0.0 });
        }
        Op::MaxScalar(a, c) => {
            let va = val(*a);
            accumulate_map(grads, nodes, *a, g, |i, gi| if va[i] >= *c { gi } else { 0.0 });
        }
        Op::Exp(a) => accumulate_map(grads, nodes, *a, g, |i, gi| gi * out[i]),
        Op::Log(a) => {
            let va = val(*a);
            accumulate_map(grads, nodes, *a, g, |i, gi| gi / va[i]);
        }
        Op::Relu(a) => {
            let va = val(*a);
            accumulate_map(grads, nodes, *a, g, |i, gi| if va[i] > 0.0 { gi } else { 0.0 });
        }
        Op::Sigmoid(a) => accumulate_map(grads, nodes, *a, g, |i, gi| gi * out[i] * (1.0 - out[i])),
        Op::Softplus(a) => {
            let va = val(*a);
            accumulate_map(grads, nodes, *a, g, |i, gi| gi * kernels::sigmoid(va[i]));
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(*a), val(*b));
            if let Some(da) = slot(grads, nodes, *a) {
                kernels::gemm(m, n, k, g, false, vb, true, 1.0, da);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                kernels::gemm(k, m, n, va, true, g, false, 1.0, db);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (va, vb) = (val(*a), val(*b));
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..bn {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &vb[i * k * n..(i + 1) * k * n],
                        true,
                        1.0,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for i in 0..bn {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &va[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        1.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        }
        Op::BatchGram(x) => {
            let s = nodes[x.0].value.shape();
            let (b, k, n) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
            let vx = val(*x);
            if let Some(dx) = slot(grads, nodes, *x) {
                let mut sym = vec![0.0; k * k];
                for i in 0..b {
                    let gi = &g[i * k * k..(i + 1) * k * k];
                    for r in 0..k {
                        for c in 0..k {
                            sym[r * k + c] = gi[r * k + c] + gi[c * k + r];
                        }
                    }
                    kernels::gemm(
                        k,
                        k,
                        n,
                        &sym,
                        false,
                        &vx[i * k * n..(i + 1) * k * n],
                        false,
                        1.0,
                        &mut dx[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        }
        Op::Transpose(a) => {
            let s = nodes[a.0].value.shape();
            let (r, c) = (s[0], s[1]);
            accumulate_map(grads, nodes, *a, g, |idx, _| {
                let (i, j) = (idx / c, idx % c);
                g[j * r + i]
            });
        }
        Op::Conv2d {
            input,
            kernel,
            geom,
            batch,
            c_out,
        } => {
            let (vi, vk) = (val(*input), val(*kernel));
            let (in_len, hw_out, rows) = (geom.c_in * geom.h * geom.w, geom.cols_len(), geom.cols_rows());
            let chunk = kernels::images_per_chunk(geom).min(*batch);
            let want_k = nodes[kernel.0].requires_grad;
            let want_i = nodes[input.0].requires_grad;
            let mut dk = want_k.then(|| vec![0.0; vk.len()]);
            let mut di = want_i.then(|| vec![0.0; vi.len()]);
            let mut cols = vec![0.0; rows * chunk * hw_out];
            let mut gperm = vec![0.0; c_out * chunk * hw_out];
            for start in (0..*batch).step_by(chunk) {
                let nb = chunk.min(batch - start);
                let ld = nb * hw_out;
                for j in 0..nb {
                    for o in 0..*c_out {
                        let src = ((start + j) * c_out + o) * hw_out;
                        gperm[o * ld + j * hw_out..o * ld + (j + 1) * hw_out].copy_from_slice(&g[src..src + hw_out]);
                    }
                }
                let gp = &gperm[..c_out * ld];
                if let Some(dk) = dk.as_mut() {
                    for j in 0..nb {
                        let b = start + j;
                        kernels::im2col(&vi[b * in_len..(b + 1) * in_len], geom, &mut cols, ld, j * hw_out);
                    }
                    kernels::gemm(*c_out, ld, rows, gp, false, &cols[..rows * ld], true, 1.0, dk);
                }
                if let Some(di) = di.as_mut() {
                    kernels::gemm(rows, *c_out, ld, vk, true, gp, false, 0.0, &mut cols[..rows * ld]);
                    for j in 0..nb {
                        let b = start + j;
                        kernels::col2im_add(&cols, geom, &mut di[b * in_len..(b + 1) * in_len], ld, j * hw_out);
                    }
                }
            }
            if let Some(dk) = dk {
                accumulate_map(grads, nodes, *kernel, &dk, |_, x| x);
            }
            if let Some(di) = di {
                accumulate_map(grads, nodes, *input, &di, |_, x| x);
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if let Some(dst) = slot(grads, nodes, *input) {
                for (&src, &gi) in argmax.iter().zip(g) {
                    dst[src] += gi;
                }
            }
        }
        Op::AvgPool2(a) => {
            let s = nodes[a.0].value.shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
            let planes = nodes[a.0].value.numel() / (h * w).max(1);
            if let Some(dst) = slot(grads, nodes, *a) {
                for p in 0..planes {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let ys = 2 * oy..(2 * oy + 2).min(h);
                            let xs = 2 * ox..(2 * ox + 2).min(w);
                            let cnt = (ys.len() * xs.len()) as f64;
                            let gi = g[p * ho * wo + oy * wo + ox] / cnt;
                            for y in ys {
                                for x in xs.clone() {
                                    dst[p * h * w + y * w + x] += gi;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::AdaptiveAvgPool { input, out } => {
            let s = nodes[input.0].value.shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = nodes[input.0].value.numel() / (h * w);
            let out = *out;
            if let Some(dst) = slot(grads, nodes, *input) {
                for p in 0..planes {
                    for oy in 0..out {
                        let ys = adaptive_bin(oy, out, h);
                        for ox in 0..out {
                            let xs = adaptive_bin(ox, out, w);
                            let gi = g[(p * out + oy) * out + ox] / (ys.len() * xs.len()) as f64;
                            for y in ys.clone() {
                                for x in xs.clone() {
                                    dst[p * h * w + y * w + x] += gi;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool(a) => {
            let s = nodes[a.0].value.shape();
            let hw = s[s.len() - 2] * s[s.len() - 1];
            accumulate_with(grads, nodes, *a, |i| g[i / hw] / hw as f64);
        }
        Op::SumAll(a) => accumulate_with(grads, nodes, *a, |_| g[0]),
        Op::SumAxis { input, axis } => {
            let s = nodes[input.0].value.shape();
            let dim = s[*axis];
            let inner: usize = s[axis + 1..].iter().product();
            if let Some(dst) = slot(grads, nodes, *input) {
                for (i, d) in dst.iter_mut().enumerate() {
                    let o = i / (dim * inner);
                    let r = i % inner;
                    *d += g[o * inner + r];
                }
            }
        }
        Op::BatchTrace(a) => {
            let s = nodes[a.0].value.shape();
            let k = s[s.len() - 1];
            if let Some(dst) = slot(grads, nodes, *a) {
                for (b, &gi) in g.iter().enumerate() {
                    for j in 0..k {
                        dst[b * k * k + j * k + j] += gi;
                    }
                }
            }
        }
        Op::ScaleItems(a, s) => {
            let (va, vs) = (val(*a), val(*s));
            let per = va.len() / vs.len().max(1);
            accumulate_map(grads, nodes, *a, g, |i, gi| gi * vs[i / per.max(1)]);
            if let Some(ds) = slot(grads, nodes, *s) {
                for (i, (&gi, &ai)) in g.iter().zip(va).enumerate() {
                    ds[i / per.max(1)] += gi * ai;
                }
            }
        }
        Op::AddRowBias(a, b) => {
            accumulate_map(grads, nodes, *a, g, |_, gi| gi);
            let f = nodes[b.0].value.numel();
            if let Some(db) = slot(grads, nodes, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    db[i % f] += gi;
                }
            }
        }
        Op::ChannelAffine { input, scale, shift } => {
            let s = nodes[input.0].value.shape();
            let c = s[1];
            let inner: usize = s[2..].iter().product::<usize>().max(1);
            let (vi, vs) = (val(*input), val(*scale));
            if let Some(dst) = slot(grads, nodes, *input) {
                for (i, (d, gp)) in dst.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                    let a = vs[i % c];
                    d.iter_mut().zip(gp).for_each(|(d, &gi)| *d += gi * a);
                }
            }
            if let Some(dsc) = slot(grads, nodes, *scale) {
                for (i, (gp, xp)) in g.chunks(inner).zip(vi.chunks(inner)).enumerate() {
                    dsc[i % c] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(dsh) = slot(grads, nodes, *shift) {
                for (i, gp) in g.chunks(inner).enumerate() {
                    dsh[i % c] += gp.iter().sum::<f64>();
                }
            }
        }
        Op::Reshape(a) => accumulate_map(grads, nodes, *a, g, |_, gi| gi),
        Op::Gather { input, index } => {
            let per = g.len() / index.len().max(1);
            if let Some(dst) = slot(grads, nodes, *input) {
                for (k, &src) in index.iter().enumerate() {
                    for (d, &gi) in dst[src * per..(src + 1) * per].iter_mut().zip(&g[k * per..(k + 1) * per]) {
                        *d += gi;
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let base = node.value.shape();
            let outer: usize = base[..*axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let total = base[*axis];
            let mut offset = 0;
            for p in parts {
                let d = nodes[p.0].value.shape()[*axis];
                if let Some(dst) = slot(grads, nodes, *p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                        for (x, &gi) in dst[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                            *x += gi;
                        }
                    }
                }
                offset += d;
            }
        }
        Op::SegmentSum { input, segment } => {
            let per = nodes[input.0].value.numel() / segment.len().max(1);
            if let Some(dst) = slot(grads, nodes, *input) {
                for (i, &s) in segment.iter().enumerate() {
                    for (d, &gi) in dst[i * per..(i + 1) * per].iter_mut().zip(&g[s * per..(s + 1) * per]) {
                        *d += gi;
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let c = *node.value.shape().last().unwrap_or(&1);
            if let Some(dst) = slot(grads, nodes, *a) {
                for ((drow, grow), orow) in dst.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let gsum: f64 = grow.iter().sum();
                    for ((d, &gi), &o) in drow.iter_mut().zip(grow).zip(orow) {
                        *d += gi - o.exp() * gsum;
                    }
                }
            }
        }
    }
}
