use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// One recorded operation. Inputs are tape indices; constants needed by the
/// backward rule are stored inline.
#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    /// Inner product with a constant weight vector; the masked-sum workhorse.
    DotConst(Var, Vec<f64>),
    MatMul(Var, Var),
    Transpose(Var),
    MatVec(Var, Var),
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    AddChannelBias(Var, Var),
    Upsample2x(Var),
    AvgPool { input: Var, window: usize },
    GlobalAvgPool(Var),
    SoftmaxVec(Var),
    /// Per-pixel softmax across the channel axis of a `[C,H,W]` tensor.
    SoftmaxChannels(Var),
    /// log sum_{i in mask} exp(x_i), max-stabilized.
    LogSumExpMasked(Var, Vec<bool>),
    Get(Var, usize),
    Row(Var, usize),
    Channel(Var, usize),
    ConcatChannels(Var, Var),
    ConcatVec(Vec<Var>),
    StackRows(Vec<Var>),
    Reshape(Var),
    L2Normalize(Var),
    /// out[c,i,j] = scale[c] * (x[c,i,j] + bias[c]); the latent modulation kernel.
    ModulateChannels { input: Var, scale: Var, bias: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamic per-forward-pass tape for reverse-mode differentiation.
///
/// Every operation appends a node holding its output value and enough
/// information to run its vector-Jacobian product. `backward` replays the
/// tape in reverse; nodes are in construction order so inputs always precede
/// their consumers. A tape is built, differentiated and dropped within one
/// training step.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value from {:?}", op);
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Record a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Record a non-differentiable leaf (an input or sampled noise).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient on `v`, zeros if nothing flowed to it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_shapes(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_shapes(a, b, "add");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::from_vec(shape, data), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_shapes(a, b, "sub");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::from_vec(shape, data), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_shapes(a, b, "mul");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::from_vec(shape, data), Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_shapes(a, b, "div");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::from_vec(shape, data), Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v + c);
        self.push(value, Op::AddScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.max(c));
        self.push(value, Op::ClampMin(a, c))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean();
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// sum_i a_i * w_i with constant weights `w`.
    pub fn dot_const(&mut self, a: Var, w: &[f64]) -> Var {
        let av = self.nodes[a.0].value.data();
        assert_eq!(av.len(), w.len(), "dot_const: length mismatch");
        let s: f64 = av.iter().zip(w).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::DotConst(a, w.to_vec()))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * bv.data()[p * n + j];
                }
            }
        }
        self.push(Tensor::from_vec(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        self.push(Tensor::from_vec(vec![n, m], out), Op::Transpose(a))
    }

    /// w[m,n] * x[n] -> [m]
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (wv, xv) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), n, "matvec: {n} columns vs {} inputs", xv.len());
        let out = (0..m)
            .map(|i| (0..n).map(|j| wv.data()[i * n + j] * xv.data()[j]).sum())
            .collect();
        self.push(Tensor::from_vec(vec![m], out), Op::MatVec(w, x))
    }

    // ---- convolution & pooling --------------------------------------------

    /// Cross-correlation of `input [Cin,H,W]` with `kernel [Cout,Cin,kh,kw]`,
    /// zero padding. Output spatial dims: floor((H + 2p - kh)/stride) + 1.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (iv, kv) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        if iv.shape().len() != 3 || kv.shape().len() != 4 {
            return Err(Error::dimension(format!(
                "conv2d expects input [Cin,H,W] and kernel [Cout,Cin,kh,kw], got {:?} and {:?}",
                iv.shape(),
                kv.shape()
            )));
        }
        let (cin, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        let (cout, kcin, kh, kw) = (kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]);
        if cin != kcin {
            return Err(Error::dimension(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for u in 0..kh {
                            let iy = (y * stride + u) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let ix = (x * stride + v) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += iv.data()[(ci * h + iy as usize) * w + ix as usize]
                                    * kv.data()[((o * cin + ci) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[(o * ho + y) * wo + x] = acc;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![cout, ho, wo], out),
            Op::Conv2d { input, kernel, stride, padding },
        ))
    }

    /// Broadcast-add a per-channel bias `b[C]` to `x[C,H,W]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(bv.len(), c, "add_channel_bias: {c} channels vs {} biases", bv.len());
        let mut out = xv.data().to_vec();
        for ch in 0..c {
            let bias = bv.data()[ch];
            for px in out[ch * h * w..(ch + 1) * h * w].iter_mut() {
                *px += bias;
            }
        }
        self.push(Tensor::from_vec(vec![c, h, w], out), Op::AddChannelBias(x, b))
    }

    /// Nearest-neighbor 2x spatial upsample of `x[C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv.data()[(ch * h + y) * w + xx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[(ch * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx] = v;
                        }
                    }
                }
            }
        }
        self.push(Tensor::from_vec(vec![c, 2 * h, 2 * w], out), Op::Upsample2x(x))
    }

    /// Non-overlapping mean pooling with a square window.
    pub fn avg_pool(&mut self, input: Var, window: usize) -> Result<Var> {
        let iv = &self.nodes[input.0].value;
        let (c, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::dimension(format!(
                "avg_pool: window {window} does not divide {h}x{w}"
            )));
        }
        let (ho, wo) = (h / window, w / window);
        let norm = 1.0 / (window * window) as f64;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..window {
                        for dx in 0..window {
                            acc += iv.data()[(ch * h + y * window + dy) * w + x * window + dx];
                        }
                    }
                    out[(ch * ho + y) * wo + x] = acc * norm;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![c, ho, wo], out),
            Op::AvgPool { input, window },
        ))
    }

    /// Mean over the full spatial extent: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let norm = 1.0 / (h * w) as f64;
        let out = (0..c)
            .map(|ch| xv.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() * norm)
            .collect();
        self.push(Tensor::from_vec(vec![c], out), Op::GlobalAvgPool(x))
    }

    // ---- softmax ----------------------------------------------------------

    /// Max-stabilized softmax over a vector.
    pub fn softmax_vec(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.data();
        let out = softmax_slice(xv);
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::from_vec(shape, out), Op::SoftmaxVec(x))
    }

    /// Per-pixel softmax across channels of `x[C,H,W]`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        let mut col = vec![0.0; c];
        for px in 0..hw {
            for ch in 0..c {
                col[ch] = xv.data()[ch * hw + px];
            }
            let sm = softmax_slice(&col);
            for ch in 0..c {
                out[ch * hw + px] = sm[ch];
            }
        }
        self.push(Tensor::from_vec(vec![c, h, w], out), Op::SoftmaxChannels(x))
    }

    /// log sum of exp over the entries selected by `mask`, max-stabilized.
    pub fn logsumexp_masked(&mut self, x: Var, mask: &[bool]) -> Var {
        let xv = self.nodes[x.0].value.data();
        assert_eq!(xv.len(), mask.len(), "logsumexp_masked: mask length mismatch");
        assert!(mask.iter().any(|&m| m), "logsumexp_masked: empty mask");
        let mx = xv
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xv
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| (v - mx).exp())
            .sum();
        self.push(
            Tensor::scalar(mx + s.ln()),
            Op::LogSumExpMasked(x, mask.to_vec()),
        )
    }

    // ---- indexing & assembly ------------------------------------------------

    pub fn get(&mut self, x: Var, i: usize) -> Var {
        let v = self.nodes[x.0].value.data()[i];
        self.push(Tensor::scalar(v), Op::Get(x, i))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.shape()[1];
        let out = xv.data()[i * n..(i + 1) * n].to_vec();
        self.push(Tensor::from_vec(vec![n], out), Op::Row(x, i))
    }

    /// Channel `c` of a rank-3 tensor, as `[H,W]`.
    pub fn channel(&mut self, x: Var, c: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (h, w) = (xv.shape()[1], xv.shape()[2]);
        let out = xv.data()[c * h * w..(c + 1) * h * w].to_vec();
        self.push(Tensor::from_vec(vec![h, w], out), Op::Channel(x, c))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape()[1..], bv.shape()[1..], "concat_channels: spatial mismatch");
        let (c1, c2) = (av.shape()[0], bv.shape()[0]);
        let (h, w) = (av.shape()[1], av.shape()[2]);
        let mut out = Vec::with_capacity((c1 + c2) * h * w);
        out.extend_from_slice(av.data());
        out.extend_from_slice(bv.data());
        self.push(
            Tensor::from_vec(vec![c1 + c2, h, w], out),
            Op::ConcatChannels(a, b),
        )
    }

    /// Concatenate 1-D (or scalar) vars into one vector.
    pub fn concat_vec(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_vec: empty input");
        let mut out = Vec::new();
        for &v in xs {
            out.extend_from_slice(self.nodes[v.0].value.data());
        }
        let n = out.len();
        self.push(Tensor::from_vec(vec![n], out), Op::ConcatVec(xs.to_vec()))
    }

    /// Stack equal-length vectors as rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "stack_rows: empty input");
        let n = self.nodes[xs[0].0].value.len();
        let mut out = Vec::with_capacity(xs.len() * n);
        for &v in xs {
            let data = self.nodes[v.0].value.data();
            assert_eq!(data.len(), n, "stack_rows: ragged rows");
            out.extend_from_slice(data);
        }
        self.push(Tensor::from_vec(vec![xs.len(), n], out), Op::StackRows(xs.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.nodes[x.0].value.reshaped(shape).expect("reshape: element count mismatch");
        self.push(value, Op::Reshape(x))
    }

    /// x / ||x||_2 with a 1e-12 floor on the norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.data();
        let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let out = xv.iter().map(|v| v / norm).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::from_vec(shape, out), Op::L2Normalize(x))
    }

    /// Spatially uniform per-channel scale and bias:
    /// out[c,i,j] = scale[c] * (x[c,i,j] + bias[c]).
    pub fn modulate_channels(&mut self, input: Var, scale: Var, bias: Var) -> Var {
        let (xv, sv, bv) = (
            &self.nodes[input.0].value,
            &self.nodes[scale.0].value,
            &self.nodes[bias.0].value,
        );
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(sv.len(), c, "modulate_channels: scale length");
        assert_eq!(bv.len(), c, "modulate_channels: bias length");
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let (s, b) = (sv.data()[ch], bv.data()[ch]);
            for px in 0..hw {
                out[ch * hw + px] = s * (xv.data()[ch * hw + px] + b);
            }
        }
        self.push(
            Tensor::from_vec(vec![c, h, w], out),
            Op::ModulateChannels { input, scale, bias },
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of interior nodes are
    /// recomputed from scratch; gradients already sitting on leaves are kept
    /// and accumulated into, so calling twice doubles leaf gradients.
    ///
    /// Panics if `loss` is not a scalar.
    pub fn backward(&mut self, loss: Var) {
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        // Clear interior gradients; leaves keep theirs (accumulation contract).
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf { .. }) {
                *grad = None;
            }
        }
        let mut grads = std::mem::take(&mut self.grads);
        acc_into(&mut grads, loss.0, 1, |g| g[0] += 1.0);

        for idx in (0..=loss.0).rev() {
            let upstream = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                continue;
            }
            self.backward_node(idx, &upstream, &mut grads);
        }
        self.grads = grads;
    }

    fn backward_node(&self, idx: usize, d: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        let out_val = self.nodes[idx].value.data();

        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc_into(grads, a.0, len(*a), |g| add_assign(g, d, 1.0));
                acc_into(grads, b.0, len(*b), |g| add_assign(g, d, 1.0));
            }
            Op::Sub(a, b) => {
                acc_into(grads, a.0, len(*a), |g| add_assign(g, d, 1.0));
                acc_into(grads, b.0, len(*b), |g| add_assign(g, d, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc_into(grads, a.0, av.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += d[i] * bv[i];
                    }
                });
                acc_into(grads, b.0, bv.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += d[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc_into(grads, a.0, av.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += d[i] / bv[i];
                    }
                });
                acc_into(grads, b.0, bv.len(), |g| {
                    for i in 0..g.len() {
                        g[i] -= d[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc_into(grads, a.0, len(*a), |g| add_assign(g, d, c));
            }
            Op::AddScalar(a, _) => {
                acc_into(grads, a.0, len(*a), |g| add_assign(g, d, 1.0));
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc_into(grads, a.0, av.len(), |g| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            g[i] += d[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                acc_into(grads, a.0, len(*a), |g| {
                    for i in 0..g.len() {
                        g[i] += d[i] * out_val[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = val(*a);
                acc_into(grads, a.0, av.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += d[i] / av[i];
                    }
                });
            }
            Op::ClampMin(a, c) => {
                let av = val(*a);
                let c = *c;
                acc_into(grads, a.0, av.len(), |g| {
                    for i in 0..g.len() {
                        if av[i] > c {
                            g[i] += d[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = d[0];
                acc_into(grads, a.0, len(*a), |g| {
                    for gi in g.iter_mut() {
                        *gi += s;
                    }
                });
            }
            Op::Mean(a) => {
                let n = len(*a);
                let s = d[0] / n as f64;
                acc_into(grads, a.0, n, |g| {
                    for gi in g.iter_mut() {
                        *gi += s;
                    }
                });
            }
            Op::DotConst(a, w) => {
                let s = d[0];
                acc_into(grads, a.0, w.len(), |g| {
                    for (gi, wi) in g.iter_mut().zip(w) {
                        *gi += s * wi;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let m = self.nodes[a.0].value.shape()[0];
                let k = self.nodes[a.0].value.shape()[1];
                let n = self.nodes[b.0].value.shape()[1];
                acc_into(grads, a.0, m * k, |g| {
                    // dA = d @ B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += d[i * n + j] * bv[p * n + j];
                            }
                            g[i * k + p] += acc;
                        }
                    }
                });
                acc_into(grads, b.0, k * n, |g| {
                    // dB = A^T @ d
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * d[i * n + j];
                            }
                            g[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let m = self.nodes[a.0].value.shape()[0];
                let n = self.nodes[a.0].value.shape()[1];
                acc_into(grads, a.0, m * n, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += d[j * m + i];
                        }
                    }
                });
            }
            Op::MatVec(w, x) => {
                let (wv, xv) = (val(*w), val(*x));
                let m = self.nodes[w.0].value.shape()[0];
                let n = self.nodes[w.0].value.shape()[1];
                acc_into(grads, w.0, m * n, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += d[i] * xv[j];
                        }
                    }
                });
                acc_into(grads, x.0, n, |g| {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += wv[i * n + j] * d[i];
                        }
                        g[j] += acc;
                    }
                });
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let (iv, kv) = (val(*input), val(*kernel));
                let ishape = self.nodes[input.0].value.shape();
                let kshape = self.nodes[kernel.0].value.shape();
                let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
                let (cout, kh, kw) = (kshape[0], kshape[2], kshape[3]);
                let oshape = self.nodes[idx].value.shape();
                let (ho, wo) = (oshape[1], oshape[2]);
                let (s, p) = (*stride, *padding);

                let mut d_input = vec![0.0; cin * h * w];
                let mut d_kernel = vec![0.0; cout * cin * kh * kw];
                for o in 0..cout {
                    for y in 0..ho {
                        for x in 0..wo {
                            let gout = d[(o * ho + y) * wo + x];
                            if gout == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for u in 0..kh {
                                    let iy = (y * s + u) as isize - p as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for v in 0..kw {
                                        let ix = (x * s + v) as isize - p as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let iidx = (ci * h + iy as usize) * w + ix as usize;
                                        let kidx = ((o * cin + ci) * kh + u) * kw + v;
                                        d_kernel[kidx] += gout * iv[iidx];
                                        d_input[iidx] += gout * kv[kidx];
                                    }
                                }
                            }
                        }
                    }
                }
                acc_into(grads, input.0, d_input.len(), |g| add_assign(g, &d_input, 1.0));
                acc_into(grads, kernel.0, d_kernel.len(), |g| add_assign(g, &d_kernel, 1.0));
            }
            Op::AddChannelBias(x, b) => {
                let xshape = self.nodes[x.0].value.shape();
                let (c, hw) = (xshape[0], xshape[1] * xshape[2]);
                acc_into(grads, x.0, c * hw, |g| add_assign(g, d, 1.0));
                acc_into(grads, b.0, c, |g| {
                    for ch in 0..c {
                        g[ch] += d[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Upsample2x(x) => {
                let xshape = self.nodes[x.0].value.shape();
                let (c, h, w) = (xshape[0], xshape[1], xshape[2]);
                acc_into(grads, x.0, c * h * w, |g| {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let mut acc = 0.0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        acc += d[(ch * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx];
                                    }
                                }
                                g[(ch * h + y) * w + xx] += acc;
                            }
                        }
                    }
                });
            }
            Op::AvgPool { input, window } => {
                let ishape = self.nodes[input.0].value.shape();
                let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                let win = *window;
                let (ho, wo) = (h / win, w / win);
                let norm = 1.0 / (win * win) as f64;
                acc_into(grads, input.0, c * h * w, |g| {
                    for ch in 0..c {
                        for y in 0..ho {
                            for x in 0..wo {
                                let gd = d[(ch * ho + y) * wo + x] * norm;
                                for dy in 0..win {
                                    for dx in 0..win {
                                        g[(ch * h + y * win + dy) * w + x * win + dx] += gd;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xshape = self.nodes[x.0].value.shape();
                let (c, hw) = (xshape[0], xshape[1] * xshape[2]);
                let norm = 1.0 / hw as f64;
                acc_into(grads, x.0, c * hw, |g| {
                    for ch in 0..c {
                        let gd = d[ch] * norm;
                        for px in 0..hw {
                            g[ch * hw + px] += gd;
                        }
                    }
                });
            }
            Op::SoftmaxVec(x) => {
                // dx = y ⊙ (d − ⟨d, y⟩)
                let dot: f64 = d.iter().zip(out_val).map(|(a, b)| a * b).sum();
                acc_into(grads, x.0, out_val.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += out_val[i] * (d[i] - dot);
                    }
                });
            }
            Op::SoftmaxChannels(x) => {
                let xshape = self.nodes[x.0].value.shape();
                let (c, hw) = (xshape[0], xshape[1] * xshape[2]);
                acc_into(grads, x.0, c * hw, |g| {
                    for px in 0..hw {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += d[ch * hw + px] * out_val[ch * hw + px];
                        }
                        for ch in 0..c {
                            let i = ch * hw + px;
                            g[i] += out_val[i] * (d[i] - dot);
                        }
                    }
                });
            }
            Op::LogSumExpMasked(x, mask) => {
                let xv = val(*x);
                let lse = out_val[0];
                let s = d[0];
                acc_into(grads, x.0, xv.len(), |g| {
                    for i in 0..g.len() {
                        if mask[i] {
                            g[i] += s * (xv[i] - lse).exp();
                        }
                    }
                });
            }
            Op::Get(x, i) => {
                let i = *i;
                let s = d[0];
                acc_into(grads, x.0, len(*x), |g| g[i] += s);
            }
            Op::Row(x, i) => {
                let n = self.nodes[x.0].value.shape()[1];
                let i = *i;
                acc_into(grads, x.0, len(*x), |g| {
                    for j in 0..n {
                        g[i * n + j] += d[j];
                    }
                });
            }
            Op::Channel(x, c) => {
                let xshape = self.nodes[x.0].value.shape();
                let hw = xshape[1] * xshape[2];
                let c = *c;
                acc_into(grads, x.0, len(*x), |g| {
                    for px in 0..hw {
                        g[c * hw + px] += d[px];
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let alen = len(*a);
                acc_into(grads, a.0, alen, |g| add_assign(g, &d[..alen], 1.0));
                acc_into(grads, b.0, len(*b), |g| add_assign(g, &d[alen..], 1.0));
            }
            Op::ConcatVec(xs) => {
                let mut off = 0;
                for &v in xs {
                    let l = len(v);
                    acc_into(grads, v.0, l, |g| add_assign(g, &d[off..off + l], 1.0));
                    off += l;
                }
            }
            Op::StackRows(xs) => {
                let n = len(xs[0]);
                for (r, &v) in xs.iter().enumerate() {
                    acc_into(grads, v.0, n, |g| add_assign(g, &d[r * n..(r + 1) * n], 1.0));
                }
            }
            Op::Reshape(x) => {
                acc_into(grads, x.0, len(*x), |g| add_assign(g, d, 1.0));
            }
            Op::L2Normalize(x) => {
                let xv = val(*x);
                let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let dot: f64 = d.iter().zip(out_val).map(|(a, b)| a * b).sum();
                acc_into(grads, x.0, xv.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += (d[i] - out_val[i] * dot) / norm;
                    }
                });
            }
            Op::ModulateChannels { input, scale, bias } => {
                let (xv, sv, bv) = (val(*input), val(*scale), val(*bias));
                let xshape = self.nodes[input.0].value.shape();
                let (c, hw) = (xshape[0], xshape[1] * xshape[2]);
                acc_into(grads, input.0, c * hw, |g| {
                    for ch in 0..c {
                        for px in 0..hw {
                            g[ch * hw + px] += d[ch * hw + px] * sv[ch];
                        }
                    }
                });
                acc_into(grads, scale.0, c, |g| {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for px in 0..hw {
                            acc += d[ch * hw + px] * (xv[ch * hw + px] + bv[ch]);
                        }
                        g[ch] += acc;
                    }
                });
                acc_into(grads, bias.0, c, |g| {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for px in 0..hw {
                            acc += d[ch * hw + px] * sv[ch];
                        }
                        g[ch] += acc;
                    }
                });
            }
        }
    }
}

/// Stabilized softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn add_assign(g: &mut [f64], d: &[f64], k: f64) {
    for (gi, di) in g.iter_mut().zip(d) {
        *gi += k * di;
    }
}

fn acc_into(grads: &mut [Option<Vec<f64>>], id: usize, n: usize, f: impl FnOnce(&mut Vec<f64>)) {
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![0.0; n]);
    }
    f(slot.as_mut().unwrap());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let loss = tape.sum(w);
        tape.backward(loss);
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_w() {
        let data = vec![1.5, -0.25, 2.0];
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![3], data.clone()));
        let sq = tape.mul(w, w);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss);
        assert_eq!(tape.grad(w).unwrap(), data.as_slice());
    }

    #[test]
    fn repeated_backward_accumulates_on_leaves() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        let loss = tape.sum(w);
        tape.backward(loss);
        tape.backward(loss);
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "scalar")]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        let y = tape.scale(w, 2.0);
        tape.backward(y);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
    }

    #[test]
    fn conv2d_zero_kernel_annihilates() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(Tensor::zeros(vec![2, 1, 2, 2]));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_sum_window() {
        // input [[1,2],[3,4]], 2x2 ones kernel, stride 1, no padding -> [[10]]
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0; 4]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv2d_channel_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 4, 4]));
        let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, 1, 1),
            Err(crate::error::Error::Dimension(_))
        ));
    }

    #[test]
    fn avg_pool_window_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]));
        let y = tape.avg_pool(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn avg_pool_constant_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 4, 4], 0.7));
        let y = tape.avg_pool(x, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn avg_pool_rejects_non_divisible() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 3]));
        assert!(matches!(
            tape.avg_pool(x, 2),
            Err(crate::error::Error::Dimension(_))
        ));
    }

    #[test]
    fn global_pool_gives_channel_means() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(
            vec![2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0],
        ));
        let y = tape.global_avg_pool(x);
        assert_eq!(tape.value(y).shape(), &[2]);
        assert_eq!(tape.value(y).data(), &[2.5, 10.0]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![4], vec![3.0; 4]));
        let y = tape.softmax_vec(x);
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = vec![0.3, -1.2, 2.5];
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![3], logits.clone()));
        let b = tape.constant(Tensor::from_vec(vec![3], logits.iter().map(|v| v + 17.0).collect()));
        let ya = tape.softmax_vec(a);
        let yb = tape.softmax_vec(b);
        for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_quarter_three_quarters() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![2], vec![0.0, 3.0f64.ln()]));
        let y = tape.softmax_vec(x);
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![5], vec![100.0, -50.0, 3.0, 0.0, 77.0]));
        let y = tape.softmax_vec(x);
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn modulation_direct_formula() {
        // pixel [1,2], scale [2,0.5], bias [1,-1] -> [4, 0.5]
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![2, 1, 1], vec![1.0, 2.0]));
        let s = tape.constant(Tensor::from_vec(vec![2], vec![2.0, 0.5]));
        let b = tape.constant(Tensor::from_vec(vec![2], vec![1.0, -1.0]));
        let y = tape.modulate_channels(x, s, b);
        assert_eq!(tape.value(y).data(), &[4.0, 0.5]);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(Tensor::from_vec(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let y = tape.matmul(a, b);
        assert_eq!(tape.value(y).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn upsample_then_avgpool_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let up = tape.upsample2x(x);
        let down = tape.avg_pool(up, 2).unwrap();
        assert_eq!(tape.value(down).data(), tape.value(x).data());
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![3.0, 4.0, 0.0]));
        let y = tape.l2_normalize(x);
        let n: f64 = tape.value(y).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert!((tape.value(y).data()[0] - 0.6).abs() < 1e-12);
    }
}
