use super::counter::OpCounter;
use super::kernels::{self, AttnGeom, ConvGeom, GroupNormSaved};
use super::{Element, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    GroupNorm,
    Linear,
    ChannelLinear,
    MaxPool2d,
    AdaptiveAvgPool2d,
    Softmax,
    BilinearResize,
    Add,
    Mul,
    Scale,
    Relu,
    Sum,
    Mean,
    ConcatChannels,
    CrossAttention,
    CrossEntropy,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::GroupNorm,
        OpKind::Linear,
        OpKind::ChannelLinear,
        OpKind::MaxPool2d,
        OpKind::AdaptiveAvgPool2d,
        OpKind::Softmax,
        OpKind::BilinearResize,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::ConcatChannels,
        OpKind::CrossAttention,
        OpKind::CrossEntropy,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::GroupNorm => "group_norm",
            OpKind::Linear => "linear",
            OpKind::ChannelLinear => "channel_linear",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::AdaptiveAvgPool2d => "adaptive_avg_pool2d",
            OpKind::Softmax => "softmax",
            OpKind::BilinearResize => "bilinear_resize",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::CrossAttention => "cross_attention",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: GroupNormSaved<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    ChannelLinear {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        cin: usize,
        cout: usize,
        l: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool2d {
        x: Var,
        p: usize,
    },
    Softmax {
        x: Var,
        d: usize,
    },
    BilinearResize {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Relu {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
    CrossAttention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        scale: T,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        dims: [usize; 3],
        ignore: u8,
        count: usize,
        probs: Vec<T>,
    },
    Reshape {
        x: Var,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
            Op::Linear { .. } => OpKind::Linear,
            Op::ChannelLinear { .. } => OpKind::ChannelLinear,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::AdaptiveAvgPool2d { .. } => OpKind::AdaptiveAvgPool2d,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::BilinearResize { .. } => OpKind::BilinearResize,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::CrossAttention { .. } => OpKind::CrossAttention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracks: bool,
}

/// Dynamic reverse-mode tape.
///
/// Every forward op appends a node; [`Tape::backward`] walks the nodes in
/// reverse creation order, which is a valid topological order. A tape is
/// built per forward pass and never reused across passes.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    counter: OpCounter,
    region: Vec<String>,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{what}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            counter: OpCounter::default(),
            region: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of `kind` by a relative 1e-3. Only meant
    /// for negative controls of the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub fn take_counter(&mut self) -> OpCounter {
        std::mem::take(&mut self.counter)
    }

    /// Runs `f` with `label` pushed onto the region path used for op counts.
    pub fn in_region<R>(&mut self, label: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.region.push(label.to_string());
        let out = f(self);
        self.region.pop();
        out
    }

    fn label(&self) -> String {
        if self.region.is_empty() {
            "root".to_string()
        } else {
            self.region.join("/")
        }
    }

    fn count(&mut self, macs: u64) {
        let label = self.label();
        self.counter.add(&label, macs);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracks = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].tracks),
        };
        self.nodes.push(Node { value, op, tracks });
        Var(self.nodes.len() - 1)
    }

    /// Records `tensor` as a leaf; it receives gradients iff it requires them.
    /// Records `tensor` as an input. Any gradient it carries is dropped.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.zero_grad();
        self.push(tensor, Op::Leaf, &[])
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Post-softmax attention probabilities `[n, heads, lq, lk]` saved by a
    /// cross-attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], AttnShape)> {
        match &self.nodes[v.0].op {
            Op::CrossAttention { probs, geom, .. } => Some((
                probs,
                AttnShape {
                    n: geom.n,
                    heads: geom.heads,
                    lq: geom.lq,
                    lk: geom.lk,
                },
            )),
            _ => None,
        }
    }

    fn dims4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        self.value(v)
            .dims4()
            .map_err(|_| Error::Dimension(format!("{what}: expected NCHW input, got {:?}", self.shape(v))))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_grouped(x, w, b, stride, padding, 1)
    }

    pub fn conv2d_grouped(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let [n, cin, h, wd] = self.dims4(x, "conv2d")?;
        let [cout, cin_g, kh, kw] = self.dims4(w, "conv2d weight")?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            bail!(Config, "conv2d: {groups} groups do not divide {cin} -> {cout} channels");
        }
        if cin_g * groups != cin {
            bail!(
                Dimension,
                "conv2d: input has {cin} channels but weight expects {}",
                cin_g * groups
            );
        }
        if kh != kw || kh % 2 == 0 {
            bail!(Config, "conv2d: kernel must be square and odd, got {kh}x{kw}");
        }
        if stride == 0 {
            bail!(Config, "conv2d: stride must be positive");
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                bail!(Dimension, "conv2d: bias shape {:?} != [{cout}]", self.shape(b));
            }
        }
        let out_dim = |len: usize| -> Result<usize> {
            let span = len + 2 * padding;
            if span < kh || (span - kh) % stride != 0 {
                bail!(
                    Geometry,
                    "conv2d: extent {len} with padding {padding}, kernel {kh}, stride {stride} gives a non-integer output"
                );
            }
            Ok((span - kh) / stride + 1)
        };
        let (ho, wo) = (out_dim(h)?, out_dim(wd)?);
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            stride,
            pad: padding,
            groups,
            ho,
            wo,
        };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        self.count(geom.macs());
        let out = Tensor::new(&[n, cout, ho, wo], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims = self.dims4(x, "group_norm")?;
        let c = dims[1];
        if groups == 0 || c % groups != 0 {
            bail!(Config, "group_norm: {c} channels not divisible into {groups} groups");
        }
        if !(eps > 0.0) {
            bail!(Config, "group_norm: eps must be positive");
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(Dimension, "group_norm: affine parameters must have shape [{c}]");
        }
        let (y, saved) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            dims,
            groups,
            T::lit(eps),
        );
        let out = Tensor::new(&dims, y)?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            },
            &[x, gamma, beta],
        ))
    }

    /// Affine map over the trailing dimension.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [dout, din] = ws[..] else {
            bail!(Dimension, "linear: weight must be 2-D, got {ws:?}");
        };
        if xs[xs.len() - 1] != din {
            bail!(Dimension, "linear: trailing dimension {} != weight input width {din}", xs[xs.len() - 1]);
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                bail!(Dimension, "linear: bias shape {:?} != [{dout}]", self.shape(b));
            }
        }
        let rows = self.value(x).numel() / din;
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            din,
            dout,
        );
        self.count((rows * din * dout) as u64);
        let mut shape = xs;
        *shape.last_mut().expect("non-empty shape") = dout;
        let out = Tensor::new(&shape, y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            &inputs,
        ))
    }

    /// Affine map over the channel axis of an NCHW tensor, applied per pixel.
    /// `w` is `[cout, cin]`.
    pub fn channel_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, cin, h, wd] = self.dims4(x, "channel_linear")?;
        let ws = self.shape(w).to_vec();
        let [cout, win] = ws[..] else {
            bail!(Dimension, "channel_linear: weight must be 2-D, got {ws:?}");
        };
        if win != cin {
            bail!(Dimension, "channel_linear: input has {cin} channels but weight expects {win}");
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                bail!(Dimension, "channel_linear: bias shape {:?} != [{cout}]", self.shape(b));
            }
        }
        let l = h * wd;
        let y = kernels::channel_linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            cin,
            cout,
            l,
        );
        self.count((n * l * cin * cout) as u64);
        let out = Tensor::new(&[n, cout, h, wd], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::ChannelLinear {
                x,
                w,
                b,
                n,
                cin,
                cout,
                l,
            },
            &inputs,
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let dims = self.dims4(x, "max_pool2d")?;
        let [n, c, h, w] = dims;
        if k == 0 || stride == 0 {
            bail!(Config, "max_pool2d: window and stride must be positive");
        }
        for len in [h, w] {
            if len < k || (len - k) % stride != 0 || len % stride != 0 {
                bail!(
                    Geometry,
                    "max_pool2d: extent {len} is not tiled by window {k} with stride {stride}"
                );
            }
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let (y, argmax) = kernels::max_pool_forward(self.value(x).data(), dims, k, stride, ho, wo);
        let out = Tensor::new(&[n, c, ho, wo], y)?;
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, &[x]))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, p: usize) -> Result<Var> {
        let dims = self.dims4(x, "adaptive_avg_pool2d")?;
        let [n, c, h, w] = dims;
        if p == 0 {
            bail!(Config, "adaptive_avg_pool2d: output size must be positive");
        }
        if p > h || p > w {
            bail!(Geometry, "adaptive_avg_pool2d: output {p}x{p} exceeds input {h}x{w}");
        }
        let y = kernels::adaptive_avg_pool_forward(self.value(x).data(), dims, p);
        self.count((n * c * h * w) as u64);
        let out = Tensor::new(&[n, c, p, p], y)?;
        Ok(self.push(out, Op::AdaptiveAvgPool2d { x, p }, &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = shape[shape.len() - 1];
        let mut y = self.value(x).data().to_vec();
        kernels::softmax_rows(&mut y, d);
        let out = Tensor::new(&shape, y)?;
        Ok(self.push(out, Op::Softmax { x, d }, &[x]))
    }

    /// Bilinear resampling with align-corners=false.
    pub fn bilinear_resize(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let dims = self.dims4(x, "bilinear_resize")?;
        let [n, c, h, w] = dims;
        if ho == 0 || wo == 0 {
            bail!(Geometry, "bilinear_resize: target size must be positive");
        }
        let y = kernels::bilinear_forward(self.value(x).data(), dims, ho, wo);
        if ho != h || wo != w {
            self.count((4 * n * c * ho * wo) as u64);
        }
        let out = Tensor::new(&[n, c, ho, wo], y)?;
        Ok(self.push(out, Op::BilinearResize { x }, &[x]))
    }

    /// Elementwise sum. `b` may also be a single-sample tensor broadcast
    /// across the batch of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = sa != sb && sa.len() == sb.len() && sb[0] == 1 && sa[1..] == sb[1..];
        if sa != sb && !broadcast {
            bail!(Dimension, "add: shapes {sa:?} and {sb:?} are incompatible");
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<T> = av
            .data()
            .chunks(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, Op::Scale { x, s }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        // NaN passes through so that a poisoned input still reaches the loss
        let data = self.value(x).data().iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect();
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, Op::Relu { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Concatenates NCHW tensors along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Usage, "concat_channels: nothing to concatenate");
        };
        let [n, _, h, w] = self.dims4(first, "concat_channels")?;
        let mut total = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.dims4(p, "concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                bail!(
                    Dimension,
                    "concat_channels: part {:?} does not match batch/spatial size {:?}",
                    self.shape(p),
                    [n, h, w]
                );
            }
            total += pc;
        }
        let l = h * w;
        let mut data = Vec::with_capacity(n * total * l);
        for ni in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[ni * c * l..(ni + 1) * c * l]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], data)?;
        Ok(self.push(
            out,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Multi-head `softmax(q^T k * scale) v` on channel-major maps.
    ///
    /// `q` is `[n, c, hq, wq]`, `k` and `v` are `[n, c, hk, wk]`; each spatial
    /// position is a token. The output has the shape of `q`.
    pub fn cross_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let [n, c, hq, wq] = self.dims4(q, "cross_attention")?;
        let [kn, kc, hk, wk] = self.dims4(k, "cross_attention keys")?;
        if self.shape(v) != self.shape(k) {
            bail!(Dimension, "cross_attention: keys {:?} and values {:?} differ", self.shape(k), self.shape(v));
        }
        if kn != n || kc != c {
            bail!(Dimension, "cross_attention: queries {:?} and keys {:?} disagree", self.shape(q), self.shape(k));
        }
        if heads == 0 || c % heads != 0 {
            bail!(Config, "cross_attention: {c} channels not divisible by {heads} heads");
        }
        let geom = AttnGeom {
            n,
            c,
            lq: hq * wq,
            lk: hk * wk,
            heads,
        };
        let scale = T::lit(scale);
        let (y, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &geom,
            scale,
        );
        let label = self.label();
        self.counter.add(&format!("{label}/scores"), geom.score_macs());
        self.counter.add(&format!("{label}/weighted_sum"), geom.score_macs());
        self.counter.record_kv_tokens(&label, geom.lk);
        let out = Tensor::new(&[n, c, hq, wq], y)?;
        Ok(self.push(
            out,
            Op::CrossAttention {
                q,
                k,
                v,
                geom,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean cross-entropy of `[n, k, h, w]` logits against `n*h*w` labels,
    /// skipping `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let [n, k, h, w] = self.dims4(logits, "cross_entropy")?;
        let l = h * w;
        if labels.len() != n * l {
            bail!(Dimension, "cross_entropy: {} labels for {} pixels", labels.len(), n * l);
        }
        if let Some(bad) = labels.iter().find(|&&y| y != ignore && y as usize >= k) {
            bail!(Data, "cross_entropy: label {bad} outside [0, {k})");
        }
        let (loss, probs, count) = kernels::cross_entropy_forward(self.value(logits).data(), labels, n, k, l, ignore);
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                dims: [n, k, l],
                ignore,
                count,
                probs,
            },
            &[logits],
        ))
    }

    /// Populates gradients of every tracked leaf reachable from `loss`.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracks {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            let mut out = self.input_grads(i, &g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                let bump = T::lit(1.0 + 1e-3);
                for (_, gi) in out.iter_mut() {
                    gi.iter_mut().for_each(|v| *v *= bump);
                }
            }
            for (v, gi) in out {
                if !self.nodes[v.0].tracks {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let gr = kernels::conv2d_backward(val(*x), val(*w), g, geom, self.tracks(*x));
                if let Some(dx) = gr.dx {
                    out.push((*x, dx));
                }
                out.push((*w, gr.dw));
                if let Some(b) = b {
                    out.push((*b, gr.db));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                groups,
                saved,
                beta,
            } => {
                let dims = self.nodes[x.0].value.dims4().expect("4-D");
                let gr = kernels::group_norm_backward(val(*x), val(*gamma), g, dims, *groups, saved);
                out.push((*x, gr.dx));
                out.push((*gamma, gr.dgamma));
                out.push((*beta, gr.dbeta));
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let gr = kernels::linear_backward(val(*x), val(*w), g, *rows, *din, *dout, self.tracks(*x));
                if let Some(dx) = gr.dx {
                    out.push((*x, dx));
                }
                out.push((*w, gr.dw));
                if let Some(b) = b {
                    out.push((*b, gr.db));
                }
            }
            Op::ChannelLinear {
                x,
                w,
                b,
                n,
                cin,
                cout,
                l,
            } => {
                let gr = kernels::channel_linear_backward(val(*x), val(*w), g, *n, *cin, *cout, *l, self.tracks(*x));
                if let Some(dx) = gr.dx {
                    out.push((*x, dx));
                }
                out.push((*w, gr.dw));
                if let Some(b) = b {
                    out.push((*b, gr.db));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                out.push((*x, dx));
            }
            Op::AdaptiveAvgPool2d { x, p } => {
                let dims = self.nodes[x.0].value.dims4().expect("4-D");
                out.push((*x, kernels::adaptive_avg_pool_backward(g, dims, *p)));
            }
            Op::Softmax { x, d } => {
                out.push((*x, kernels::softmax_backward(self.nodes[i].value.data(), g, *d)));
            }
            Op::BilinearResize { x } => {
                let dims = self.nodes[x.0].value.dims4().expect("4-D");
                let [_, _, ho, wo] = self.nodes[i].value.dims4().expect("4-D");
                out.push((*x, kernels::bilinear_backward(g, dims, ho, wo)));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                let blen = val(*b).len();
                let mut db = vec![T::zero(); blen];
                for chunk in g.chunks(blen) {
                    db.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                }
                out.push((*b, db));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                out.push((*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()));
                out.push((*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect()));
            }
            Op::Scale { x, s } => {
                out.push((*x, g.iter().map(|&gv| gv * *s).collect()));
            }
            Op::Relu { x } => {
                let xv = val(*x);
                out.push((
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Sum { x } => out.push((*x, vec![g[0]; val(*x).len()])),
            Op::Mean { x } => {
                let len = val(*x).len();
                out.push((*x, vec![g[0] / T::lit(len as f64); len]));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::ConcatChannels { parts } => {
                let [n, total, h, w] = self.nodes[i].value.dims4().expect("4-D");
                let l = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    let mut dp = Vec::with_capacity(n * c * l);
                    for ni in 0..n {
                        dp.extend_from_slice(&g[(ni * total + offset) * l..(ni * total + offset + c) * l]);
                    }
                    offset += c;
                    out.push((p, dp));
                }
            }
            Op::CrossAttention {
                q,
                k,
                v,
                geom,
                scale,
                probs,
            } => {
                let gr = kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, geom, *scale);
                out.push((*q, gr.dq));
                out.push((*k, gr.dk));
                out.push((*v, gr.dv));
            }
            Op::CrossEntropy {
                logits,
                labels,
                dims,
                ignore,
                count,
                probs,
            } => {
                let [n, k, l] = *dims;
                out.push((
                    *logits,
                    kernels::cross_entropy_backward(probs, labels, n, k, l, *ignore, *count, g[0]),
                ));
            }
        }
        out
    }
}

/// Layout of saved attention probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub n: usize,
    pub heads: usize,
    pub lq: usize,
    pub lk: usize,
}
