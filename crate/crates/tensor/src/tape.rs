use std::collections::{HashMap, HashSet};

use crate::gemm::gemm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::numel;
use crate::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Coarse operation classes used for complexity accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv,
    Norm,
    Activation,
    Pool,
    Upsample,
    Fusion,
    Elementwise,
    Concat,
    Reduce,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::Norm => "norm",
            OpKind::Activation => "activation",
            OpKind::Pool => "pool",
            OpKind::Upsample => "upsample",
            OpKind::Fusion => "fusion",
            OpKind::Elementwise => "elementwise",
            OpKind::Concat => "concat",
            OpKind::Reduce => "reduce",
        }
    }
}

/// One evaluated operation, as seen by the profiler.
///
/// `params` counts only parameters that had not been used earlier on the
/// same tape, so shared weights are charged once.
#[derive(Clone, Debug)]
pub struct OpRecord {
    pub scope: String,
    pub kind: OpKind,
    pub detail: String,
    pub macs: u64,
    pub params: u64,
    pub out_shape: Shape,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: (usize, usize),
    },
    Add(Var, Var),
    Mul {
        x: Var,
        gate: Var,
    },
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    Fuse {
        inputs: Vec<Var>,
        weights: Var,
        eps: f64,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    SpatialMean(Var),
    SpatialMax {
        x: Var,
        argmax: Vec<u32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated.
///
/// Parameters are read from a borrowed [`ParamStore`]; each parameter gets a
/// single node per tape no matter how many times it is used, so gradients of
/// shared weights accumulate naturally.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    dry: bool,
    scopes: Vec<String>,
    records: Vec<OpRecord>,
    charged: HashSet<ParamId>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            dry: false,
            scopes: Vec::new(),
            records: Vec::new(),
            charged: HashSet::new(),
        }
    }

    /// A tape that propagates shapes only. Values are unavailable and
    /// [`Tape::backward`] panics; op records are still collected.
    pub fn dry(params: &'p ParamStore) -> Self {
        Self {
            dry: true,
            ..Self::new(params)
        }
    }

    pub fn is_dry(&self) -> bool {
        self.dry
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records(&self) -> &[OpRecord] {
        &self.records
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scopes.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    pub fn scope(&self) -> String {
        self.scopes.join(".")
    }

    /// Runs `f` with `name` pushed onto the scope stack.
    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.push_scope(name);
        let out = f(self);
        self.pop_scope();
        out
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        let value = if self.dry {
            Tensor::phantom(value.shape())
        } else {
            value
        };
        self.push(value, Op::Leaf, false)
    }

    /// Shape-only input for dry tapes.
    pub fn input_shape(&mut self, shape: Shape) -> Var {
        assert!(self.dry, "input_shape is only valid on dry tapes");
        self.push(Tensor::phantom(shape), Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = if self.dry {
            Tensor::phantom(self.params.get(id).shape())
        } else {
            self.params.get(id).clone()
        };
        let v = self.push(value, Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, kind: OpKind, detail: String, macs: u64, uses: &[Var], out_shape: Shape) {
        let mut params = 0u64;
        for v in uses {
            if let Op::Param(id) = self.nodes[v.0].op {
                if self.charged.insert(id) {
                    params += self.params.get(id).numel() as u64;
                }
            }
        }
        self.records.push(OpRecord {
            scope: self.scope(),
            kind,
            detail,
            macs,
            params,
            out_shape,
        });
    }

    fn alloc(&self, shape: Shape) -> Tensor {
        if self.dry {
            Tensor::phantom(shape)
        } else {
            Tensor::zeros(shape)
        }
    }

    // ----------------------------------------------------------------------
    // operations

    /// 2-D cross-correlation with kernel `[cout, cin, kh, kw]`, symmetric
    /// stride and per-axis zero padding `(pad_h, pad_w)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: (usize, usize)) -> Var {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, kh, kw] = self.shape(w);
        assert_eq!(cin, wcin, "conv input channels {cin} != kernel channels {wcin}");
        assert!(stride >= 1);
        if let Some(b) = b {
            assert_eq!(self.shape(b), [cout, 1, 1, 1], "conv bias shape");
        }
        assert!(
            h + 2 * pad.0 >= kh && wd + 2 * pad.1 >= kw,
            "kernel larger than padded input"
        );
        let ho = (h + 2 * pad.0 - kh) / stride + 1;
        let wo = (wd + 2 * pad.1 - kw) / stride + 1;
        let out_shape = [n, cout, ho, wo];
        let mut out = self.alloc(out_shape);
        if !self.dry {
            let geom = ConvGeom {
                cin,
                h,
                w: wd,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            };
            let k = cin * kh * kw;
            let p = ho * wo;
            let weight = self.value(w).data();
            let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { k * p }];
            for s in 0..n {
                let xs = self.value(x).sample(s);
                let src: &[f64] = if geom.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &geom, &mut cols);
                    &cols
                };
                gemm(cout, k, p, weight, false, src, false, 0.0, out.sample_mut(s));
            }
            if let Some(b) = b {
                let bias = self.value(b).data().to_vec();
                for s in 0..n {
                    let os = out.sample_mut(s);
                    for (co, bv) in bias.iter().enumerate() {
                        for v in &mut os[co * p..(co + 1) * p] {
                            *v += bv;
                        }
                    }
                }
            }
        }
        let macs = (kh * kw * cin * cout * ho * wo * n) as u64;
        let detail = format!("{kh}x{kw}/s{stride} {cin}->{cout}");
        let mut uses = vec![w];
        uses.extend(b);
        self.record(OpKind::Conv, detail, macs, &uses, out_shape);
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        self.push(out, Op::Conv { x, w, b, stride, pad }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "add shape mismatch");
        let mut out = self.alloc(shape);
        if !self.dry {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for (o, (x, y)) in out.data_mut().iter_mut().zip(av.iter().zip(bv)) {
                *o = x + y;
            }
        }
        self.record(OpKind::Elementwise, "add".into(), 0, &[], shape);
        let needs = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), needs)
    }

    /// `x * gate`, with `gate` broadcast over any of its unit axes
    /// (`[n,1,h,w]` spatial gates or `[n,c,1,1]` channel gates).
    pub fn mul(&mut self, x: Var, gate: Var) -> Var {
        let shape = self.shape(x);
        let gshape = self.shape(gate);
        for ax in 0..4 {
            assert!(
                gshape[ax] == shape[ax] || gshape[ax] == 1,
                "gate {gshape:?} does not broadcast to {shape:?}"
            );
        }
        let mut out = self.alloc(shape);
        if !self.dry {
            let xv = self.value(x);
            let gv = self.value(gate);
            let bc = Broadcast::new(shape, gshape);
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = xv.data()[i] * gv.data()[bc.map(i)];
            }
        }
        self.record(OpKind::Elementwise, "gate".into(), 0, &[], shape);
        let needs = self.needs(&[x, gate]);
        self.push(out, Op::Mul { x, gate }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, "silu", |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    fn unary(&mut self, x: Var, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(x);
        let out = if self.dry {
            Tensor::phantom(shape)
        } else {
            self.value(x).map(f)
        };
        self.record(OpKind::Activation, name.into(), 0, &[], shape);
        let needs = self.needs(&[x]);
        self.push(out, op, needs)
    }

    /// Group normalization with per-channel affine `gamma`, `beta` of shape
    /// `[c,1,1,1]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let shape = self.shape(x);
        let [n, c, h, w] = shape;
        assert!(
            groups >= 1 && c % groups == 0,
            "{c} channels not divisible into {groups} groups"
        );
        assert_eq!(self.shape(gamma), [c, 1, 1, 1]);
        assert_eq!(self.shape(beta), [c, 1, 1, 1]);
        let mut out = self.alloc(shape);
        let mut stats = Vec::new();
        if !self.dry {
            let cg = c / groups;
            let m = cg * h * w;
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            let od = out.data_mut();
            for s in 0..n {
                for g in 0..groups {
                    let start = (s * c + g * cg) * h * w;
                    let seg = &xv[start..start + m];
                    let mean = seg.iter().sum::<f64>() / m as f64;
                    let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let rstd = 1.0 / (var + GN_EPS).sqrt();
                    for (j, v) in seg.iter().enumerate() {
                        let ch = g * cg + j / (h * w);
                        od[start + j] = (v - mean) * rstd * gv[ch] + bv[ch];
                    }
                    stats.push((mean, rstd));
                }
            }
        }
        self.record(OpKind::Norm, format!("groupnorm g{groups}"), 0, &[gamma, beta], shape);
        let needs = self.needs(&[x, gamma, beta]);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            needs,
        )
    }

    /// Fast normalized fusion: `sum_k relu(w_k) x_k / (eps + sum_j relu(w_j))`
    /// with `weights` of shape `[k,1,1,1]`.
    pub fn fuse(&mut self, inputs: &[Var], weights: Var, eps: f64) -> Var {
        assert!(!inputs.is_empty());
        let shape = self.shape(inputs[0]);
        for v in inputs {
            assert_eq!(self.shape(*v), shape, "fusion inputs must share a shape");
        }
        assert_eq!(self.shape(weights), [inputs.len(), 1, 1, 1]);
        let mut out = self.alloc(shape);
        if !self.dry {
            let (r, denom) = rectified(self.value(weights).data(), eps);
            let od = out.data_mut();
            for (k, v) in inputs.iter().enumerate() {
                let coef = r[k] / denom;
                if coef == 0.0 {
                    continue;
                }
                for (o, x) in od.iter_mut().zip(self.value(*v).data()) {
                    *o += coef * x;
                }
            }
        }
        let macs = (inputs.len() * numel(shape)) as u64;
        self.record(
            OpKind::Fusion,
            format!("fuse k{}", inputs.len()),
            macs,
            &[weights],
            shape,
        );
        let mut deps = inputs.to_vec();
        deps.push(weights);
        let needs = self.needs(&deps);
        self.push(
            out,
            Op::Fuse {
                inputs: inputs.to_vec(),
                weights,
                eps,
            },
            needs,
        )
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "max_pool2 needs even spatial dims, got {h}x{w}"
        );
        let shape = [n, c, h / 2, w / 2];
        let mut out = self.alloc(shape);
        let mut argmax = Vec::new();
        if !self.dry {
            let xv = self.value(x);
            argmax.reserve(out.numel());
            let od = out.data_mut();
            let mut o = 0;
            for s in 0..n {
                for ch in 0..c {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let mut best = f64::NEG_INFINITY;
                            let mut arg = 0;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = xv.index(s, ch, 2 * oy + dy, 2 * ox + dx);
                                if xv.data()[i] > best {
                                    best = xv.data()[i];
                                    arg = i;
                                }
                            }
                            od[o] = best;
                            argmax.push(arg as u32);
                            o += 1;
                        }
                    }
                }
            }
        }
        self.record(OpKind::Pool, "maxpool 2x2/s2".into(), 0, &[], shape);
        let needs = self.needs(&[x]);
        self.push(out, Op::MaxPool2 { x, argmax }, needs)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let shape = [n, c, 2 * h, 2 * w];
        let mut out = self.alloc(shape);
        if !self.dry {
            let xv = self.value(x);
            for s in 0..n {
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            out.set(s, ch, y, xx, xv.at(s, ch, y / 2, xx / 2));
                        }
                    }
                }
            }
        }
        self.record(OpKind::Upsample, "nearest 2x".into(), 0, &[], shape);
        let needs = self.needs(&[x]);
        self.push(out, Op::Upsample2(x), needs)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [n, _, h, w] = self.shape(parts[0]);
        let mut c = 0;
        for p in parts {
            let [pn, pc, ph, pw] = self.shape(*p);
            assert_eq!([pn, ph, pw], [n, h, w], "concat parts must agree outside channels");
            c += pc;
        }
        let shape = [n, c, h, w];
        let mut out = self.alloc(shape);
        if !self.dry {
            for s in 0..n {
                let mut off = 0;
                for p in parts {
                    let src = self.value(*p).sample(s);
                    out.sample_mut(s)[off..off + src.len()].copy_from_slice(src);
                    off += src.len();
                }
            }
        }
        self.record(OpKind::Concat, format!("concat {}", parts.len()), 0, &[], shape);
        let needs = self.needs(parts);
        self.push(out, Op::Concat(parts.to_vec()), needs)
    }

    /// Mean over channels, `[n,c,h,w] -> [n,1,h,w]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let shape = [n, 1, h, w];
        let mut out = self.alloc(shape);
        if !self.dry {
            let xv = self.value(x);
            for s in 0..n {
                for i in 0..h * w {
                    let sum: f64 = (0..c).map(|ch| xv.sample(s)[ch * h * w + i]).sum();
                    out.sample_mut(s)[i] = sum / c as f64;
                }
            }
        }
        self.record(OpKind::Reduce, "channel mean".into(), 0, &[], shape);
        let needs = self.needs(&[x]);
        self.push(out, Op::ChannelMean(x), needs)
    }

    /// Max over channels, `[n,c,h,w] -> [n,1,h,w]`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let shape = [n, 1, h, w];
        let mut out = self.alloc(shape);
        let mut argmax = Vec::new();
        if !self.dry {
            let xv = self.value(x);
            for s in 0..n {
                for i in 0..h * w {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for ch in 0..c {
                        let j = ((s * c + ch) * h * w) + i;
                        if xv.data()[j] > best {
                            best = xv.data()[j];
                            arg = j;
                        }
                    }
                    out.sample_mut(s)[i] = best;
                    argmax.push(arg as u32);
                }
            }
        }
        self.record(OpKind::Reduce, "channel max".into(), 0, &[], shape);
        let needs = self.needs(&[x]);
        self.push(out, Op::ChannelMax { x, argmax }, needs)
    }

    /// Global average over space, `[n,c,h,w] -> [n,c,1,1]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let shape = [n, c, 1, 1];
        let mut out = self.alloc(shape);
        if !self.dry {
            let xv = self.value(x).data();
            for (j, o) in out.data_mut().iter_mut().enumerate() {
                *o = xv[j * h * w..(j + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            }
        }
        self.record(OpKind::Reduce, "spatial mean".into(), 0, &[], shape);
        let needs = self.needs(&[x]);
        self.push(out, Op::SpatialMean(x), needs)
    }

    /// Global max over space, `[n,c,h,w] -> [n,c,1,1]`.
    pub fn spatial_max(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let shape = [n, c, 1, 1];
        let mut out = self.alloc(shape);
        let mut argmax = Vec::new();
        if !self.dry {
            let xv = self.value(x).data();
            for (j, o) in out.data_mut().iter_mut().enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                let start = j * h * w;
                for (i, &v) in xv[start..start + h * w].iter().enumerate() {
                    if v > best {
                        best = v;
                        arg = start + i;
                    }
                }
                *o = best;
                argmax.push(arg as u32);
            }
        }
        self.record(OpKind::Reduce, "spatial max".into(), 0, &[], shape);
        let needs = self.needs(&[x]);
        self.push(out, Op::SpatialMax { x, argmax }, needs)
    }

    // ----------------------------------------------------------------------
    // reverse pass

    /// Propagates the given output cotangents back through the tape.
    ///
    /// Seeding `(y, r)` computes gradients of `<r, y>`; multiple seeds add.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        assert!(!self.dry, "cannot differentiate a dry tape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(v), g.shape(), "seed shape mismatch");
            last = last.max(v.0);
            accumulate(&mut grads[v.0], g);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let params = self
            .param_vars
            .iter()
            .filter_map(|(id, v)| grads[v.0].take().map(|g| (*id, g)))
            .collect();
        Gradients { params, leaves: grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, stride, pad } => self.backprop_conv(*x, *w, *b, *stride, *pad, g, grads),
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], g.clone());
                    }
                }
            }
            Op::Mul { x, gate } => {
                let shape = self.shape(*x);
                let gshape = self.shape(*gate);
                let bc = Broadcast::new(shape, gshape);
                let xv = self.value(*x).data();
                let gv = self.value(*gate).data();
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(shape);
                    for (i, d) in dx.data_mut().iter_mut().enumerate() {
                        *d = g.data()[i] * gv[bc.map(i)];
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*gate) {
                    let mut dg = Tensor::zeros(gshape);
                    for (i, (gi, xi)) in g.data().iter().zip(xv).enumerate() {
                        dg.data_mut()[bc.map(i)] += gi * xi;
                    }
                    accumulate(&mut grads[gate.0], dg);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let mut dx = g.clone();
                for (d, yv) in dx.data_mut().iter_mut().zip(y) {
                    *d *= yv * (1.0 - yv);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(xv) {
                    let s = sigmoid(*v);
                    *d *= s * (1.0 + v * (1.0 - s));
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(xv) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => self.backprop_group_norm(*x, *gamma, *beta, *groups, stats, g, grads),
            Op::Fuse { inputs, weights, eps } => {
                let wv = self.value(*weights).data();
                let (r, denom) = rectified(wv, *eps);
                for (k, v) in inputs.iter().enumerate() {
                    if self.wants(*v) {
                        let coef = r[k] / denom;
                        accumulate(&mut grads[v.0], g.map(|d| d * coef));
                    }
                }
                if self.wants(*weights) {
                    // d out / d w_j = (x_j - out) / denom for w_j > 0
                    let out = node.value.data();
                    let mut dw = Tensor::zeros([inputs.len(), 1, 1, 1]);
                    for (k, v) in inputs.iter().enumerate() {
                        if wv[k] <= 0.0 {
                            continue;
                        }
                        let xv = self.value(*v).data();
                        let s: f64 = g
                            .data()
                            .iter()
                            .zip(xv.iter().zip(out))
                            .map(|(d, (x, o))| d * (x - o))
                            .sum();
                        dw.data_mut()[k] = s / denom;
                    }
                    accumulate(&mut grads[weights.0], dw);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (d, &a) in g.data().iter().zip(argmax) {
                    dx.data_mut()[a as usize] += d;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.shape(*x);
                let mut dx = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let i = dx.index(s, ch, y / 2, xx / 2);
                                dx.data_mut()[i] += g.at(s, ch, y, xx);
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Concat(parts) => {
                let n = g.n();
                let mut off = 0;
                for p in parts {
                    let shape = self.shape(*p);
                    let len = shape[1] * shape[2] * shape[3];
                    if self.wants(*p) {
                        let mut dp = Tensor::zeros(shape);
                        for s in 0..n {
                            dp.sample_mut(s).copy_from_slice(&g.sample(s)[off..off + len]);
                        }
                        accumulate(&mut grads[p.0], dp);
                    }
                    off += len;
                }
            }
            Op::ChannelMean(x) => {
                let [n, c, h, w] = self.shape(*x);
                let mut dx = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..h * w {
                            dx.sample_mut(s)[ch * h * w + i] = g.sample(s)[i] / c as f64;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::ChannelMax { x, argmax } | Op::SpatialMax { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (d, &a) in g.data().iter().zip(argmax) {
                    dx.data_mut()[a as usize] += d;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::SpatialMean(x) => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let mut dx = Tensor::zeros([n, c, h, w]);
                for (j, d) in g.data().iter().enumerate() {
                    for v in &mut dx.data_mut()[j * hw..(j + 1) * hw] {
                        *v = d / hw as f64;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: (usize, usize),
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, _, kh, kw] = self.shape(w);
        let [_, _, ho, wo] = g.shape();
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let k = cin * kh * kw;
        let p = ho * wo;
        let weight = self.value(w).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dw = Tensor::zeros(self.shape(w));
        let mut dx = if want_x {
            Some(Tensor::zeros(self.shape(x)))
        } else {
            None
        };
        let pointwise = geom.is_pointwise();
        let mut cols = vec![0.0; if pointwise { 0 } else { k * p }];
        let mut dcols = vec![0.0; if pointwise || !want_x { 0 } else { k * p }];
        for s in 0..n {
            let gs = g.sample(s);
            if want_w {
                let xs = self.value(x).sample(s);
                let src: &[f64] = if pointwise {
                    xs
                } else {
                    im2col(xs, &geom, &mut cols);
                    &cols
                };
                gemm(cout, p, k, gs, false, src, true, 1.0, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                if pointwise {
                    gemm(k, cout, p, weight, true, gs, false, 1.0, dx.sample_mut(s));
                } else {
                    gemm(k, cout, p, weight, true, gs, false, 0.0, &mut dcols);
                    col2im(&dcols, &geom, dx.sample_mut(s));
                }
            }
        }
        if want_w {
            accumulate(&mut grads[w.0], dw);
        }
        if let Some(dx) = dx {
            accumulate(&mut grads[x.0], dx);
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut db = Tensor::zeros([cout, 1, 1, 1]);
                for s in 0..n {
                    let gs = g.sample(s);
                    for co in 0..cout {
                        db.data_mut()[co] += gs[co * p..(co + 1) * p].iter().sum::<f64>();
                    }
                }
                accumulate(&mut grads[b.0], db);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_group_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(f64, f64)],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let [n, c, h, w] = self.shape(x);
        let cg = c / groups;
        let hw = h * w;
        let m = cg * hw;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let mut dgamma = Tensor::zeros([c, 1, 1, 1]);
        let mut dbeta = Tensor::zeros([c, 1, 1, 1]);
        let mut dx = Tensor::zeros([n, c, h, w]);
        let mut dxhat = vec![0.0; m];
        for s in 0..n {
            for grp in 0..groups {
                let (mean, rstd) = stats[s * groups + grp];
                let start = (s * c + grp * cg) * hw;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..m {
                    let ch = grp * cg + j / hw;
                    let xhat = (xv[start + j] - mean) * rstd;
                    let gj = g.data()[start + j];
                    dgamma.data_mut()[ch] += gj * xhat;
                    dbeta.data_mut()[ch] += gj;
                    dxhat[j] = gj * gv[ch];
                    sum_d += dxhat[j];
                    sum_dx += dxhat[j] * xhat;
                }
                let mean_d = sum_d / m as f64;
                let mean_dx = sum_dx / m as f64;
                for j in 0..m {
                    let xhat = (xv[start + j] - mean) * rstd;
                    dx.data_mut()[start + j] = rstd * (dxhat[j] - mean_d - xhat * mean_dx);
                }
            }
        }
        if self.wants(x) {
            accumulate(&mut grads[x.0], dx);
        }
        if self.wants(gamma) {
            accumulate(&mut grads[gamma.0], dgamma);
        }
        if self.wants(beta) {
            accumulate(&mut grads[beta.0], dbeta);
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of a leaf created with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

pub(crate) const GN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn rectified(w: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let r: Vec<f64> = w.iter().map(|v| v.max(0.0)).collect();
    let denom = eps + r.iter().sum::<f64>();
    (r, denom)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

struct Broadcast {
    shape: Shape,
    gshape: Shape,
}

impl Broadcast {
    fn new(shape: Shape, gshape: Shape) -> Self {
        Self { shape, gshape }
    }

    #[inline]
    fn map(&self, i: usize) -> usize {
        let [_, c, h, w] = self.shape;
        let x = i % w;
        let y = (i / w) % h;
        let ch = (i / (w * h)) % c;
        let n = i / (w * h * c);
        let [_, gc, gh, gw] = self.gshape;
        let pick = |v: usize, d: usize| if d == 1 { 0 } else { v };
        ((pick(n, self.gshape[0]) * gc + pick(ch, gc)) * gh + pick(y, gh)) * gw + pick(x, gw)
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: (usize, usize),
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == (0, 0)
    }
}

/// Unfolds one `[cin,h,w]` sample into `[cin*kh*kw, ho*wo]` columns.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad.0 as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad.1 as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let p = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad.1 as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
