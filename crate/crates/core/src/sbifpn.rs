//! Cross-scale fusion necks.
//!
//! The symmetric neck runs a top-down pathway and a bottom-up pathway in
//! parallel, both starting from the projected backbone levels `P`, and then
//! blends the two per level:
//!
//! ```text
//! UP[hi-1] = F(P[hi-1], up(P[hi]))
//! UP[i]    = F(P[i], up(P[i+1]), up(UP[i+1]))          lo <= i < hi-1
//! DP[lo+1] = F(P[lo+1], down(P[lo]))
//! DP[i]    = F(P[i], down(P[i-1]), down(DP[i-1]))      lo+1 < i <= hi
//! OP[lo]   = F(P[lo], UP[lo])
//! OP[hi]   = F(P[hi], DP[hi])
//! OP[i]    = F(UP[i], DP[i])                           lo < i < hi
//! ```
//!
//! Every `F` is a [`FusionNode`] with its own weights. Two sequential
//! baselines (FPN followed by a bottom-up path, and the BiFPN layer) share
//! the same node type so they can be swapped in for ablations.

use std::fmt;
use std::str::FromStr;

use ef_tensor::nn::{Conv2dSpec, ConvNormAct};
use ef_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::pyramid::Pyramid;

pub const FUSION_EPS: f64 = 1e-4;

/// Post-fusion transform of a node.
#[derive(Clone, Debug)]
pub enum NodeTransform {
    /// 3x3 convolution, normalization and SiLU at pyramid width.
    ConvNormAct(ConvNormAct),
    /// Pass-through; the node output is the normalized weighted sum.
    Identity,
}

/// Fast normalized fusion followed by a transform.
#[derive(Clone, Debug)]
pub struct FusionNode {
    pub weights: ParamId,
    pub arity: usize,
    pub eps: f64,
    pub transform: NodeTransform,
}

impl FusionNode {
    /// Raw weights start at one.
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, arity: usize, width: usize, rng: &mut R) -> Self {
        let conv = ConvNormAct::build(
            store,
            &format!("{name}.post"),
            Conv2dSpec::new(width, width, 3),
            true,
            rng,
        );
        Self {
            transform: NodeTransform::ConvNormAct(conv),
            ..Self::identity(store, name, arity)
        }
    }

    pub fn identity(store: &mut ParamStore, name: &str, arity: usize) -> Self {
        assert!((2..=3).contains(&arity), "fusion nodes take 2 or 3 inputs");
        let weights = store.add(format!("{name}.weights"), Tensor::full([arity, 1, 1, 1], 1.0));
        Self {
            weights,
            arity,
            eps: FUSION_EPS,
            transform: NodeTransform::Identity,
        }
    }

    /// `sum_k relu(w_k) x_k / (eps + sum_j relu(w_j))`, before the transform.
    pub fn blend(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.arity {
            return Err(Error::Structure(format!(
                "fusion node takes {} inputs, got {}",
                self.arity,
                inputs.len()
            )));
        }
        let shape = tape.shape(inputs[0]);
        if let Some(bad) = inputs.iter().find(|v| tape.shape(**v) != shape) {
            return Err(Error::Structure(format!(
                "fusion inputs disagree: {shape:?} vs {:?}",
                tape.shape(*bad)
            )));
        }
        let w = tape.param(self.weights);
        Ok(tape.fuse(inputs, w, self.eps))
    }

    pub fn forward(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
        let blended = self.blend(tape, inputs)?;
        Ok(match &self.transform {
            NodeTransform::ConvNormAct(c) => c.forward(tape, blended),
            NodeTransform::Identity => blended,
        })
    }

    /// Rectified, normalized weights as used by [`FusionNode::blend`].
    pub fn normalized_weights(&self, store: &ParamStore) -> Vec<f64> {
        let raw = store.get(self.weights).data();
        let denom = self.eps + raw.iter().map(|w| w.max(0.0)).sum::<f64>();
        raw.iter().map(|w| w.max(0.0) / denom).collect()
    }
}

/// Weighted fusion of same-shape maps through `node`.
pub fn fuse_weighted(tape: &mut Tape, inputs: &[Var], node: &FusionNode) -> Result<Var> {
    node.forward(tape, inputs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeckKind {
    SBiFpn,
    FpnPanet,
    BiFpn,
}

impl NeckKind {
    pub const ALL: [NeckKind; 3] = [NeckKind::SBiFpn, NeckKind::FpnPanet, NeckKind::BiFpn];

    pub fn as_str(self) -> &'static str {
        match self {
            NeckKind::SBiFpn => "sbifpn",
            NeckKind::FpnPanet => "fpn_panet",
            NeckKind::BiFpn => "bifpn",
        }
    }
}

impl fmt::Display for NeckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NeckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NeckKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(vec![format!(
                "unknown neck `{s}` (expected sbifpn, fpn_panet or bifpn)"
            )])
        })
    }
}

/// How fusion nodes are constructed; tests use [`NodeStyle::Identity`] to
/// evaluate the pure fusion algebra.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeStyle {
    Conv,
    Identity,
}

struct NodeFactory<'a, R: Rng + ?Sized> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    width: usize,
    style: NodeStyle,
}

impl<R: Rng + ?Sized> NodeFactory<'_, R> {
    fn make(&mut self, name: &str, arity: usize) -> FusionNode {
        match self.style {
            NodeStyle::Conv => FusionNode::build(self.store, name, arity, self.width, self.rng),
            NodeStyle::Identity => FusionNode::identity(self.store, name, arity),
        }
    }
}

fn check_levels(lo: usize, hi: usize) -> Result<()> {
    if hi < lo + 1 {
        return Err(Error::Config(vec![format!(
            "a fusion neck needs at least two levels, got {lo}..={hi}"
        )]));
    }
    Ok(())
}

fn up(tape: &mut Tape, v: Var) -> Var {
    tape.upsample2(v)
}

fn down(tape: &mut Tape, v: Var) -> Var {
    tape.max_pool2(v)
}

/// Intermediate and final maps of one symmetric-neck evaluation.
#[derive(Clone, Debug)]
pub struct SbifpnOutputs {
    pub up: Pyramid,
    pub down: Pyramid,
    pub out: Pyramid,
}

/// Symmetric bi-directional pyramid over levels `lo..=hi`.
#[derive(Clone, Debug)]
pub struct SBiFpn {
    lo: usize,
    hi: usize,
    /// Top-down nodes for levels `lo..hi`.
    up_nodes: Vec<FusionNode>,
    /// Bottom-up nodes for levels `lo+1..=hi`.
    down_nodes: Vec<FusionNode>,
    /// Blend nodes for levels `lo..=hi`.
    out_nodes: Vec<FusionNode>,
}

impl SBiFpn {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        lo: usize,
        hi: usize,
        width: usize,
        style: NodeStyle,
        rng: &mut R,
    ) -> Result<Self> {
        check_levels(lo, hi)?;
        let mut f = NodeFactory {
            store,
            rng,
            width,
            style,
        };
        let up_nodes = (lo..hi)
            .map(|i| f.make(&format!("neck.up{i}"), if i == hi - 1 { 2 } else { 3 }))
            .collect();
        let down_nodes = (lo + 1..=hi)
            .map(|i| f.make(&format!("neck.down{i}"), if i == lo + 1 { 2 } else { 3 }))
            .collect();
        let out_nodes = (lo..=hi).map(|i| f.make(&format!("neck.out{i}"), 2)).collect();
        Ok(Self {
            lo,
            hi,
            up_nodes,
            down_nodes,
            out_nodes,
        })
    }

    pub fn levels(&self) -> (usize, usize) {
        (self.lo, self.hi)
    }

    pub fn up_node(&self, level: usize) -> &FusionNode {
        &self.up_nodes[level - self.lo]
    }

    pub fn down_node(&self, level: usize) -> &FusionNode {
        &self.down_nodes[level - self.lo - 1]
    }

    pub fn out_node(&self, level: usize) -> &FusionNode {
        &self.out_nodes[level - self.lo]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &FusionNode> {
        self.up_nodes.iter().chain(&self.down_nodes).chain(&self.out_nodes)
    }

    /// Top-down pathway, levels `lo..hi`.
    pub fn top_down(&self, tape: &mut Tape, p: &Pyramid) -> Result<Pyramid> {
        p.expect_levels(self.lo, self.hi)?;
        let mut out = Pyramid::new();
        let top = self.hi - 1;
        let p_hi = up(tape, p.get(self.hi)?);
        let mut prev = tape.scoped(format!("up{top}"), |t| {
            self.up_node(top).forward(t, &[p.get(top)?, p_hi])
        })?;
        out.insert(top, prev);
        for i in (self.lo..top).rev() {
            let pu = up(tape, p.get(i + 1)?);
            let uu = up(tape, prev);
            prev = tape.scoped(format!("up{i}"), |t| self.up_node(i).forward(t, &[p.get(i)?, pu, uu]))?;
            out.insert(i, prev);
        }
        Ok(out)
    }

    /// Bottom-up pathway, levels `lo+1..=hi`.
    pub fn bottom_up(&self, tape: &mut Tape, p: &Pyramid) -> Result<Pyramid> {
        p.expect_levels(self.lo, self.hi)?;
        let mut out = Pyramid::new();
        let first = self.lo + 1;
        let p_lo = down(tape, p.get(self.lo)?);
        let mut prev = tape.scoped(format!("down{first}"), |t| {
            self.down_node(first).forward(t, &[p.get(first)?, p_lo])
        })?;
        out.insert(first, prev);
        for i in first + 1..=self.hi {
            let pd = down(tape, p.get(i - 1)?);
            let dd = down(tape, prev);
            prev = tape.scoped(format!("down{i}"), |t| {
                self.down_node(i).forward(t, &[p.get(i)?, pd, dd])
            })?;
            out.insert(i, prev);
        }
        Ok(out)
    }

    /// Per-level blend of the two pathways.
    pub fn blend_outputs(&self, tape: &mut Tape, p: &Pyramid, up: &Pyramid, dp: &Pyramid) -> Result<Pyramid> {
        let mut out = Pyramid::new();
        for i in self.lo..=self.hi {
            let pair = if i == self.lo {
                [p.get(i)?, up.get(i)?]
            } else if i == self.hi {
                [p.get(i)?, dp.get(i)?]
            } else {
                [up.get(i)?, dp.get(i)?]
            };
            let v = tape.scoped(format!("out{i}"), |t| self.out_node(i).forward(t, &pair))?;
            out.insert(i, v);
        }
        Ok(out)
    }

    pub fn forward_detailed(&self, tape: &mut Tape, p: &Pyramid) -> Result<SbifpnOutputs> {
        let up = self.top_down(tape, p)?;
        let down = self.bottom_up(tape, p)?;
        let out = self.blend_outputs(tape, p, &up, &down)?;
        Ok(SbifpnOutputs { up, down, out })
    }
}

/// Top-down FPN followed by a sequential bottom-up path.
#[derive(Clone, Debug)]
pub struct FpnPanet {
    lo: usize,
    hi: usize,
    td_nodes: Vec<FusionNode>,
    bu_nodes: Vec<FusionNode>,
}

impl FpnPanet {
    fn build<R: Rng + ?Sized>(f: &mut NodeFactory<'_, R>, lo: usize, hi: usize, rep: usize) -> Self {
        let td_nodes = (lo..hi).map(|i| f.make(&format!("neck.r{rep}.td{i}"), 2)).collect();
        let bu_nodes = (lo + 1..=hi)
            .map(|i| f.make(&format!("neck.r{rep}.bu{i}"), 2))
            .collect();
        Self {
            lo,
            hi,
            td_nodes,
            bu_nodes,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Pyramid) -> Result<Pyramid> {
        let mut td = Pyramid::new();
        let mut prev = p.get(self.hi)?;
        td.insert(self.hi, prev);
        for i in (self.lo..self.hi).rev() {
            let u = up(tape, prev);
            prev = tape.scoped(format!("td{i}"), |t| {
                self.td_nodes[i - self.lo].forward(t, &[p.get(i)?, u])
            })?;
            td.insert(i, prev);
        }
        let mut out = Pyramid::new();
        let mut prev = td.get(self.lo)?;
        out.insert(self.lo, prev);
        for i in self.lo + 1..=self.hi {
            let d = down(tape, prev);
            prev = tape.scoped(format!("bu{i}"), |t| {
                self.bu_nodes[i - self.lo - 1].forward(t, &[td.get(i)?, d])
            })?;
            out.insert(i, prev);
        }
        Ok(out)
    }

    fn node_count(&self) -> usize {
        self.td_nodes.len() + self.bu_nodes.len()
    }
}

/// One BiFPN layer: top-down intermediates, then a bottom-up output path
/// with skip connections from the inputs.
#[derive(Clone, Debug)]
pub struct BiFpn {
    lo: usize,
    hi: usize,
    /// Intermediate nodes for levels `lo+1..hi`.
    td_nodes: Vec<FusionNode>,
    /// Output nodes for levels `lo..=hi`.
    out_nodes: Vec<FusionNode>,
}

impl BiFpn {
    fn build<R: Rng + ?Sized>(f: &mut NodeFactory<'_, R>, lo: usize, hi: usize, rep: usize) -> Self {
        let td_nodes = (lo + 1..hi).map(|i| f.make(&format!("neck.r{rep}.td{i}"), 2)).collect();
        let out_nodes = (lo..=hi)
            .map(|i| {
                let arity = if i == lo || i == hi { 2 } else { 3 };
                f.make(&format!("neck.r{rep}.out{i}"), arity)
            })
            .collect();
        Self {
            lo,
            hi,
            td_nodes,
            out_nodes,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Pyramid) -> Result<Pyramid> {
        let mut td = Pyramid::new();
        let mut prev = p.get(self.hi)?;
        td.insert(self.hi, prev);
        for i in (self.lo + 1..self.hi).rev() {
            let u = up(tape, prev);
            prev = tape.scoped(format!("td{i}"), |t| {
                self.td_nodes[i - self.lo - 1].forward(t, &[p.get(i)?, u])
            })?;
            td.insert(i, prev);
        }
        let mut out = Pyramid::new();
        let u = up(tape, td.get(self.lo + 1)?);
        let mut prev = tape.scoped(format!("out{}", self.lo), |t| {
            self.out_nodes[0].forward(t, &[p.get(self.lo)?, u])
        })?;
        out.insert(self.lo, prev);
        for i in self.lo + 1..=self.hi {
            let d = down(tape, prev);
            let inputs = if i == self.hi {
                vec![p.get(i)?, d]
            } else {
                vec![p.get(i)?, td.get(i)?, d]
            };
            prev = tape.scoped(format!("out{i}"), |t| self.out_nodes[i - self.lo].forward(t, &inputs))?;
            out.insert(i, prev);
        }
        Ok(out)
    }

    fn node_count(&self) -> usize {
        self.td_nodes.len() + self.out_nodes.len()
    }
}

/// A fusion neck selected by [`NeckKind`].
#[derive(Clone, Debug)]
pub enum Neck {
    SBiFpn(SBiFpn),
    FpnPanet(Vec<FpnPanet>),
    BiFpn(Vec<BiFpn>),
}

/// Builds a neck over levels `lo..=hi`.
///
/// The symmetric neck is evaluated exactly once (`depth` must be 1); the
/// sequential baselines may be stacked `depth` times.
#[allow(clippy::too_many_arguments)]
pub fn build_neck<R: Rng + ?Sized>(
    store: &mut ParamStore,
    kind: NeckKind,
    lo: usize,
    hi: usize,
    width: usize,
    depth: usize,
    style: NodeStyle,
    rng: &mut R,
) -> Result<Neck> {
    if depth == 0 {
        return Err(Error::Config(vec!["neck depth must be at least 1".into()]));
    }
    check_levels(lo, hi)?;
    match kind {
        NeckKind::SBiFpn => {
            if depth != 1 {
                return Err(Error::Config(vec![format!(
                    "the symmetric neck is not iterated; depth must be 1, got {depth}"
                )]));
            }
            Ok(Neck::SBiFpn(SBiFpn::build(store, lo, hi, width, style, rng)?))
        }
        NeckKind::FpnPanet => {
            let mut f = NodeFactory {
                store,
                rng,
                width,
                style,
            };
            Ok(Neck::FpnPanet(
                (0..depth).map(|r| FpnPanet::build(&mut f, lo, hi, r)).collect(),
            ))
        }
        NeckKind::BiFpn => {
            let mut f = NodeFactory {
                store,
                rng,
                width,
                style,
            };
            Ok(Neck::BiFpn(
                (0..depth).map(|r| BiFpn::build(&mut f, lo, hi, r)).collect(),
            ))
        }
    }
}

impl Neck {
    pub fn kind(&self) -> NeckKind {
        match self {
            Neck::SBiFpn(_) => NeckKind::SBiFpn,
            Neck::FpnPanet(_) => NeckKind::FpnPanet,
            Neck::BiFpn(_) => NeckKind::BiFpn,
        }
    }

    /// Number of fusion nodes, including the six per-level blends of the
    /// symmetric neck.
    pub fn fusion_node_count(&self) -> usize {
        match self {
            Neck::SBiFpn(n) => n.nodes().count(),
            Neck::FpnPanet(layers) => layers.iter().map(FpnPanet::node_count).sum(),
            Neck::BiFpn(layers) => layers.iter().map(BiFpn::node_count).sum(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Pyramid) -> Result<Pyramid> {
        tape.push_scope("neck");
        let res = self.forward_inner(tape, p);
        tape.pop_scope();
        res
    }

    fn forward_inner(&self, tape: &mut Tape, p: &Pyramid) -> Result<Pyramid> {
        match self {
            Neck::SBiFpn(n) => Ok(n.forward_detailed(tape, p)?.out),
            Neck::FpnPanet(layers) => {
                let mut x = p.clone();
                for (r, l) in layers.iter().enumerate() {
                    l.check(&x)?;
                    x = tape.scoped(format!("r{r}"), |t| l.forward(t, &x))?;
                }
                Ok(x)
            }
            Neck::BiFpn(layers) => {
                let mut x = p.clone();
                for (r, l) in layers.iter().enumerate() {
                    l.check(&x)?;
                    x = tape.scoped(format!("r{r}"), |t| l.forward(t, &x))?;
                }
                Ok(x)
            }
        }
    }
}

impl FpnPanet {
    fn check(&self, p: &Pyramid) -> Result<()> {
        p.expect_levels(self.lo, self.hi)
    }
}

impl BiFpn {
    fn check(&self, p: &Pyramid) -> Result<()> {
        p.expect_levels(self.lo, self.hi)
    }
}

/// Sets every weight of a 3x3 node convolution to the identity kernel.
pub fn make_identity_conv(store: &mut ParamStore, conv: &ef_tensor::nn::Conv2d) {
    let [cout, cin, kh, kw] = store.get(conv.weight).shape();
    assert_eq!(cout, cin, "identity kernels need equal channel counts");
    let mut w = Tensor::zeros([cout, cin, kh, kw]);
    for c in 0..cout {
        w.set(c, c, kh / 2, kw / 2, 1.0);
    }
    store.set(conv.weight, w);
    if let Some(b) = conv.bias {
        store.set(b, Tensor::zeros([cout, 1, 1, 1]));
    }
}
