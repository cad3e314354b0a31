//! Receptive-field enhancement and stacked spatial/channel attention.

use ef_tensor::nn::{Conv2d, Conv2dSpec, ConvInit, ConvNormAct};
use ef_tensor::{ParamStore, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::pyramid::Pyramid;

/// Channel reduction inside each branch.
pub const RFE_REDUCTION: usize = 4;
pub const DEFAULT_ATTN_DEPTH: usize = 2;
pub const MAX_ATTN_DEPTH: usize = 5;

/// Kernel shapes `(kh, kw)` of the four branches.
pub const RFE_KERNELS: [(usize, usize); 4] = [(1, 5), (1, 3), (3, 1), (5, 1)];

#[derive(Clone, Debug)]
pub struct RfeBranch {
    pub reduce: ConvNormAct,
    pub asym: ConvNormAct,
    pub restore: ConvNormAct,
}

/// Four asymmetric-kernel branches, concatenated, projected and added back
/// to the input.
#[derive(Clone, Debug)]
pub struct RfeBlock {
    pub channels: usize,
    pub branches: Vec<RfeBranch>,
    /// Zero-initialized, so a fresh block is the identity.
    pub project: Conv2d,
}

impl RfeBlock {
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let r = RFE_REDUCTION;
        if channels == 0 || !channels.is_multiple_of(4 * r) {
            return Err(Error::Config(vec![format!(
                "receptive-field block needs channels divisible by {}, got {channels}",
                4 * r
            )]));
        }
        let mid = channels / r;
        let out = channels / 4;
        let branches = RFE_KERNELS
            .iter()
            .enumerate()
            .map(|(k, &(kh, kw))| {
                let b = format!("{name}.branch{k}");
                RfeBranch {
                    reduce: ConvNormAct::build(
                        store,
                        &format!("{b}.reduce"),
                        Conv2dSpec::new(channels, mid, 1),
                        true,
                        rng,
                    ),
                    asym: ConvNormAct::build(
                        store,
                        &format!("{b}.asym"),
                        Conv2dSpec::new(mid, mid, 1).kernel(kh, kw),
                        true,
                        rng,
                    ),
                    restore: ConvNormAct::build(
                        store,
                        &format!("{b}.restore"),
                        Conv2dSpec::new(mid, out, 1),
                        true,
                        rng,
                    ),
                }
            })
            .collect();
        let project = Conv2d::build(
            store,
            &format!("{name}.project"),
            Conv2dSpec::new(channels, channels, 1).init(ConvInit::Zeros),
            rng,
        );
        Ok(Self {
            channels,
            branches,
            project,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let parts: Vec<Var> = self
            .branches
            .iter()
            .enumerate()
            .map(|(k, b)| {
                tape.scoped(format!("branch{k}"), |t| {
                    let y = b.reduce.forward(t, x);
                    let y = b.asym.forward(t, y);
                    b.restore.forward(t, y)
                })
            })
            .collect();
        let cat = tape.concat(&parts);
        let proj = self.project.forward(tape, cat);
        tape.add(x, proj)
    }
}

/// `x * sigmoid(conv7x7([mean_c(x), max_c(x)]))`, one gate per pixel.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub const KERNEL: usize = 7;

    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let conv = Conv2d::build(
            store,
            &format!("{name}.conv"),
            Conv2dSpec::new(2, 1, Self::KERNEL).init(ConvInit::Normal(0.01)),
            rng,
        );
        Self { conv }
    }

    pub fn gate_logits(&self, tape: &mut Tape, x: Var) -> Var {
        let mean = tape.channel_mean(x);
        let max = tape.channel_max(x);
        let stats = tape.concat(&[mean, max]);
        self.conv.forward(tape, stats)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let logits = self.gate_logits(tape, x);
        let gate = tape.sigmoid(logits);
        tape.mul(x, gate)
    }
}

/// `x * sigmoid(mlp(mean_hw(x)) + mlp(max_hw(x)))`, one gate per channel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

impl ChannelAttention {
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / 4).max(1);
        let squeeze = Conv2d::build(
            store,
            &format!("{name}.squeeze"),
            Conv2dSpec::new(channels, hidden, 1),
            rng,
        );
        let excite = Conv2d::build(
            store,
            &format!("{name}.excite"),
            Conv2dSpec::new(hidden, channels, 1).init(ConvInit::Normal(0.01)),
            rng,
        );
        Self { squeeze, excite }
    }

    fn mlp(&self, tape: &mut Tape, v: Var) -> Var {
        let h = self.squeeze.forward(tape, v);
        let h = tape.silu(h);
        self.excite.forward(tape, h)
    }

    pub fn gate_logits(&self, tape: &mut Tape, x: Var) -> Var {
        let mean = tape.spatial_mean(x);
        let max = tape.spatial_max(x);
        let a = self.mlp(tape, mean);
        let b = self.mlp(tape, max);
        tape.add(a, b)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let logits = self.gate_logits(tape, x);
        let gate = tape.sigmoid(logits);
        tape.mul(x, gate)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub spatial: SpatialAttention,
    pub channel: ChannelAttention,
}

/// `depth` spatial-then-channel units applied in sequence; depth 0 is the
/// identity.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    pub units: Vec<AttentionUnit>,
}

impl AttentionStack {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let units = (0..depth)
            .map(|d| AttentionUnit {
                spatial: SpatialAttention::build(store, &format!("{name}.unit{d}.spatial"), rng),
                channel: ChannelAttention::build(store, &format!("{name}.unit{d}.channel"), channels, rng),
            })
            .collect();
        Self { units }
    }

    pub fn depth(&self) -> usize {
        self.units.len()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut y = x;
        for (d, u) in self.units.iter().enumerate() {
            y = tape.scoped(format!("attn{d}"), |t| {
                let s = u.spatial.forward(t, y);
                u.channel.forward(t, s)
            });
        }
        y
    }
}

/// Per-level enhancement: optional receptive-field block, then attention.
#[derive(Clone, Debug)]
pub struct LevelEnhance {
    pub level: usize,
    pub rfe: Option<RfeBlock>,
    pub attention: AttentionStack,
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    pub levels: Vec<LevelEnhance>,
}

impl Enhancer {
    /// One independent block per level in `lo..=hi`.
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        lo: usize,
        hi: usize,
        channels: usize,
        rfe: bool,
        attn_depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut levels = Vec::new();
        for level in lo..=hi {
            let name = format!("enhance.p{level}");
            let rfe = if rfe {
                Some(RfeBlock::build(store, &format!("{name}.rfe"), channels, rng)?)
            } else {
                None
            };
            let attention = AttentionStack::build(store, &format!("{name}.attn"), channels, attn_depth, rng);
            levels.push(LevelEnhance { level, rfe, attention });
        }
        Ok(Self { levels })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Pyramid) -> Result<Pyramid> {
        tape.push_scope("enhance");
        let mut out = Pyramid::new();
        let mut res = Ok(());
        for l in &self.levels {
            let x = match p.get(l.level) {
                Ok(x) => x,
                Err(e) => {
                    res = Err(e);
                    break;
                }
            };
            let y = tape.scoped(format!("p{}", l.level), |t| {
                let y = match &l.rfe {
                    Some(b) => t.scoped("rfe", |t| b.forward(t, x)),
                    None => x,
                };
                l.attention.forward(t, y)
            });
            out.insert(l.level, y);
        }
        tape.pop_scope();
        res.map(|_| out)
    }
}
