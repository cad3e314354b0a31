//! Parameterized layers built on [`Tape`] operations.

use rand::Rng;

use crate::{init, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: (usize, usize),
}

/// How a convolution kernel starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConvInit {
    /// He-normal weights, zero bias.
    Kaiming,
    /// Normal weights with the given standard deviation, zero bias.
    Normal(f64),
    /// All-zero weights and bias.
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv2dSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub bias: bool,
    pub init: ConvInit,
}

impl Conv2dSpec {
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: (k, k),
            stride: 1,
            bias: true,
            init: ConvInit::Kaiming,
        }
    }

    pub fn kernel(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(mut self, init: ConvInit) -> Self {
        self.init = init;
        self
    }
}

impl Conv2d {
    /// "Same" padding for odd kernels: `(kh/2, kw/2)`.
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: Conv2dSpec, rng: &mut R) -> Self {
        let (kh, kw) = spec.kernel;
        let shape = [spec.cout, spec.cin, kh, kw];
        let w = match spec.init {
            ConvInit::Kaiming => init::kaiming(shape, rng),
            ConvInit::Normal(std) => init::normal(shape, std, rng),
            ConvInit::Zeros => Tensor::zeros(shape),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros([spec.cout, 1, 1, 1])));
        Self {
            weight,
            bias,
            stride: spec.stride,
            pad: (kh / 2, kw / 2),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    /// `[cout, cin, kh, kw]`
    pub fn kernel_shape(&self, store: &ParamStore) -> [usize; 4] {
        store.get(self.weight).shape()
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([channels, 1, 1, 1], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels, 1, 1, 1]));
        Self {
            gamma,
            beta,
            groups: default_groups(channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.group_norm(x, g, b, self.groups)
    }
}

/// Largest of 8, 4, 2 that divides `channels` while leaving at least four
/// channels per group; otherwise a single group.
pub fn default_groups(channels: usize) -> usize {
    [8, 4, 2]
        .into_iter()
        .find(|&g| channels.is_multiple_of(g) && channels / g >= 4)
        .unwrap_or(1)
}

/// Convolution followed by group normalization and an optional SiLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: GroupNorm,
    pub act: bool,
}

impl ConvNormAct {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: Conv2dSpec,
        act: bool,
        rng: &mut R,
    ) -> Self {
        let cout = spec.cout;
        let conv = Conv2d::build(store, &format!("{name}.conv"), spec.no_bias(), rng);
        let norm = GroupNorm::build(store, &format!("{name}.norm"), cout);
        Self { conv, norm, act }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let y = self.conv.forward(tape, x);
        let y = self.norm.forward(tape, y);
        if self.act {
            tape.silu(y)
        } else {
            y
        }
    }
}
