//! Classification and box-regression towers shared by every pyramid level.

use ef_tensor::nn::{Conv2d, Conv2dSpec, ConvInit, ConvNormAct};
use ef_tensor::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

/// Initial foreground probability of every anchor.
pub const CLS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Head {
    pub cls_tower: Vec<ConvNormAct>,
    pub reg_tower: Vec<ConvNormAct>,
    pub cls_out: Conv2d,
    pub reg_out: Conv2d,
}

impl Head {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_width: usize,
        width: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let tower = |store: &mut ParamStore, rng: &mut R, name: &str| -> Vec<ConvNormAct> {
            (0..depth)
                .map(|i| {
                    let cin = if i == 0 { in_width } else { width };
                    ConvNormAct::build(
                        store,
                        &format!("head.{name}.{i}"),
                        Conv2dSpec::new(cin, width, 3),
                        true,
                        rng,
                    )
                })
                .collect()
        };
        let cls_tower = tower(store, rng, "cls");
        let reg_tower = tower(store, rng, "reg");
        let last = if depth == 0 { in_width } else { width };
        let cls_out = Conv2d::build(
            store,
            "head.cls.out",
            Conv2dSpec::new(last, 1, 3).init(ConvInit::Normal(0.01)),
            rng,
        );
        let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        store.set(cls_out.bias.expect("biased"), Tensor::full([1, 1, 1, 1], prior));
        let reg_out = Conv2d::build(
            store,
            "head.reg.out",
            Conv2dSpec::new(last, 4, 3).init(ConvInit::Normal(0.01)),
            rng,
        );
        Self {
            cls_tower,
            reg_tower,
            cls_out,
            reg_out,
        }
    }

    /// `(logits [n,1,h,w], deltas [n,4,h,w])`
    pub fn forward(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let cls = tape.scoped("cls", |t| {
            let y = self.cls_tower.iter().fold(x, |y, l| l.forward(t, y));
            self.cls_out.forward(t, y)
        });
        let reg = tape.scoped("reg", |t| {
            let y = self.reg_tower.iter().fold(x, |y, l| l.forward(t, y));
            self.reg_out.forward(t, y)
        });
        (cls, reg)
    }
}
