//! Runs the symmetric neck once over a small random pyramid and prints the
//! normalized fusion weights and the shape of every intermediate map.
//!
//! ```text
//! cargo run --example fuse_pyramid
//! ```

use ef_tensor::{init, ParamStore, Tape, Tensor};
use efficientface::pyramid::Pyramid;
use efficientface::sbifpn::{NodeStyle, SBiFpn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> efficientface::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let neck = SBiFpn::build(&mut store, 3, 7, 16, NodeStyle::Conv, &mut rng)?;
    // perturb the fusion weights so the blends are not all uniform
    for node in neck.nodes() {
        let w = init::uniform([node.arity, 1, 1, 1], 0.2, 2.0, &mut rng);
        store.set(node.weights, w);
    }

    let mut tape = Tape::new(&store);
    let levels: Vec<_> = (3..=7)
        .map(|l| tape.input(init::uniform([1, 16, 256 >> l, 256 >> l], -1.0, 1.0, &mut rng)))
        .collect();
    let p = Pyramid::from_levels(3, levels);
    let out = neck.forward_detailed(&mut tape, &p)?;

    for (name, pyr) in [("UP", &out.up), ("DP", &out.down), ("OP", &out.out)] {
        for (l, v) in pyr.iter() {
            let t: &Tensor = tape.value(v);
            let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
            println!("{name}{l}  {:?}  mean {mean:+.4}", t.shape());
        }
    }
    println!();
    for node in neck.nodes() {
        let name = store.name(node.weights);
        let w: Vec<String> = node
            .normalized_weights(&store)
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect();
        println!("{name:<22} [{}]", w.join(", "));
    }
    Ok(())
}
