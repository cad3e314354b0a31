//! Applies receptive field enhancement and a stack of attention units to
//! one feature map and reports how much each stage changes it.
//!
//! ```text
//! cargo run --example enhance_features
//! ```

use ef_tensor::{init, ParamStore, Tape, Tensor};
use efficientface::enhance::{AttentionStack, RfeBlock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rms_diff(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    (s / a.numel() as f64).sqrt()
}

fn main() -> efficientface::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let rfe = RfeBlock::build(&mut store, "rfe", 32, &mut rng)?;
    let rfe_params = store.num_scalars();
    let attn = AttentionStack::build(&mut store, "attn", 32, 3, &mut rng);
    println!(
        "rfe {} params, attention x3 {} params",
        rfe_params,
        store.num_scalars() - rfe_params
    );

    // the projection starts at zero, so nudge it to see the branches act
    let proj = store.find("rfe.project.weight").expect("projection exists");
    let shape = store.get(proj).shape();
    store.set(proj, init::normal(shape, 0.05, &mut rng));

    let x = init::uniform([1, 32, 24, 24], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new(&store);
    let v = tape.input(x.clone());
    let r = rfe.forward(&mut tape, v);
    let a = attn.forward(&mut tape, r);
    let (rv, av) = (tape.value(r).clone(), tape.value(a).clone());
    println!("shape {:?} -> {:?}", x.shape(), av.shape());
    println!("rms change from rfe       {:.4}", rms_diff(&x, &rv));
    println!("rms change from attention {:.4}", rms_diff(&rv, &av));
    let kept = av.data().iter().map(|v| v.abs()).sum::<f64>() / rv.data().iter().map(|v| v.abs()).sum::<f64>();
    println!("attention keeps {:.1}% of the activation mass", 100.0 * kept);
    Ok(())
}
