//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{init, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||numeric||, tiny)` over every checked
    /// coordinate of inputs and parameters.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares backprop against central differences of the scalar
/// `<r, f(inputs)>` for a fixed random projection `r`.
///
/// Every coordinate of every input and of every parameter in `params` is
/// perturbed by `+-step`.
pub fn check<F>(params: &ParamStore, inputs: &[Tensor], step: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let (projection, analytic_inputs, analytic_params) = {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let r = init::uniform(tape.shape(out), -1.0, 1.0, &mut rng);
        let grads = tape.backward(vec![(out, r.clone())]);
        let gi: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let gp: Vec<Tensor> = params
            .iter()
            .map(|(id, _, t)| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (r, gi, gp)
    };

    let objective = |params: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).dot(&projection)
    };

    let mut diff2 = 0.0;
    let mut norm2 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    let mut tally = |a: f64, n: f64| {
        diff2 += (a - n) * (a - n);
        norm2 += n * n;
        max_abs = max_abs.max((a - n).abs());
        checked += 1;
    };

    let mut work = inputs.to_vec();
    for (k, grad) in analytic_inputs.iter().enumerate() {
        for j in 0..work[k].numel() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + step;
            let up = objective(params, &work);
            work[k].data_mut()[j] = orig - step;
            let down = objective(params, &work);
            work[k].data_mut()[j] = orig;
            tally(grad.data()[j], (up - down) / (2.0 * step));
        }
    }

    let mut store = params.clone();
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic_params) {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + step;
            let up = objective(&store, inputs);
            store.get_mut(id).data_mut()[j] = orig - step;
            let down = objective(&store, inputs);
            store.get_mut(id).data_mut()[j] = orig;
            tally(grad.data()[j], (up - down) / (2.0 * step));
        }
    }

    GradCheckReport {
        rel_error: diff2.sqrt() / norm2.sqrt().max(1e-12),
        max_abs_error: max_abs,
        checked,
    }
}
