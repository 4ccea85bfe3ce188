//! Central finite-difference verification of analytic gradients.
//!
//! Used by unit tests and by the acceptance suite; runs at f64 so the
//! truncation error of the central difference dominates round-off.

use super::{backward, Ctx, Params, Tape, Var};
use ndarray::ArrayD;

/// Largest relative error between the analytic gradient of `loss_fn` with
/// respect to parameter `name` and a central finite difference, probing
/// every element of the parameter.
///
/// `loss_fn` must evaluate the scalar loss from the store using the given
/// context (so it can be replayed with perturbed parameters).
pub fn max_rel_error_for_param(
    params: &mut Params<f64>,
    name: &str,
    eps: f64,
    loss_fn: &dyn Fn(&Ctx<'_, f64>) -> Var<f64>,
) -> f64 {
    let pid = params
        .iter()
        .find(|(_, e)| e.name == name)
        .map(|(id, _)| id)
        .unwrap_or_else(|| panic!("no parameter named {name}"));

    // Analytic gradient.
    let tape = Tape::new();
    let ctx = Ctx::train(params, tape);
    let loss = loss_fn(&ctx);
    let grads = backward(&loss);
    let analytic: ArrayD<f64> = grads
        .for_param(pid)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(params.get(pid).raw_dim()));

    // Floor the relative-error denominator at a small fraction of the
    // largest gradient in this tensor, so rounding noise on near-zero
    // elements does not masquerade as a formula error.
    let floor = analytic
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .mul_add(1e-3, 1e-9)
        .max(1e-6);

    let n = params.get(pid).len();
    let mut worst = 0.0f64;
    for i in 0..n {
        let orig = params.get(pid).as_slice().unwrap()[i];

        params.get_mut(pid).as_slice_mut().unwrap()[i] = orig + eps;
        let ctx = Ctx::eval(params);
        let up = loss_fn(&ctx).scalar();

        params.get_mut(pid).as_slice_mut().unwrap()[i] = orig - eps;
        let ctx = Ctx::eval(params);
        let down = loss_fn(&ctx).scalar();

        params.get_mut(pid).as_slice_mut().unwrap()[i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.as_slice().unwrap()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Finite-difference check of the gradient with respect to a leaf input.
pub fn max_rel_error_for_input(
    params: &Params<f64>,
    input: &ArrayD<f64>,
    eps: f64,
    loss_fn: &dyn Fn(&Ctx<'_, f64>, &Var<f64>) -> Var<f64>,
) -> f64 {
    let tape = Tape::new();
    let ctx = Ctx::input_grad(params, tape.clone());
    let x = tape.leaf(input.clone());
    let x_node = x.node_id().unwrap();
    let loss = loss_fn(&ctx, &x);
    let grads = backward(&loss);
    let analytic = grads
        .for_node(x_node)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));

    let floor = analytic
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .mul_add(1e-3, 1e-9)
        .max(1e-6);
    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.as_slice().unwrap()[i];

        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let ctx = Ctx::eval(params);
        let up = loss_fn(&ctx, &Var::constant(probe.clone())).scalar();

        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let ctx = Ctx::eval(params);
        let down = loss_fn(&ctx, &Var::constant(probe.clone())).scalar();

        probe.as_slice_mut().unwrap()[i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.as_slice().unwrap()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
