//! Neural-network layers on top of the tensor operators.
//!
//! Layers are plain structs of parameter handles; construction registers the
//! parameters in a [`Params`] store with hierarchical names, and `forward`
//! is generic over the element type so the same layer definitions run at
//! `f32` in production and `f64` under finite-difference verification.

use crate::tensor::ops;
use crate::tensor::{Ctx, Elem, Params, ParamId, BufferId, Var};
use ndarray::{Array1, ArrayD, IxDyn};

use rand_chacha::ChaCha8Rng;

fn normal_init<F: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<F> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f64, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::of(normal.sample(rng)))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal initialized convolution, no bias.
    pub fn new<F: Elem>(
        params: &mut Params<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let w = params.add(format!("{name}.w"), normal_init(rng, &[out_c, in_c, k, k], std));
        Conv2d { w, stride, pad }
    }

    pub fn forward<F: Elem>(&self, ctx: &Ctx<'_, F>, x: &Var<F>) -> Var<F> {
        ops::conv2d(x, &ctx.p(self.w), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<F: Elem>(params: &mut Params<F>, name: &str, c: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[c]), F::one()));
        let beta = params.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])));
        let running_mean = params.add_buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c])));
        let running_var =
            params.add_buffer(format!("{name}.running_var"), ArrayD::from_elem(IxDyn(&[c]), F::one()));
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<F: Elem>(&self, ctx: &Ctx<'_, F>, x: &Var<F>) -> Var<F> {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        if ctx.training {
            let out = ops::batchnorm2d_train(x, &gamma, &beta, F::of(self.eps));
            // Running statistics use the unbiased variance, matching the
            // usual deep-learning convention.
            let dims = x.shape();
            let m = (dims[0] * dims[2] * dims[3]) as f64;
            let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = F::of(self.momentum);
            let one_minus = F::one() - mom;
            let rm = self.read_mean::<F>(ctx);
            let rv = self.read_var::<F>(ctx);
            let new_mean = &rm * one_minus + &out.batch_mean * mom;
            let new_var =
                &rv * one_minus + &out.batch_var_biased.mapv(|v| v * F::of(correction)) * mom;
            ctx.params.write_buffer(self.running_mean, new_mean.into_dyn());
            ctx.params.write_buffer(self.running_var, new_var.into_dyn());
            out.y
        } else {
            let rm = self.read_mean::<F>(ctx);
            let rv = self.read_var::<F>(ctx);
            ops::batchnorm2d_eval(x, &gamma, &beta, &rm, &rv, F::of(self.eps))
        }
    }

    fn read_mean<F: Elem>(&self, ctx: &Ctx<'_, F>) -> Array1<F> {
        ctx.params
            .read_buffer(self.running_mean)
            .into_dimensionality()
            .unwrap()
    }

    fn read_var<F: Elem>(&self, ctx: &Ctx<'_, F>) -> Array1<F> {
        ctx.params
            .read_buffer(self.running_var)
            .into_dimensionality()
            .unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Elem>(
        params: &mut Params<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_d: usize,
        out_d: usize,
        bias: bool,
    ) -> Self {
        let std = (1.0 / in_d as f64).sqrt();
        let w = params.add(format!("{name}.w"), normal_init(rng, &[in_d, out_d], std));
        let b = bias.then(|| params.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_d]))));
        Linear { w, b }
    }

    pub fn forward<F: Elem>(&self, ctx: &Ctx<'_, F>, x: &Var<F>) -> Var<F> {
        let w = ctx.p(self.w);
        let b = self.b.map(|id| ctx.p(id));
        ops::linear(x, &w, b.as_ref())
    }
}

/// One multi-head self-attention layer: scaled dot-product attention over
/// the token set, output projection, residual connection, layer norm. No
/// position-wise feed-forward sublayer and no positional encoding.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionLayer {
    pub fn new<F: Elem>(
        params: &mut Params<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "attention width must divide head count");
        let std = (1.0 / dim as f64).sqrt();
        let wq = params.add(format!("{name}.wq"), normal_init(rng, &[dim, dim], std));
        let wk = params.add(format!("{name}.wk"), normal_init(rng, &[dim, dim], std));
        let wv = params.add(format!("{name}.wv"), normal_init(rng, &[dim, dim], std));
        let wo = params.add(format!("{name}.wo"), normal_init(rng, &[dim, dim], std));
        let ln_gamma =
            params.add(format!("{name}.ln.gamma"), ArrayD::from_elem(IxDyn(&[dim]), F::one()));
        let ln_beta = params.add(format!("{name}.ln.beta"), ArrayD::zeros(IxDyn(&[dim])));
        AttentionLayer {
            wq,
            wk,
            wv,
            wo,
            ln_gamma,
            ln_beta,
            heads,
            dim,
        }
    }

    /// Full layer over `(B, T, D)` tokens. When `probs_out` is given, the
    /// post-softmax attention matrices `(B*H, T, T)` are appended to it.
    pub fn forward<F: Elem>(
        &self,
        ctx: &Ctx<'_, F>,
        x: &Var<F>,
        probs_out: Option<&mut Vec<ArrayD<F>>>,
    ) -> Var<F> {
        let (b, t, d) = {
            let s = x.shape();
            (s[0], s[1], s[2])
        };
        debug_assert_eq!(d, self.dim);
        let dh = d / self.heads;
        let x2 = ops::reshape(x, &[b * t, d]);
        let q = ops::matmul2(&x2, &ctx.p(self.wq));
        let k = ops::matmul2(&x2, &ctx.p(self.wk));
        let v = ops::matmul2(&x2, &ctx.p(self.wv));
        let scores = ops::attention_scores(&q, &k, b, t, t, self.heads, F::of(1.0 / (dh as f64).sqrt()));
        let attn = ops::softmax_lastdim(&scores);
        if let Some(out) = probs_out {
            out.push(attn.data.to_owned());
        }
        let merged = ops::attention_apply(&attn, &v, b, self.heads);
        let proj = ops::matmul2(&merged, &ctx.p(self.wo));
        let res = ops::add(&proj, &x2);
        let y = ops::layernorm_lastdim(&res, &ctx.p(self.ln_gamma), &ctx.p(self.ln_beta), F::of(1e-5));
        ops::reshape(&y, &[b, t, d])
    }

    /// Same layer, but only the output at token 0 of each set is produced
    /// (queries are computed for token 0 alone; keys and values still cover
    /// every token). Returns `(B, D)`.
    pub fn forward_first_token<F: Elem>(&self, ctx: &Ctx<'_, F>, x: &Var<F>) -> Var<F> {
        let (b, t, d) = {
            let s = x.shape();
            (s[0], s[1], s[2])
        };
        let dh = d / self.heads;
        let x2 = ops::reshape(x, &[b * t, d]);
        let first_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let x_first = ops::gather_rows(&x2, &first_rows);
        let q = ops::matmul2(&x_first, &ctx.p(self.wq));
        let k = ops::matmul2(&x2, &ctx.p(self.wk));
        let v = ops::matmul2(&x2, &ctx.p(self.wv));
        let scores = ops::attention_scores(&q, &k, b, 1, t, self.heads, F::of(1.0 / (dh as f64).sqrt()));
        let attn = ops::softmax_lastdim(&scores);
        let merged = ops::attention_apply(&attn, &v, b, self.heads);
        let proj = ops::matmul2(&merged, &ctx.p(self.wo));
        let res = ops::add(&proj, &x_first);
        let y = ops::layernorm_lastdim(&res, &ctx.p(self.ln_gamma), &ctx.p(self.ln_beta), F::of(1e-5));
        ops::reshape(&y, &[b, d])
    }
}

/// A stack of identical attention layers sharing one weight set per layer.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub layers: Vec<AttentionLayer>,
}

impl AttentionStack {
    pub fn new<F: Elem>(
        params: &mut Params<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        num_layers: usize,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|i| AttentionLayer::new(params, rng, &format!("{name}.layer{i}"), dim, heads))
            .collect();
        AttentionStack { layers }
    }

    pub fn forward<F: Elem>(
        &self,
        ctx: &Ctx<'_, F>,
        x: &Var<F>,
        mut probs_out: Option<&mut Vec<ArrayD<F>>>,
    ) -> Var<F> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(ctx, &cur, probs_out.as_deref_mut());
        }
        cur
    }

    /// All layers in full, except the last one which produces only the
    /// token-0 output per set: `(B, T, D) -> (B, D)`. Identical to running
    /// the full stack and selecting token 0, without the wasted columns.
    pub fn forward_first_token<F: Elem>(&self, ctx: &Ctx<'_, F>, x: &Var<F>) -> Var<F> {
        let n = self.layers.len();
        assert!(n >= 1);
        let mut cur = x.clone();
        for layer in &self.layers[..n - 1] {
            cur = layer.forward(ctx, &cur, None);
        }
        self.layers[n - 1].forward_first_token(ctx, &cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, gradcheck, Tape};
    use ndarray::{Array3, Axis, Ix3};
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn attention_first_token_path_matches_full_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut params = Params::<f64>::new();
        let stack = AttentionStack::new(&mut params, &mut rng, "att", 16, 4, 3);
        let x = Array3::from_shape_fn((3, 5, 16), |(a, b, c)| {
            ((a * 31 + b * 17 + c * 7) % 23) as f64 * 0.1 - 1.0
        });
        let ctx = Ctx::eval(&params);
        let xv = Var::constant(x.clone().into_dyn());
        let full = stack.forward(&ctx, &xv, None);
        let fast = stack.forward_first_token(&ctx, &xv);
        let f3 = full.data.view().into_dimensionality::<Ix3>().unwrap();
        let fast2 = fast.data.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for b in 0..3 {
            for c in 0..16 {
                let a = f3[[b, 0, c]];
                let f = fast2[[b, c]];
                assert!((a - f).abs() < 1e-12, "b={b} c={c}: {a} vs {f}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::<f64>::new();
        let stack = AttentionStack::new(&mut params, &mut rng, "att", 8, 2, 2);
        let x = Array3::from_shape_fn((2, 4, 8), |(a, b, c)| (a + b + c) as f64 * 0.3 - 1.0);
        let ctx = Ctx::eval(&params);
        let mut probs = Vec::new();
        let _ = stack.forward(&ctx, &Var::constant(x.into_dyn()), Some(&mut probs));
        assert_eq!(probs.len(), 2);
        for p in &probs {
            let p3 = p.view().into_dimensionality::<Ix3>().unwrap();
            for g in 0..p3.dim().0 {
                for row in p3.index_axis(Axis(0), g).rows() {
                    let s: f64 = row.sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_gradcheck_all_weight_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = Params::<f64>::new();
        let layer = AttentionLayer::new(&mut params, &mut rng, "a", 8, 2, );
        let x = Array3::from_shape_fn((1, 3, 8), |(_, b, c)| ((b * 7 + c) % 5) as f64 * 0.2 - 0.4);
        for name in ["a.wq", "a.wk", "a.wv", "a.wo", "a.ln.gamma", "a.ln.beta"] {
            let x = x.clone();
            let layer = layer.clone();
            let err = gradcheck::max_rel_error_for_param(&mut params, name, 1e-5, &move |ctx| {
                let y = layer.forward(ctx, &Var::constant(x.clone().into_dyn()), None);
                ops::mean_all(&ops::relu(&y))
            });
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn batchnorm_updates_running_stats_only_in_training() {
        let mut params = Params::<f32>::new();
        let bn = BatchNorm2d::new(&mut params, "bn", 2);
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 2, 3, 3]), |ix| {
            (ix[1] as f32 + 1.0) * 2.0 + (ix[2] * 3 + ix[3]) as f32 * 0.01
        });

        let before = params.read_buffer(bn.running_mean);
        let ctx = Ctx::eval(&params);
        let _ = bn.forward(&ctx, &Var::constant(x.clone()));
        assert_eq!(params.read_buffer(bn.running_mean), before);

        let tape = Tape::new();
        let ctx = Ctx::train(&params, tape);
        let y = bn.forward(&ctx, &Var::constant(x));
        let after = params.read_buffer(bn.running_mean);
        assert_ne!(after, before);
        // gradient flows through the training path
        let loss = ops::mean_all(&ops::relu(&y));
        let grads = backward(&loss);
        assert!(grads.for_param(bn.gamma).is_some());
    }
}
