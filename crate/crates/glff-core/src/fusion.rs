//! Final fusion and classification: project pooled features to fixed-width
//! embeddings, fuse the global and local embeddings with multi-head
//! attention, and emit the real/fake score.

use crate::amsff::AttentionConfig;
use crate::error::{Error, Result};
use crate::nn::{AttentionStack, Linear};
use crate::rng;
use crate::tensor::{ops, Ctx, Elem, Params, Var};

/// Softmax score of one image. `fake_probability` is the probability of
/// class 1 (fake).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScore {
    pub fake_probability: f32,
    pub logits: [f32; 2],
}

impl DetectionScore {
    pub fn from_logits(logits: [f32; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        DetectionScore {
            fake_probability: e1 / (e0 + e1),
            logits,
        }
    }
}

/// Index of the fake class in the two-logit output.
pub const FAKE_CLASS: usize = 1;

pub struct FusionHead {
    /// Shared projection from the pooled deep width to the embedding width;
    /// both the global and every local embedding go through it.
    pub shared_proj: Linear,
    pub stack: AttentionStack,
    pub classifier: Linear,
    pub cfg: AttentionConfig,
    pub embed_dim: usize,
}

impl FusionHead {
    pub fn new<F: Elem>(
        params: &mut Params<F>,
        seed: u64,
        name: &str,
        pooled_dim: usize,
        embed_dim: usize,
        cfg: &AttentionConfig,
    ) -> Self {
        let mut rng = rng::stream(seed, "fusion-init", &[]);
        let shared_proj = Linear::new(
            params,
            &mut rng,
            &format!("{name}.shared_proj"),
            pooled_dim,
            embed_dim,
            true,
        );
        let stack = AttentionStack::new(
            params,
            &mut rng,
            &format!("{name}.attn"),
            embed_dim,
            cfg.num_heads,
            cfg.num_layers,
        );
        let classifier = Linear::new(params, &mut rng, &format!("{name}.classifier"), embed_dim, 2, true);
        FusionHead {
            shared_proj,
            stack,
            classifier,
            cfg: cfg.clone(),
            embed_dim,
        }
    }

    /// Global embedding: spatial average pool of the fused map followed by
    /// the shared projection. `(N, C, H, W) -> (N, embed_dim)`.
    pub fn global_embedding<F: Elem>(&self, ctx: &Ctx<'_, F>, fused: &Var<F>) -> Var<F> {
        let pooled = ops::global_avgpool(fused);
        self.shared_proj.forward(ctx, &pooled)
    }

    /// Local embeddings from pooled per-patch deep features:
    /// `(P, pooled_dim) -> (P, embed_dim)`.
    pub fn project_local<F: Elem>(&self, ctx: &Ctx<'_, F>, pooled: &Var<F>) -> Var<F> {
        self.shared_proj.forward(ctx, &pooled)
    }

    /// Fuses a token set `(N, T, embed_dim)` with the attention stack,
    /// mean-pools the output tokens and classifies. Returns `(N, 2)` logits.
    pub fn fuse_tokens_and_classify<F: Elem>(&self, ctx: &Ctx<'_, F>, tokens: &Var<F>) -> Var<F> {
        let fused = self.stack.forward(ctx, tokens, None);
        let e_mw = ops::mean_tokens(&fused);
        self.classifier.forward(ctx, &e_mw)
    }

    /// Single-sample convenience over explicit global/local embeddings, as
    /// the classification contract is stated: one global embedding plus `n`
    /// local embeddings.
    pub fn fuse_and_classify<F: Elem>(
        &self,
        ctx: &Ctx<'_, F>,
        global: &Var<F>,
        locals: &Var<F>,
        expected_locals: usize,
    ) -> Result<Var<F>> {
        let ls = locals.shape();
        if ls.len() != 2 || ls[0] != expected_locals || ls[1] != self.embed_dim {
            return Err(Error::config(format!(
                "expected {expected_locals} local embeddings of width {}, got shape {ls:?}",
                self.embed_dim
            )));
        }
        let g2 = ops::reshape(global, &[1, self.embed_dim]);
        let l3 = ops::reshape(locals, &[1, ls[0], self.embed_dim]);
        let tokens = ops::concat_token_sets(&g2, &l3);
        Ok(self.fuse_tokens_and_classify(ctx, &tokens))
    }
}
