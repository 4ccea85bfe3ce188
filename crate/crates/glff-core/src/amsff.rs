//! Attention-based multi-scale feature fusion.
//!
//! For every pixel of the deep feature map, the co-located patch of the
//! shallow map contributes `k` low-level tokens; together with the one
//! high-level token they pass through a multi-head self-attention stack, and
//! the output at the high-level position becomes that pixel of the fused
//! map. The fused map keeps the deep tap's spatial shape and channel count.

use crate::error::{Error, Result};
use crate::nn::{AttentionStack, Linear};
use crate::rng;
use crate::tensor::{ops, Ctx, Elem, Params, Var};
use ndarray::{ArrayD, Ix3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Token width inside the attention stack. For the fusion of backbone
    /// taps this equals the deep tap's channel count, which keeps the fused
    /// map at that channel count.
    pub model_dim: usize,
}

impl AttentionConfig {
    pub fn new(num_layers: usize, num_heads: usize, model_dim: usize) -> Self {
        AttentionConfig {
            num_layers,
            num_heads,
            model_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::config("attention needs at least one layer"));
        }
        if self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Splits the shallow map into per-deep-pixel token lists.
///
/// `(N, C, Hl, Wl)` with a `(Hh, Wh)` deep shape gives `(N*Hh*Wh, k, C)`
/// where `k = (Hl/Hh) * (Wl/Wh)` and tokens are in row-major patch order.
pub fn partition_lowlevel<F: Elem>(shallow: &Var<F>, hh: usize, wh: usize) -> Result<Var<F>> {
    let s = shallow.shape();
    let (hl, wl) = (s[2], s[3]);
    if hh == 0 || wh == 0 || hl % hh != 0 || wl % wh != 0 {
        return Err(Error::config(format!(
            "shallow {hl}x{wl} not evenly divisible by deep {hh}x{wh}"
        )));
    }
    Ok(ops::shallow_to_tokens(shallow, hh, wh))
}

/// Stable lexicographic order of token rows; canonicalizing the set order
/// makes fusion exactly invariant under low-level token permutations.
fn canonical_order<F: Elem>(tokens: &ndarray::ArcArray<F, ndarray::IxDyn>) -> Vec<usize> {
    let t3 = tokens.view().into_dimensionality::<Ix3>().unwrap();
    let (sets, k, _) = t3.dim();
    let mut order = Vec::with_capacity(sets * k);
    for s in 0..sets {
        let set = t3.index_axis(ndarray::Axis(0), s);
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|&a, &b| {
            let ra = set.row(a);
            let rb = set.row(b);
            for (x, y) in ra.iter().zip(rb.iter()) {
                match x.partial_cmp(y) {
                    Some(std::cmp::Ordering::Equal) | None => continue,
                    Some(o) => return o,
                }
            }
            std::cmp::Ordering::Equal
        });
        order.extend(idx.into_iter().map(|i| s * k + i));
    }
    order
}

pub struct Amsff {
    pub low_proj: Linear,
    /// Only present when the high-level channel count differs from the
    /// attention width.
    pub high_proj: Option<Linear>,
    pub stack: AttentionStack,
    pub cfg: AttentionConfig,
    pub c_low: usize,
    pub c_high: usize,
}

impl Amsff {
    pub fn new<F: Elem>(
        params: &mut Params<F>,
        seed: u64,
        name: &str,
        c_low: usize,
        c_high: usize,
        cfg: &AttentionConfig,
    ) -> Self {
        let mut rng = rng::stream(seed, "amsff-init", &[]);
        let low_proj = Linear::new(params, &mut rng, &format!("{name}.low_proj"), c_low, cfg.model_dim, true);
        let high_proj = (c_high != cfg.model_dim).then(|| {
            Linear::new(params, &mut rng, &format!("{name}.high_proj"), c_high, cfg.model_dim, true)
        });
        let stack = AttentionStack::new(
            params,
            &mut rng,
            &format!("{name}.attn"),
            cfg.model_dim,
            cfg.num_heads,
            cfg.num_layers,
        );
        Amsff {
            low_proj,
            high_proj,
            stack,
            cfg: cfg.clone(),
            c_low,
            c_high,
        }
    }

    /// Projects raw high/low tokens to the attention width and assembles
    /// token sets with the high-level token at index 0.
    pub fn project_tokens<F: Elem>(
        &self,
        ctx: &Ctx<'_, F>,
        high: &Var<F>,
        lows: &Var<F>,
    ) -> Var<F> {
        let s = lows.shape();
        let (sets, k, c) = (s[0], s[1], s[2]);
        let flat = ops::reshape(lows, &[sets * k, c]);
        let projected = self.low_proj.forward(ctx, &flat);
        let lows_p = ops::reshape(&projected, &[sets, k, self.cfg.model_dim]);
        let high_p = match &self.high_proj {
            Some(p) => p.forward(ctx, high),
            None => high.clone(),
        };
        ops::concat_token_sets(&high_p, &lows_p)
    }

    /// Fuses shallow and deep maps into a map with the deep tap's shape.
    pub fn fuse<F: Elem>(&self, ctx: &Ctx<'_, F>, shallow: &Var<F>, deep: &Var<F>) -> Result<Var<F>> {
        Ok(self.fuse_inner(ctx, shallow, deep, None)?.0)
    }

    /// As [`fuse`](Self::fuse), additionally returning the post-softmax
    /// attention matrices of every layer (full-stack evaluation).
    pub fn fuse_with_probs<F: Elem>(
        &self,
        ctx: &Ctx<'_, F>,
        shallow: &Var<F>,
        deep: &Var<F>,
    ) -> Result<(Var<F>, Vec<ArrayD<F>>)> {
        let mut probs = Vec::new();
        let (out, _) = self.fuse_inner(ctx, shallow, deep, Some(&mut probs))?;
        Ok((out, probs))
    }

    fn fuse_inner<F: Elem>(
        &self,
        ctx: &Ctx<'_, F>,
        shallow: &Var<F>,
        deep: &Var<F>,
        mut probs: Option<&mut Vec<ArrayD<F>>>,
    ) -> Result<(Var<F>, ())> {
        let ds = deep.shape();
        let (n, c_high, hh, wh) = (ds[0], ds[1], ds[2], ds[3]);
        debug_assert_eq!(c_high, self.c_high);
        let lows_raw = partition_lowlevel(shallow, hh, wh)?;

        // Canonical token order: sort each set's raw tokens so any caller
        // permutation of co-located pixels reproduces bit-identical output.
        let s = lows_raw.shape();
        let (sets, k, c) = (s[0], s[1], s[2]);
        let order = canonical_order(&lows_raw.data);
        let flat = ops::reshape(&lows_raw, &[sets * k, c]);
        let sorted_flat = ops::gather_rows(&flat, &order);
        let lows = ops::reshape(&sorted_flat, &[sets, k, c]);

        let high = ops::map_to_tokens(deep);
        let token_sets = self.project_tokens(ctx, &high, &lows);
        let fused_tokens = match probs.as_deref_mut() {
            None => self.stack.forward_first_token(ctx, &token_sets),
            Some(p) => {
                let full = self.stack.forward(ctx, &token_sets, Some(p));
                let t = k + 1;
                let flat = ops::reshape(&full, &[sets * t, self.cfg.model_dim]);
                let first: Vec<usize> = (0..sets).map(|i| i * t).collect();
                ops::gather_rows(&flat, &first)
            }
        };
        Ok((ops::tokens_to_map(&fused_tokens, n, hh, wh), ()))
    }
}
