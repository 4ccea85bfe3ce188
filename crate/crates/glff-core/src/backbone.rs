//! Shared convolutional feature extractor (ResNet-50 layout) with taps at a
//! shallow and a deep stage. Both the global branch and the per-patch local
//! branch run the same weight set.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::rng;
use crate::tensor::{ops, Ctx, Elem, Params, Var};
use serde::{Deserialize, Serialize};

/// Stage tap points (1-based, `1..=5`).
///
/// Stage 1 covers the stem (7x7/2 convolution, batch norm, ReLU, 3x3/2 max
/// pool) plus the first residual group; stages 2 and onward are the later
/// residual groups. For a 224 input with the full-width preset the taps are:
///
/// | stage | shape          |
/// |-------|----------------|
/// | 1     | 56 x 56 x 256  |
/// | 2     | 28 x 28 x 512  |
/// | 3, 4  | 14 x 14 x 1024 |
/// | 5     | 7 x 7 x 2048   |
///
/// Stages 3 and 4 alias the third residual group: the shallow candidates in
/// ablations are stages 1-2 and the deep candidates are stages 4-5, so the
/// aliasing keeps all five indices addressable while every pairing that is
/// actually exercised stays distinct.
pub const NUM_STAGES: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Tap feeding the low-level tokens (default 1).
    pub shallow_stage: usize,
    /// Tap feeding the high-level token and the fused map shape (default 5).
    pub deep_stage: usize,
    /// Expect pretrained weights. Without a weight file the backbone falls
    /// back to seeded random init and logs a warning.
    pub pretrained: bool,
    pub seed: u64,
    /// Stem width; 64 for the full network. Residual groups derive their
    /// widths from it (x4 bottleneck expansion).
    pub stem_width: usize,
    /// Bottleneck blocks per residual group; `[3, 4, 6, 3]` for the full
    /// network.
    pub blocks: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            shallow_stage: 1,
            deep_stage: 5,
            pretrained: false,
            seed: 0,
            stem_width: 64,
            blocks: [3, 4, 6, 3],
        }
    }
}

impl BackboneConfig {
    pub fn tiny(seed: u64) -> Self {
        BackboneConfig {
            shallow_stage: 1,
            deep_stage: 5,
            pretrained: false,
            seed,
            stem_width: 8,
            blocks: [1, 1, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=NUM_STAGES).contains(&self.shallow_stage)
            || !(1..=NUM_STAGES).contains(&self.deep_stage)
        {
            return Err(Error::config(format!(
                "stages must lie in 1..=5, got shallow {} deep {}",
                self.shallow_stage, self.deep_stage
            )));
        }
        if self.shallow_stage >= self.deep_stage {
            return Err(Error::config(format!(
                "shallow stage {} must precede deep stage {}",
                self.shallow_stage, self.deep_stage
            )));
        }
        Ok(())
    }

    /// Residual group (0-based) whose output a stage tap refers to.
    pub fn stage_group(stage: usize) -> usize {
        match stage {
            1 => 0,
            2 => 1,
            3 | 4 => 2,
            5 => 3,
            _ => panic!("stage out of range: {stage}"),
        }
    }

    /// Channels at a stage tap.
    pub fn stage_channels(&self, stage: usize) -> usize {
        let group = Self::stage_group(stage);
        self.stem_width * 4 * (1 << group)
    }

    /// Spatial side length at a stage tap for a square input.
    pub fn stage_spatial(&self, input_size: usize, stage: usize) -> usize {
        let group = Self::stage_group(stage);
        // stem: /2 conv then /2 pool; each later group halves again.
        input_size / 4 / (1 << group)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new<F: Elem>(
        params: &mut Params<F>,
        rng: &mut rand_chacha::ChaCha8Rng,
        name: &str,
        in_c: usize,
        mid_c: usize,
        out_c: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(params, rng, &format!("{name}.conv1"), in_c, mid_c, 1, 1, 0);
        let bn1 = BatchNorm2d::new(params, &format!("{name}.bn1"), mid_c);
        let conv2 = Conv2d::new(params, rng, &format!("{name}.conv2"), mid_c, mid_c, 3, stride, 1);
        let bn2 = BatchNorm2d::new(params, &format!("{name}.bn2"), mid_c);
        let conv3 = Conv2d::new(params, rng, &format!("{name}.conv3"), mid_c, out_c, 1, 1, 0);
        let bn3 = BatchNorm2d::new(params, &format!("{name}.bn3"), out_c);
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2d::new(params, rng, &format!("{name}.down.conv"), in_c, out_c, 1, stride, 0),
                BatchNorm2d::new(params, &format!("{name}.down.bn"), out_c),
            )
        });
        Bottleneck {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            downsample,
        }
    }

    fn forward<F: Elem>(&self, ctx: &Ctx<'_, F>, x: &Var<F>) -> Var<F> {
        let mut y = ops::relu(&self.bn1.forward(ctx, &self.conv1.forward(ctx, x)));
        y = ops::relu(&self.bn2.forward(ctx, &self.conv2.forward(ctx, &y)));
        y = self.bn3.forward(ctx, &self.conv3.forward(ctx, &y));
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(ctx, &conv.forward(ctx, x)),
            None => x.clone(),
        };
        ops::relu(&ops::add(&y, &shortcut))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    groups: Vec<Vec<Bottleneck>>,
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new<F: Elem>(params: &mut Params<F>, cfg: &BackboneConfig) -> Self {
        let mut rng = rng::stream(cfg.seed, "backbone-init", &[]);
        let w = cfg.stem_width;
        let stem_conv = Conv2d::new(params, &mut rng, "backbone.stem.conv", 3, w, 7, 2, 3);
        let stem_bn = BatchNorm2d::new(params, "backbone.stem.bn", w);
        let mut groups = Vec::new();
        let mut in_c = w;
        for (g, &blocks) in cfg.blocks.iter().enumerate() {
            let mid_c = w * (1 << g);
            let out_c = mid_c * 4;
            let mut group = Vec::new();
            for b in 0..blocks {
                let stride = if g > 0 && b == 0 { 2 } else { 1 };
                group.push(Bottleneck::new(
                    params,
                    &mut rng,
                    &format!("backbone.group{}.block{}", g + 1, b),
                    in_c,
                    mid_c,
                    out_c,
                    stride,
                ));
                in_c = out_c;
            }
            groups.push(group);
        }
        Backbone {
            stem_conv,
            stem_bn,
            groups,
            cfg: cfg.clone(),
        }
    }

    /// Runs the network once and returns the feature maps at the requested
    /// stage taps, in the order given. Later layers are skipped when no tap
    /// needs them.
    pub fn forward_taps<F: Elem>(
        &self,
        ctx: &Ctx<'_, F>,
        x: &Var<F>,
        stages: &[usize],
    ) -> Vec<Var<F>> {
        let deepest_group = stages
            .iter()
            .map(|&s| BackboneConfig::stage_group(s))
            .max()
            .expect("at least one tap");
        let mut cur = ops::relu(&self.stem_bn.forward(ctx, &self.stem_conv.forward(ctx, x)));
        cur = ops::maxpool2d(&cur, 3, 2, 1);
        let mut group_outputs: Vec<Option<Var<F>>> = vec![None; self.groups.len()];
        for (g, group) in self.groups.iter().enumerate() {
            if g > deepest_group {
                break;
            }
            for block in group {
                cur = block.forward(ctx, &cur);
            }
            group_outputs[g] = Some(cur.clone());
        }
        stages
            .iter()
            .map(|&s| {
                group_outputs[BackboneConfig::stage_group(s)]
                    .clone()
                    .expect("tap computed")
            })
            .collect()
    }

    /// Shallow and deep taps from one forward pass.
    ///
    /// The input must already be preprocessed (square, normalized); shape
    /// `(N, 3, S, S)`. Output taps are checked for non-finite values.
    pub fn extract_multiscale<F: Elem>(
        &self,
        ctx: &Ctx<'_, F>,
        x: &Var<F>,
    ) -> Result<(Var<F>, Var<F>)> {
        let taps = self.forward_taps(ctx, x, &[self.cfg.shallow_stage, self.cfg.deep_stage]);
        let shallow = taps[0].clone();
        let deep = taps[1].clone();
        for (name, t) in [("shallow", &shallow), ("deep", &deep)] {
            if !t.data.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite activations in {name} tap"
                )));
            }
        }
        Ok((shallow, deep))
    }

    /// Deep tap pooled over space: the raw local-branch descriptor,
    /// `(N, C_deep)`.
    pub fn pooled_deep_feature<F: Elem>(&self, ctx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
        let taps = self.forward_taps(ctx, x, &[self.cfg.deep_stage]);
        let pooled = ops::global_avgpool(&taps[0]);
        if !pooled.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite pooled deep feature".into()));
        }
        Ok(pooled)
    }
}
