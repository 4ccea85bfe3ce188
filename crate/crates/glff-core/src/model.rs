//! The assembled two-branch detector.
//!
//! One forward pass: backbone taps, multi-scale fusion, global embedding,
//! informative-patch selection, per-patch local embeddings through the same
//! backbone, attention fusion of all embeddings, softmax score.

use crate::amsff::Amsff;
use crate::backbone::Backbone;
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::fusion::{DetectionScore, FusionHead, FAKE_CLASS};
use crate::image::ImageTensor;
use crate::psm::{self, PatchProposal};
use crate::rng;
use crate::tensor::ops::{self, CropSpec};
use crate::tensor::{backward, Ctx, Params, Tape, Var};
use ndarray::{Array2, Array3, ArrayD, Ix4, IxDyn};
use std::sync::atomic::{AtomicU64, Ordering};

/// Anything that maps an image to a fake-probability. Evaluation and the
/// adversarial pipeline are written against this interface.
pub trait Detector: Sync {
    fn fake_probability(&self, image: &ImageTensor) -> Result<f32>;

    /// Margin `z_fake - z_real` and its gradient with respect to the `[0,1]`
    /// pixels of the (preprocessed) image, `H x W x 3`. Detectors without
    /// gradients keep the default.
    fn input_gradient(&self, _image: &ImageTensor) -> Result<InputGradient> {
        Err(Error::NotDifferentiable)
    }

    /// Side length the detector expects after preprocessing.
    fn input_size(&self) -> usize;
}

pub struct InputGradient {
    pub margin: f32,
    pub fake_probability: f32,
    pub grad: Array3<f32>,
}

/// Invocation counters for verifying that ablation variants really bypass
/// the modules they claim to bypass.
#[derive(Debug, Default)]
pub struct Counters {
    pub amsff_fuse: AtomicU64,
    pub psm_select: AtomicU64,
    pub random_select: AtomicU64,
}

impl Counters {
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.amsff_fuse.load(Ordering::Relaxed),
            self.psm_select.load(Ordering::Relaxed),
            self.random_select.load(Ordering::Relaxed),
        )
    }

    pub fn reset(&self) {
        self.amsff_fuse.store(0, Ordering::Relaxed);
        self.psm_select.store(0, Ordering::Relaxed);
        self.random_select.store(0, Ordering::Relaxed);
    }
}

pub enum Mode {
    Eval,
    Train(Tape<f32>),
    /// Evaluation-mode pass that differentiates with respect to the input.
    InputGrad(Tape<f32>),
}

pub struct BatchForward {
    /// `(N, 2)` logits; attached to the tape in `Train` and `InputGrad`.
    pub logits: Var<f32>,
    pub scores: Vec<DetectionScore>,
    /// Per-image patch proposals (empty for the global-only variant).
    pub proposals: Vec<Vec<PatchProposal>>,
    /// Tape node of the input leaf in `InputGrad` mode.
    pub input_node: Option<usize>,
}

/// Shape/value trace of a single-image forward, for verification.
pub struct ForwardTrace {
    pub shallow_shape: Vec<usize>,
    pub deep_shape: Vec<usize>,
    pub fused_shape: Vec<usize>,
    pub global_embedding: Vec<f32>,
    pub local_embeddings: Vec<Vec<f32>>,
    pub proposals: Vec<PatchProposal>,
    pub score: DetectionScore,
}

pub struct Model {
    pub params: Params<f32>,
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub amsff: Amsff,
    pub head: FusionHead,
    pub counters: Counters,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let cfg = cfg.finalize()?;
        if cfg.backbone.pretrained {
            log::warn!(
                "pretrained backbone requested; no weight file supplied, using seeded random init \
                 (load a checkpoint to restore trained weights)"
            );
        }
        let mut params = Params::<f32>::new();
        let backbone = Backbone::new(&mut params, &cfg.backbone);
        let c_low = cfg.backbone.stage_channels(cfg.backbone.shallow_stage);
        let c_high = cfg.deep_channels();
        let amsff = Amsff::new(&mut params, cfg.seed, "amsff", c_low, c_high, &cfg.amsff);
        let head = FusionHead::new(&mut params, cfg.seed, "fusion", c_high, cfg.embed_dim, &cfg.fusion);
        Ok(Model {
            params,
            cfg,
            backbone,
            amsff,
            head,
            counters: Counters::default(),
        })
    }

    /// Resize (bilinear, aspect ratio not preserved) to the model's input
    /// size. Values stay in `[0, 1]`.
    pub fn preprocess(&self, image: &ImageTensor) -> ImageTensor {
        image.resized(self.cfg.input_size)
    }

    fn stack_images(&self, images: &[ImageTensor]) -> Result<ArrayD<f32>> {
        let s = self.cfg.input_size;
        let n = images.len();
        if n == 0 {
            return Err(Error::config("empty image batch"));
        }
        let mut x = ArrayD::<f32>::zeros(IxDyn(&[n, 3, s, s]));
        for (i, img) in images.iter().enumerate() {
            if img.height() != s || img.width() != s {
                return Err(Error::config(format!(
                    "preprocessing error: image is {}x{}, expected {s}x{s}",
                    img.height(),
                    img.width()
                )));
            }
            if !img.all_finite() {
                return Err(Error::Numeric("non-finite pixels in input".into()));
            }
            for y in 0..s {
                for xx in 0..s {
                    for c in 0..3 {
                        x[[i, c, y, xx]] = img.pixels[[y, xx, c]];
                    }
                }
            }
        }
        Ok(x)
    }

    /// Batched forward pass. `sample_ids` key the seeded random windows of
    /// the patch-selection ablation; pass stable per-sample identifiers.
    pub fn forward_batch(
        &self,
        mode: Mode,
        images: &[ImageTensor],
        sample_ids: &[u64],
    ) -> Result<BatchForward> {
        if sample_ids.len() != images.len() {
            return Err(Error::config("sample_ids length mismatch"));
        }
        let x = self.stack_images(images)?;
        let (ctx, input_var) = match &mode {
            Mode::Eval => (Ctx::eval(&self.params), Var::constant(x)),
            Mode::Train(tape) => (Ctx::train(&self.params, tape.clone()), tape.leaf(x)),
            Mode::InputGrad(tape) => (Ctx::input_grad(&self.params, tape.clone()), tape.leaf(x)),
        };
        let input_node = input_var.node_id();
        let (logits, proposals, _traces) = self.forward_inner(&ctx, &input_var, sample_ids, false)?;
        let scores = logits_to_scores(&logits)?;
        Ok(BatchForward {
            logits,
            scores,
            proposals,
            input_node,
        })
    }

    fn forward_inner(
        &self,
        ctx: &Ctx<'_, f32>,
        x: &Var<f32>,
        sample_ids: &[u64],
        want_trace: bool,
    ) -> Result<(Var<f32>, Vec<Vec<PatchProposal>>, Vec<ForwardTrace>)> {
        let n = x.shape()[0];
        let mean: Vec<f32> = self.cfg.norm_mean.iter().map(|&v| v as f32).collect();
        let std: Vec<f32> = self.cfg.norm_std.iter().map(|&v| v as f32).collect();
        let x_norm = ops::normalize_channels(x, &mean, &std);

        let (shallow, deep) = self.backbone.extract_multiscale(ctx, &x_norm)?;
        let fused = match self.cfg.variant {
            Variant::NoAmsff => deep.clone(),
            _ => {
                self.counters.amsff_fuse.fetch_add(n as u64, Ordering::Relaxed);
                self.amsff.fuse(ctx, &shallow, &deep)?
            }
        };

        let global = self.head.global_embedding(ctx, &fused);

        let mut proposals: Vec<Vec<PatchProposal>> = Vec::new();
        let locals = if self.cfg.variant == Variant::GlobalOnly {
            None
        } else {
            let fused_vals = fused.data.view().into_dimensionality::<Ix4>().unwrap();
            let (_, _, fh, fw) = fused_vals.dim();
            let mut crop_specs = Vec::new();
            for i in 0..n {
                let per_image = match self.cfg.variant {
                    Variant::NoPsm => {
                        self.counters.random_select.fetch_add(1, Ordering::Relaxed);
                        let mut r = rng::stream(self.cfg.seed, "no-psm-windows", &[sample_ids[i]]);
                        psm::random_patches(fh, fw, &self.cfg.psm, &mut r)?
                    }
                    _ => {
                        self.counters.psm_select.fetch_add(1, Ordering::Relaxed);
                        let view = fused_vals.index_axis(ndarray::Axis(0), i);
                        psm::select_patches(&view, &self.cfg.psm)?
                    }
                };
                for p in &per_image {
                    let (top, left, size) = p.rect_image.expect("mapped proposal");
                    crop_specs.push(CropSpec {
                        batch: i,
                        top,
                        left,
                        size,
                    });
                }
                proposals.push(per_image);
            }
            if crop_specs.is_empty() {
                return Err(Error::config("patch selection produced no proposals"));
            }
            // Per-channel normalization commutes with cropping and bilinear
            // resampling, so patches come straight from the normalized batch.
            let patches = ops::crop_resize_bilinear(&x_norm, &crop_specs, self.cfg.input_size);
            let pooled = self.backbone.pooled_deep_feature(ctx, &patches)?;
            let projected = self.head.project_local(ctx, &pooled);
            let p_per_image = crop_specs.len() / n;
            Some(ops::reshape(&projected, &[n, p_per_image, self.cfg.embed_dim]))
        };

        let tokens = match (self.cfg.variant, &locals) {
            (Variant::GlobalOnly, _) => ops::reshape(&global, &[n, 1, self.cfg.embed_dim]),
            (Variant::LocalOnly, Some(l)) => (*l).clone(),
            (_, Some(l)) => ops::concat_token_sets(&global, l),
            (_, None) => unreachable!("local branch missing outside global-only"),
        };
        let logits = self.head.fuse_tokens_and_classify(ctx, &tokens);
        if !logits.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }

        let traces = if want_trace {
            let scores = logits_to_scores(&logits)?;
            let per_image_shape = |v: &Var<f32>| {
                let mut s = v.shape().to_vec();
                s[0] = 1;
                s
            };
            let g2 = global.data.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            (0..n)
                .map(|i| ForwardTrace {
                    shallow_shape: per_image_shape(&shallow),
                    deep_shape: per_image_shape(&deep),
                    fused_shape: per_image_shape(&fused),
                    global_embedding: g2.row(i).iter().copied().collect(),
                    local_embeddings: locals
                        .as_ref()
                        .map(|l| {
                            let l3 = l.data.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                            (0..l3.dim().1)
                                .map(|t| l3.slice(ndarray::s![i, t, ..]).iter().copied().collect())
                                .collect()
                        })
                        .unwrap_or_default(),
                    proposals: proposals.get(i).cloned().unwrap_or_default(),
                    score: scores[i],
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((logits, proposals, traces))
    }

    /// Score one already-preprocessed or raw image (raw images are resized).
    pub fn score(&self, image: &ImageTensor) -> Result<DetectionScore> {
        let img = self.preprocess(image);
        let out = self.forward_batch(Mode::Eval, std::slice::from_ref(&img), &[0])?;
        Ok(out.scores[0])
    }

    /// Single-image forward with full shape/value trace.
    pub fn trace(&self, image: &ImageTensor) -> Result<ForwardTrace> {
        Ok(self.trace_batch(std::slice::from_ref(image))?.remove(0))
    }

    /// Batched forward with per-image shape/value traces.
    pub fn trace_batch(&self, images: &[ImageTensor]) -> Result<Vec<ForwardTrace>> {
        let imgs: Vec<ImageTensor> = images.iter().map(|im| self.preprocess(im)).collect();
        let ctx = Ctx::eval(&self.params);
        let x = Var::constant(self.stack_images(&imgs)?);
        let ids: Vec<u64> = (0..imgs.len() as u64).collect();
        let (_, _, traces) = self.forward_inner(&ctx, &x, &ids, true)?;
        Ok(traces)
    }

    /// Fused-map activation heatmap (channel mean) and the selected patch
    /// proposals, for visualization.
    pub fn visualize(&self, image: &ImageTensor) -> Result<(Array2<f32>, Vec<PatchProposal>)> {
        let img = self.preprocess(image);
        let trace = self.trace(&img)?;
        let ctx = Ctx::eval(&self.params);
        let x = Var::constant(self.stack_images(std::slice::from_ref(&img))?);
        let mean: Vec<f32> = self.cfg.norm_mean.iter().map(|&v| v as f32).collect();
        let std: Vec<f32> = self.cfg.norm_std.iter().map(|&v| v as f32).collect();
        let x_norm = ops::normalize_channels(&x, &mean, &std);
        let (shallow, deep) = self.backbone.extract_multiscale(&ctx, &x_norm)?;
        let fused = match self.cfg.variant {
            Variant::NoAmsff => deep,
            _ => self.amsff.fuse(&ctx, &shallow, &deep)?,
        };
        let f4 = fused.data.view().into_dimensionality::<Ix4>().unwrap();
        let (_, c, h, w) = f4.dim();
        let mut heat = Array2::<f32>::zeros((h, w));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    heat[[y, xx]] += f4[[0, ci, y, xx]];
                }
            }
        }
        heat.mapv_inplace(|v| v / c as f32);
        Ok((heat, trace.proposals))
    }

    /// Complete parameter count (weights only, excluding running buffers).
    pub fn parameter_count(&self) -> usize {
        self.params.total_elements()
    }
}

fn logits_to_scores(logits: &Var<f32>) -> Result<Vec<DetectionScore>> {
    let l2 = logits.data.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut out = Vec::with_capacity(l2.dim().0);
    for row in l2.rows() {
        let s = DetectionScore::from_logits([row[0], row[1]]);
        if !s.fake_probability.is_finite() {
            return Err(Error::Numeric("non-finite score".into()));
        }
        out.push(s);
    }
    Ok(out)
}

impl Detector for Model {
    fn fake_probability(&self, image: &ImageTensor) -> Result<f32> {
        Ok(self.score(image)?.fake_probability)
    }

    fn input_gradient(&self, image: &ImageTensor) -> Result<InputGradient> {
        let img = self.preprocess(image);
        let tape = Tape::new();
        let out = self.forward_batch(Mode::InputGrad(tape), std::slice::from_ref(&img), &[0])?;
        let fake = ops::select_column(&out.logits, FAKE_CLASS);
        let real = ops::select_column(&out.logits, 1 - FAKE_CLASS);
        let margin = ops::sum_all(&ops::sub(&fake, &real));
        let grads = backward(&margin);
        let node = out.input_node.expect("input leaf on tape");
        let g = grads
            .for_node(node)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(&[1, 3, img.height(), img.width()])));
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (_, _, h, w) = g4.dim();
        let mut hwc = Array3::<f32>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    hwc[[y, x, c]] = g4[[0, c, y, x]];
                }
            }
        }
        Ok(InputGradient {
            margin: margin.scalar(),
            fake_probability: out.scores[0].fake_probability,
            grad: hwc,
        })
    }

    fn input_size(&self) -> usize {
        self.cfg.input_size
    }
}
