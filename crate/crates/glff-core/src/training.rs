//! End-to-end training: augmentation, Adam, the step loop, logging and
//! resumable checkpoints.

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::{gaussian_blur, jpeg_roundtrip, ImageTensor};
use crate::model::{Mode, Model};
use crate::rng;
use crate::tensor::{backward, ops, Gradients, Params, ParamId, Tape};
use ndarray::ArrayD;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Probability that each augmentation operation fires on a sample.
    pub augment_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub jpeg_quality_range: (u8, u8),
    /// When set, one draw gates blur and JPEG together instead of two
    /// independent draws.
    pub joint_augment: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: 1000,
            seed: 0,
            augment_prob: 0.1,
            blur_sigma_range: (0.0, 3.0),
            jpeg_quality_range: (30, 100),
            joint_augment: false,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings used by the toy overfit runs.
    pub fn toy(seed: u64) -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 2e-3,
            max_steps: 200,
            seed,
            augment_prob: 0.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::config("augment probability must lie in [0,1]"));
        }
        if self.blur_sigma_range.0 < 0.0 || self.blur_sigma_range.0 > self.blur_sigma_range.1 {
            return Err(Error::config("bad blur sigma range"));
        }
        let (qlo, qhi) = self.jpeg_quality_range;
        if qlo < 1 || qhi > 100 || qlo > qhi {
            return Err(Error::config("bad jpeg quality range"));
        }
        Ok(())
    }
}

/// What the augmentation sampler decided for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDecision {
    pub blur_sigma: Option<f64>,
    pub jpeg_quality: Option<u8>,
}

/// Samples augmentation decisions and applies them: Gaussian blur first,
/// then a JPEG round trip, both before the final resize.
pub fn augment(
    image: &ImageTensor,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, AugmentDecision)> {
    let (blur_fires, jpeg_fires) = if cfg.joint_augment {
        let fire = rng.random_bool(cfg.augment_prob);
        (fire, fire)
    } else {
        (
            rng.random_bool(cfg.augment_prob),
            rng.random_bool(cfg.augment_prob),
        )
    };
    let blur_sigma = blur_fires
        .then(|| rng.random_range(cfg.blur_sigma_range.0..=cfg.blur_sigma_range.1));
    let jpeg_quality = jpeg_fires
        .then(|| rng.random_range(cfg.jpeg_quality_range.0..=cfg.jpeg_quality_range.1));

    let mut out = image.clone();
    if let Some(sigma) = blur_sigma {
        out.pixels = gaussian_blur(&out.pixels, sigma);
    }
    if let Some(q) = jpeg_quality {
        out = jpeg_roundtrip(&out, q)?;
    }
    Ok((
        out,
        AugmentDecision {
            blur_sigma,
            jpeg_quality,
        },
    ))
}

/// A labeled two-class image list; label 0 = real, 1 = fake. Items are
/// ordered lexicographically by path so sample ids are stable.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<(PathBuf, u8)>,
}

impl Dataset {
    pub fn from_dirs(real_dir: &Path, fake_dir: &Path) -> Result<Dataset> {
        let mut items = Vec::new();
        for (dir, label) in [(real_dir, 0u8), (fake_dir, 1u8)] {
            let mut files = list_images(dir)?;
            if files.is_empty() {
                return Err(Error::config(format!(
                    "no images found under {}",
                    dir.display()
                )));
            }
            files.sort();
            items.extend(files.into_iter().map(|p| (p, label)));
        }
        Ok(Dataset { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            Error::io(dir, e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk failed")))
        })?;
        if entry.file_type().is_file() {
            let p = entry.path();
            if matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "jpg" | "jpeg" | "ppm" | "bmp")
            ) {
                out.push(p.to_path_buf());
            }
        }
    }
    Ok(out)
}

/// Adam with bias correction; state is keyed by parameter so it can travel
/// through checkpoints.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<usize, ArrayD<f32>>,
    v: BTreeMap<usize, ArrayD<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, params: &mut Params<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - (self.beta1).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2).powi(self.step as i32);
        let lr = self.lr as f32;
        let eps = self.eps as f32;
        let n = params.len();
        for idx in 0..n {
            let pid = ParamId(idx);
            let Some(g) = grads.for_param(pid) else { continue };
            let m = self
                .m
                .entry(idx)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(idx)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            let value = params.get_mut(pid);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / bc1 as f32;
                let vh = v / bc2 as f32;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }

    /// Serializes moment estimates as named tensors for the checkpoint.
    pub fn export(&self, params: &Params<f32>) -> BTreeMap<String, ArrayD<f32>> {
        let mut out = BTreeMap::new();
        for (idx, m) in &self.m {
            out.insert(format!("adam.m.{}", params.name(ParamId(*idx))), m.clone());
        }
        for (idx, v) in &self.v {
            out.insert(format!("adam.v.{}", params.name(ParamId(*idx))), v.clone());
        }
        out
    }

    pub fn import(&mut self, params: &Params<f32>, tensors: &BTreeMap<String, ArrayD<f32>>, step: u64) {
        self.step = step;
        for (id, entry) in params.iter() {
            if let Some(m) = tensors.get(&format!("adam.m.{}", entry.name)) {
                self.m.insert(id.0, m.clone());
            }
            if let Some(v) = tensors.get(&format!("adam.v.{}", entry.name)) {
                self.v.insert(id.0, v.clone());
            }
        }
    }
}

pub struct TrainReport {
    pub steps_run: u64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub skipped_images: usize,
}

/// Trains `model` on the dataset for `cfg.max_steps` optimizer steps,
/// writing `step,loss,lr,seconds` lines to `log`. Training resumes from
/// `start_step` (use the checkpoint's step) and replays the exact data
/// order and augmentation decisions of an uninterrupted run.
pub fn train(
    model: &mut Model,
    adam: &mut Adam,
    data: &Dataset,
    cfg: &TrainConfig,
    start_step: u64,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    let n = data.len();
    let t0 = Instant::now();
    let mut losses = Vec::new();
    let mut skipped_total = 0usize;
    let mut step = 0u64;
    let mut epoch = 0u64;

    'outer: loop {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, "shuffle", &[epoch]);
        // Fisher-Yates with the epoch stream.
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            if step >= cfg.max_steps {
                break 'outer;
            }
            step += 1;
            if step <= start_step {
                continue;
            }

            let loaded: Vec<Result<(ImageTensor, u8)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let (path, label) = &data.items[idx];
                    let img = ImageTensor::load(path)?;
                    let mut aug_rng = rng::stream(cfg.seed, "augment", &[idx as u64, epoch]);
                    let (img, _) = augment(&img, cfg, &mut aug_rng)?;
                    Ok((img.resized(model.cfg.input_size), *label))
                })
                .collect();
            let mut images = Vec::new();
            let mut labels = Vec::new();
            let mut ids = Vec::new();
            for (r, &idx) in loaded.into_iter().zip(chunk.iter()) {
                match r {
                    Ok((img, label)) => {
                        images.push(img);
                        labels.push(label as usize);
                        ids.push(idx as u64);
                    }
                    Err(e) => {
                        skipped_total += 1;
                        log::warn!("skipping unreadable sample: {e}");
                    }
                }
            }
            if images.is_empty() {
                continue;
            }

            let tape = Tape::new();
            let out = model.forward_batch(Mode::Train(tape), &images, &ids)?;
            let loss_var = ops::cross_entropy_logits(&out.logits, &labels);
            let loss = loss_var.scalar() as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at step {step} (batch of {} images, labels {labels:?})",
                    images.len()
                )));
            }
            let grads = backward(&loss_var);
            adam.apply(&mut model.params, &grads);
            losses.push(loss);
            if step % cfg.log_every == 0 {
                writeln!(
                    log,
                    "{step},{loss:.6},{:.8},{:.3}",
                    cfg.learning_rate,
                    t0.elapsed().as_secs_f64()
                )
                .map_err(|e| Error::io("train log", e))?;
            }
        }
        epoch += 1;
    }

    Ok(TrainReport {
        steps_run: step.saturating_sub(start_step),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
        skipped_images: skipped_total,
    })
}

/// Convenience wrapper: fresh model (or resumed trainer state), full run,
/// checkpoint written to `out`.
pub fn train_to_checkpoint(
    model_cfg: ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    log: &mut dyn Write,
) -> Result<(Model, TrainReport)> {
    let (mut model, mut adam, start_step) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let model = ckpt.restore()?;
            let mut adam = Adam::new(cfg);
            adam.import(&model.params, &ckpt.optimizer, ckpt.step);
            (model, adam, ckpt.step)
        }
        None => (Model::new(model_cfg)?, Adam::new(cfg), 0),
    };
    let report = train(&mut model, &mut adam, data, cfg, start_step, log)?;
    let opt = adam.export(&model.params);
    Checkpoint::capture(&model, cfg.max_steps, opt).save(out)?;
    Ok((model, report))
}
