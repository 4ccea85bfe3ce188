//! Robustness test-set construction: post-processing operations applied to
//! input images with full provenance in a line-delimited manifest.
//!
//! Protocols: common post-processing (JPEG / blur / blur-then-JPEG),
//! adversarial perturbation against a differentiable detector, multi-image
//! compression through an external H.264 encoder, and mixed chains.

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, jpeg_roundtrip, read_ppm, write_ppm, ImageTensor};
use crate::model::Detector;
use crate::rng;
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

/// One applied operation with its parameters, replayable from the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OpRecord {
    pub name: String,
    pub params: serde_json::Value,
}

/// One manifest line: image path, binary label, generator tag, protocol tag
/// and the ordered list of applied operations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub path: String,
    pub label: u8,
    pub generator: String,
    pub protocol: String,
    pub ops: Vec<OpRecord>,
}

pub mod protocol {
    pub const UNPROCESSED: &str = "unprocessed";
    pub const COMMON: &str = "common";
    pub const BLEND_EXTERNAL: &str = "blend(external)";
    pub const ANTIFORENSICS: &str = "antiforensics";
    pub const MULTICOMPRESS: &str = "multicompress";
    pub const MIXED: &str = "mixed";
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdversarialConfig {
    pub steps: usize,
    pub step_size: f64,
    pub l2_budget: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            steps: 100,
            step_size: 0.01,
            l2_budget: 3.0,
        }
    }
}

/// Building blocks the mixed protocol can chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixOp {
    Common,
    MultiCompress,
    Adversarial,
}

/// One allowed combination in the mixed protocol. Combinations whose
/// face-blending prefix depends on external models degrade to their
/// implementable suffix and carry `blend_dropped`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixCombo {
    pub name: String,
    pub blend_dropped: bool,
    pub ops: Vec<MixOp>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub jpeg_quality_range: (u8, u8),
    pub blur_sigma_range: (f64, f64),
    pub video_crf: u32,
    pub fps: u32,
    pub group_size: usize,
    pub adversarial: AdversarialConfig,
    pub mix_combos: Vec<MixCombo>,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            jpeg_quality_range: (20, 90),
            blur_sigma_range: (1.0, 4.0),
            video_crf: 22,
            fps: 25,
            group_size: 25,
            adversarial: AdversarialConfig::default(),
            mix_combos: default_mix_combos(),
            seed: 0,
        }
    }
}

/// The five mixed-protocol combinations; blend-dependent prefixes degrade
/// to their implementable suffixes.
pub fn default_mix_combos() -> Vec<MixCombo> {
    vec![
        MixCombo {
            name: "blend+common".into(),
            blend_dropped: true,
            ops: vec![MixOp::Common],
        },
        MixCombo {
            name: "blend+multicompress".into(),
            blend_dropped: true,
            ops: vec![MixOp::MultiCompress],
        },
        MixCombo {
            name: "multicompress+antiforensics".into(),
            blend_dropped: false,
            ops: vec![MixOp::MultiCompress, MixOp::Adversarial],
        },
        MixCombo {
            name: "blend+common+antiforensics".into(),
            blend_dropped: true,
            ops: vec![MixOp::Common, MixOp::Adversarial],
        },
        MixCombo {
            name: "blend+multicompress+antiforensics".into(),
            blend_dropped: true,
            ops: vec![MixOp::MultiCompress, MixOp::Adversarial],
        },
    ]
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let (qlo, qhi) = self.jpeg_quality_range;
        if qlo < 1 || qhi > 100 || qlo > qhi {
            return Err(Error::config("jpeg quality range must lie in [1,100]"));
        }
        if self.blur_sigma_range.0 < 0.0 || self.blur_sigma_range.0 > self.blur_sigma_range.1 {
            return Err(Error::config("bad blur sigma range"));
        }
        if self.group_size < 2 {
            return Err(Error::config("group size must be at least 2"));
        }
        if self.mix_combos.is_empty() {
            return Err(Error::config("mixed protocol needs at least one combination"));
        }
        Ok(())
    }
}

/// Baseline-JPEG round trip at the given quality; dimensions preserved.
pub fn jpeg_compress(image: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::config(format!("jpeg quality {quality} outside [1,100]")));
    }
    jpeg_roundtrip(image, quality)
}

/// Gaussian blur with reflected borders; sigma 0 is the identity.
pub fn blur(image: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    if sigma < 0.0 {
        return Err(Error::config(format!("negative blur sigma {sigma}")));
    }
    let mut out = image.clone();
    out.pixels = gaussian_blur(&out.pixels, sigma);
    Ok(out)
}

/// Applies one uniformly chosen branch of {JPEG, blur, blur-then-JPEG} with
/// parameters from the configured ranges.
pub fn common_postprocess(
    image: &ImageTensor,
    cfg: &ProtocolConfig,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, Vec<OpRecord>)> {
    let branch = rng.random_range(0..3u8);
    let mut ops = Vec::new();
    let mut out = image.clone();
    let sample_blur = |rng: &mut dyn rand::RngCore| -> f64 {
        rng.random_range(cfg.blur_sigma_range.0..=cfg.blur_sigma_range.1)
    };
    let sample_q = |rng: &mut dyn rand::RngCore| -> u8 {
        rng.random_range(cfg.jpeg_quality_range.0..=cfg.jpeg_quality_range.1)
    };
    match branch {
        0 => {
            let q = sample_q(rng);
            out = jpeg_compress(&out, q)?;
            ops.push(OpRecord {
                name: "jpeg".into(),
                params: json!({ "quality": q }),
            });
        }
        1 => {
            let s = sample_blur(rng);
            out = blur(&out, s)?;
            ops.push(OpRecord {
                name: "blur".into(),
                params: json!({ "sigma": s }),
            });
        }
        _ => {
            let s = sample_blur(rng);
            let q = sample_q(rng);
            out = blur(&out, s)?;
            out = jpeg_compress(&out, q)?;
            ops.push(OpRecord {
                name: "blur".into(),
                params: json!({ "sigma": s }),
            });
            ops.push(OpRecord {
                name: "jpeg".into(),
                params: json!({ "quality": q }),
            });
        }
    }
    Ok((out, ops))
}

/// Locates the external encoder: `GLFF_ENCODER` first, then `ffmpeg` on
/// `PATH`.
pub fn resolve_encoder() -> Result<PathBuf> {
    if let Some(p) = std::env::var_os("GLFF_ENCODER") {
        let path = PathBuf::from(p);
        if path.is_file() {
            return Ok(path);
        }
        return Err(Error::Encoder(format!(
            "GLFF_ENCODER points at {} which does not exist",
            path.display()
        )));
    }
    if let Ok(path_var) = std::env::var("PATH") {
        for dir in std::env::split_paths(&path_var) {
            let candidate = dir.join("ffmpeg");
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::Encoder("GLFF_ENCODER is unset and no ffmpeg on PATH".into()))
}

fn run_encoder(encoder: &Path, args: &[String]) -> Result<()> {
    let output = Command::new(encoder)
        .args(args)
        .output()
        .map_err(|e| Error::Encoder(format!("failed to launch {}: {e}", encoder.display())))?;
    if !output.status.success() {
        return Err(Error::Encoder(format!(
            "{} {:?} exited with {}: {}",
            encoder.display(),
            args,
            output.status,
            String::from_utf8_lossy(&output.stderr)
        )));
    }
    Ok(())
}

/// Groups the images, encodes each group as an H.264 sequence at constant
/// quality, decodes the frames back, and returns them in input order.
///
/// Invocation contract (ffmpeg-compatible):
/// `{encoder} -y -loglevel error -framerate {fps} -i {dir}/in_%05d.ppm
///  -c:v libx264 -crf {crf} -pix_fmt yuv420p {dir}/seq.mp4` and
/// `{encoder} -y -loglevel error -i {dir}/seq.mp4 {dir}/out_%05d.ppm`.
pub fn multi_image_compress(
    images: &[ImageTensor],
    group_size: usize,
    crf: u32,
    fps: u32,
    encoder: &Path,
) -> Result<Vec<ImageTensor>> {
    if images.is_empty() {
        return Err(Error::config("no images to compress"));
    }
    if group_size == 0 {
        return Err(Error::config("group size must be at least 1"));
    }
    let mut out = Vec::with_capacity(images.len());
    for group in images.chunks(group_size) {
        let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
        let (h0, w0, _) = group[0].pixels.dim();
        for (i, img) in group.iter().enumerate() {
            let frame = if img.pixels.dim() == (h0, w0, 3) {
                img.clone()
            } else {
                log::warn!(
                    "group frame {} is {}x{}, resizing to match the first frame {}x{}",
                    i,
                    img.height(),
                    img.width(),
                    h0,
                    w0
                );
                let mut r = img.clone();
                r.pixels = crate::image::resize_bilinear(&img.pixels, h0, w0);
                r
            };
            write_ppm(&frame, &dir.path().join(format!("in_{:05}.ppm", i + 1)))?;
        }
        let seq = dir.path().join("seq.mp4");
        run_encoder(
            encoder,
            &[
                "-y".into(),
                "-loglevel".into(),
                "error".into(),
                "-framerate".into(),
                fps.to_string(),
                "-i".into(),
                dir.path().join("in_%05d.ppm").display().to_string(),
                "-c:v".into(),
                "libx264".into(),
                "-crf".into(),
                crf.to_string(),
                "-pix_fmt".into(),
                "yuv420p".into(),
                seq.display().to_string(),
            ],
        )?;
        run_encoder(
            encoder,
            &[
                "-y".into(),
                "-loglevel".into(),
                "error".into(),
                "-i".into(),
                seq.display().to_string(),
                dir.path().join("out_%05d.ppm").display().to_string(),
            ],
        )?;
        for i in 0..group.len() {
            let frame_path = dir.path().join(format!("out_{:05}.ppm", i + 1));
            if !frame_path.is_file() {
                return Err(Error::Encoder(format!(
                    "decoded frame count mismatch: {} missing ({} frames in)",
                    frame_path.display(),
                    group.len()
                )));
            }
            let mut frame = read_ppm(&frame_path)?;
            frame.path = group[i].path.clone();
            frame.original_size = group[i].original_size;
            out.push(frame);
        }
        let extra = dir.path().join(format!("out_{:05}.ppm", group.len() + 1));
        if extra.is_file() {
            return Err(Error::Encoder(format!(
                "decoded frame count mismatch: more frames out than in ({} in)",
                group.len()
            )));
        }
    }
    Ok(out)
}

/// Gradient-descent perturbation on a margin loss that pushes the fake
/// logit below the real logit, projected onto an L2 ball around the input
/// (pixel scale `[0,1]`). `steps = 0` returns the input unchanged.
pub fn adversarial_perturb(
    image: &ImageTensor,
    detector: &dyn Detector,
    cfg: &AdversarialConfig,
) -> Result<ImageTensor> {
    if cfg.steps == 0 {
        return Ok(image.clone());
    }
    let size = detector.input_size();
    let base = image.resized(size);
    let mut current = base.clone();
    for _ in 0..cfg.steps {
        let g = detector.input_gradient(&current)?;
        let norm = g.grad.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let scale = (cfg.step_size / norm) as f32;
        ndarray::Zip::from(&mut current.pixels)
            .and(&g.grad)
            .for_each(|p, &gv| *p -= gv * scale);
        // project back into the L2 ball around the pristine image
        let mut delta: Array3<f32> = &current.pixels - &base.pixels;
        let dnorm = delta.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if dnorm > cfg.l2_budget {
            let shrink = (cfg.l2_budget / dnorm) as f32;
            delta.mapv_inplace(|v| v * shrink);
        }
        current.pixels = &base.pixels + &delta;
        current.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Ok(current)
}

/// Uniformly picks one mixed-protocol combination per image and applies its
/// operations in order. Returns processed images with per-image op lists.
pub fn mixed(
    images: &[ImageTensor],
    cfg: &ProtocolConfig,
    detector: Option<&dyn Detector>,
    encoder: Option<&Path>,
) -> Result<(Vec<ImageTensor>, Vec<Vec<OpRecord>>)> {
    cfg.validate()?;
    let n = images.len();
    let mut combo_of: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(cfg.seed, "mix-combo", &[i as u64]);
        combo_of.push(r.random_range(0..cfg.mix_combos.len()));
    }
    let mut out: Vec<Option<ImageTensor>> = images.iter().map(|i| Some(i.clone())).collect();
    let mut ops: Vec<Vec<OpRecord>> = (0..n)
        .map(|i| {
            let combo = &cfg.mix_combos[combo_of[i]];
            vec![OpRecord {
                name: "mix_combo".into(),
                params: json!({ "combo": combo.name, "blend_dropped": combo.blend_dropped }),
            }]
        })
        .collect();

    let max_stages = cfg.mix_combos.iter().map(|c| c.ops.len()).max().unwrap_or(0);
    for stage in 0..max_stages {
        // group the indices that need multi-image compression at this stage
        let mc_indices: Vec<usize> = (0..n)
            .filter(|&i| cfg.mix_combos[combo_of[i]].ops.get(stage) == Some(&MixOp::MultiCompress))
            .collect();
        if !mc_indices.is_empty() {
            let encoder = encoder
                .ok_or_else(|| Error::Encoder("mixed protocol needs the external encoder".into()))?;
            let group_imgs: Vec<ImageTensor> =
                mc_indices.iter().map(|&i| out[i].clone().unwrap()).collect();
            let compressed =
                multi_image_compress(&group_imgs, cfg.group_size, cfg.video_crf, cfg.fps, encoder)?;
            for (slot, (&i, img)) in mc_indices.iter().zip(compressed.into_iter()).enumerate() {
                let group_paths: Vec<String> = group_members(&mc_indices, slot, cfg.group_size)
                    .iter()
                    .map(|&j| index_name(j))
                    .collect();
                out[i] = Some(img);
                ops[i].push(OpRecord {
                    name: "multicompress".into(),
                    params: json!({
                        "crf": cfg.video_crf,
                        "fps": cfg.fps,
                        "group": group_paths,
                        "index": slot % cfg.group_size,
                    }),
                });
            }
        }
        for i in 0..n {
            match cfg.mix_combos[combo_of[i]].ops.get(stage) {
                Some(MixOp::Common) => {
                    let mut r = rng::stream(cfg.seed, "mix-common", &[i as u64, stage as u64]);
                    let (img, mut recs) = common_postprocess(out[i].as_ref().unwrap(), cfg, &mut r)?;
                    out[i] = Some(img);
                    ops[i].append(&mut recs);
                }
                Some(MixOp::Adversarial) => {
                    let detector = detector.ok_or(Error::NotDifferentiable)?;
                    let img = adversarial_perturb(out[i].as_ref().unwrap(), detector, &cfg.adversarial)?;
                    ops[i].push(OpRecord {
                        name: "adversarial".into(),
                        params: json!({
                            "steps": cfg.adversarial.steps,
                            "step_size": cfg.adversarial.step_size,
                            "l2_budget": cfg.adversarial.l2_budget,
                            "size": detector.input_size(),
                        }),
                    });
                    out[i] = Some(img);
                }
                _ => {}
            }
        }
    }
    Ok((out.into_iter().map(Option::unwrap).collect(), ops))
}

fn index_name(i: usize) -> String {
    format!("#{i}")
}

fn group_members(indices: &[usize], slot: usize, group_size: usize) -> Vec<usize> {
    let group = slot / group_size;
    indices
        .iter()
        .copied()
        .skip(group * group_size)
        .take(group_size)
        .collect()
}

/// Scans tagged directory roots and emits one record per image, ordered
/// lexicographically by path.
pub fn build_manifest(
    roots: &[(PathBuf, u8, String, String)],
) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    for (dir, label, generator, protocol) in roots {
        let mut files = Vec::new();
        for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                Error::io(
                    dir,
                    e.into_io_error()
                        .unwrap_or_else(|| std::io::Error::other("walk failed")),
                )
            })?;
            if entry.file_type().is_file()
                && matches!(
                    entry.path().extension().and_then(|e| e.to_str()),
                    Some("png" | "jpg" | "jpeg" | "ppm" | "bmp")
                )
            {
                files.push(entry.path().to_path_buf());
            }
        }
        for f in files {
            records.push(SampleRecord {
                path: f.display().to_string(),
                label: *label,
                generator: generator.clone(),
                protocol: protocol.clone(),
                ops: Vec::new(),
            });
        }
    }
    if records.is_empty() {
        return Err(Error::config("no images found for the manifest"));
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(records)
}

/// Writes records as UTF-8 JSON lines with fields
/// `path,label,generator,protocol,ops` in stable order.
pub fn write_manifest(records: &[SampleRecord], w: &mut dyn Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Checkpoint(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("manifest", e))?;
    }
    Ok(())
}

pub fn save_manifest(records: &[SampleRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_manifest(records, &mut w)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let r = BufReader::new(f);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            line: 0,
            msg: "manifest is empty".into(),
        });
    }
    Ok(out)
}

/// Re-applies recorded operations to a pristine input. Deterministic
/// operations (JPEG, blur, resize) reproduce outputs bit-exactly; video
/// compression reproduces within codec determinism and needs the recorded
/// group plus the encoder; adversarial replay needs the detector.
pub fn replay_ops(
    image: &ImageTensor,
    ops: &[OpRecord],
    group_source: Option<&dyn Fn(&str) -> Result<ImageTensor>>,
    detector: Option<&dyn Detector>,
    encoder: Option<&Path>,
) -> Result<ImageTensor> {
    let mut cur = image.clone();
    for op in ops {
        match op.name.as_str() {
            "mix_combo" => {}
            "jpeg" => {
                let q = op.params["quality"]
                    .as_u64()
                    .ok_or_else(|| Error::config("jpeg replay needs quality"))?;
                cur = jpeg_compress(&cur, q as u8)?;
            }
            "blur" => {
                let s = op.params["sigma"]
                    .as_f64()
                    .ok_or_else(|| Error::config("blur replay needs sigma"))?;
                cur = blur(&cur, s)?;
            }
            "resize" => {
                let size = op.params["size"]
                    .as_u64()
                    .ok_or_else(|| Error::config("resize replay needs size"))? as usize;
                cur = cur.resized(size);
            }
            "adversarial" => {
                let detector = detector.ok_or(Error::NotDifferentiable)?;
                let cfg = AdversarialConfig {
                    steps: op.params["steps"].as_u64().unwrap_or(0) as usize,
                    step_size: op.params["step_size"].as_f64().unwrap_or(0.01),
                    l2_budget: op.params["l2_budget"].as_f64().unwrap_or(3.0),
                };
                cur = adversarial_perturb(&cur, detector, &cfg)?;
            }
            "multicompress" => {
                let source =
                    group_source.ok_or_else(|| Error::config("multicompress replay needs the group source"))?;
                let encoder =
                    encoder.ok_or_else(|| Error::Encoder("multicompress replay needs the encoder".into()))?;
                let group: Vec<ImageTensor> = op.params["group"]
                    .as_array()
                    .ok_or_else(|| Error::config("multicompress replay needs the group list"))?
                    .iter()
                    .map(|v| source(v.as_str().unwrap_or_default()))
                    .collect::<Result<_>>()?;
                let crf = op.params["crf"].as_u64().unwrap_or(22) as u32;
                let fps = op.params["fps"].as_u64().unwrap_or(25) as u32;
                let index = op.params["index"].as_u64().unwrap_or(0) as usize;
                let compressed = multi_image_compress(&group, group.len(), crf, fps, encoder)?;
                cur = compressed
                    .into_iter()
                    .nth(index)
                    .ok_or_else(|| Error::config("replay group index out of range"))?;
            }
            other => return Err(Error::config(format!("unknown recorded op: {other}"))),
        }
    }
    Ok(cur)
}


/// Named protocol selector for the directory driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Common,
    Antiforensics,
    Multicompress,
    Mixed,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "common" => Ok(Protocol::Common),
            "antiforensics" => Ok(Protocol::Antiforensics),
            "multicompress" => Ok(Protocol::Multicompress),
            "mixed" => Ok(Protocol::Mixed),
            other => Err(Error::config(format!("unknown protocol: {other}"))),
        }
    }
}

impl Protocol {
    pub fn tag(&self) -> &'static str {
        match self {
            Protocol::Common => protocol::COMMON,
            Protocol::Antiforensics => protocol::ANTIFORENSICS,
            Protocol::Multicompress => protocol::MULTICOMPRESS,
            Protocol::Mixed => protocol::MIXED,
        }
    }
}

fn list_input_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            Error::io(
                dir,
                e.into_io_error()
                    .unwrap_or_else(|| std::io::Error::other("walk failed")),
            )
        })?;
        if entry.file_type().is_file()
            && matches!(
                entry.path().extension().and_then(|e| e.to_str()),
                Some("png" | "jpg" | "jpeg" | "ppm" | "bmp")
            )
        {
            files.push(entry.path().to_path_buf());
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!("no images under {}", dir.display())));
    }
    Ok(files)
}

/// Applies one protocol to every image under `in_dir`, writes the processed
/// images as PNG under `out_dir` and returns the manifest records (paths
/// relative to `out_dir`).
pub fn process_directory(
    proto: Protocol,
    in_dir: &Path,
    out_dir: &Path,
    cfg: &ProtocolConfig,
    label: u8,
    generator: &str,
    detector: Option<&dyn Detector>,
    encoder: Option<&Path>,
) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let files = list_input_images(in_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let images: Vec<ImageTensor> = files
        .iter()
        .map(|p| ImageTensor::load(p))
        .collect::<Result<_>>()?;

    let (processed, ops_per_image): (Vec<ImageTensor>, Vec<Vec<OpRecord>>) = match proto {
        Protocol::Common => {
            let mut out = Vec::with_capacity(images.len());
            let mut ops = Vec::with_capacity(images.len());
            for (i, img) in images.iter().enumerate() {
                let mut r = rng::stream(cfg.seed, "df3", &[i as u64]);
                let (p, o) = common_postprocess(img, cfg, &mut r)?;
                out.push(p);
                ops.push(o);
            }
            (out, ops)
        }
        Protocol::Antiforensics => {
            let detector = detector.ok_or(Error::NotDifferentiable)?;
            let mut out = Vec::with_capacity(images.len());
            let mut ops = Vec::with_capacity(images.len());
            for img in &images {
                let mut recs = Vec::new();
                if img.height() != detector.input_size() || img.width() != detector.input_size() {
                    recs.push(OpRecord {
                        name: "resize".into(),
                        params: json!({ "size": detector.input_size() }),
                    });
                }
                let p = adversarial_perturb(img, detector, &cfg.adversarial)?;
                recs.push(OpRecord {
                    name: "adversarial".into(),
                    params: json!({
                        "steps": cfg.adversarial.steps,
                        "step_size": cfg.adversarial.step_size,
                        "l2_budget": cfg.adversarial.l2_budget,
                        "size": detector.input_size(),
                    }),
                });
                out.push(p);
                ops.push(recs);
            }
            (out, ops)
        }
        Protocol::Multicompress => {
            let encoder = encoder
                .map(Path::to_path_buf)
                .map(Ok)
                .unwrap_or_else(resolve_encoder)?;
            let out = multi_image_compress(&images, cfg.group_size, cfg.video_crf, cfg.fps, &encoder)?;
            let ops = (0..images.len())
                .map(|i| {
                    let group_start = (i / cfg.group_size) * cfg.group_size;
                    let group: Vec<String> = files
                        [group_start..(group_start + cfg.group_size).min(files.len())]
                        .iter()
                        .map(|p| p.display().to_string())
                        .collect();
                    vec![OpRecord {
                        name: "multicompress".into(),
                        params: json!({
                            "crf": cfg.video_crf,
                            "fps": cfg.fps,
                            "group": group,
                            "index": i - group_start,
                        }),
                    }]
                })
                .collect();
            (out, ops)
        }
        Protocol::Mixed => {
            let resolved;
            let enc = match encoder {
                Some(e) => Some(e),
                None => match resolve_encoder() {
                    Ok(p) => {
                        resolved = p;
                        Some(resolved.as_path())
                    }
                    Err(_) => None,
                },
            };
            mixed(&images, cfg, detector, enc)?
        }
    };

    let mut records = Vec::with_capacity(processed.len());
    for (i, (img, ops)) in processed.iter().zip(ops_per_image.into_iter()).enumerate() {
        let stem = files[i]
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let name = format!("{i:05}_{stem}.png");
        img.save_png(&out_dir.join(&name))?;
        records.push(SampleRecord {
            path: name,
            label,
            generator: generator.to_string(),
            protocol: proto.tag().to_string(),
            ops,
        });
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(records)
}
