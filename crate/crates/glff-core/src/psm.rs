//! Patch selection: window scoring on the channel-summed fused map,
//! per-scale non-maximum suppression, and mapping of the kept windows back
//! to crop rectangles on the input image.

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, ImageTensor};
use crate::tensor::Elem;
use ndarray::{Array2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One sliding-window scale: window extent in feature cells, how many
/// proposals to keep, and the side length of the mapped image crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub crop_size: usize,
}

impl WindowSpec {
    pub fn new(height: usize, width: usize, count: usize, crop_size: usize) -> Self {
        WindowSpec {
            height,
            width,
            count,
            crop_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsmConfig {
    pub windows: Vec<WindowSpec>,
    pub nms_iou: f64,
    pub input_size: usize,
}

impl PsmConfig {
    /// Paper defaults for a 7x7 fused map and 224 input: three 3x3 windows
    /// mapped to 224-pixel crops plus three 2x2 windows mapped to 112-pixel
    /// crops.
    pub fn default_for_224() -> Self {
        PsmConfig {
            windows: vec![WindowSpec::new(3, 3, 3, 224), WindowSpec::new(2, 2, 3, 112)],
            nms_iou: 0.25,
            input_size: 224,
        }
    }

    /// Small preset for a 3x3 fused map and 96 input.
    pub fn tiny_for_96() -> Self {
        PsmConfig {
            windows: vec![WindowSpec::new(2, 2, 2, 64), WindowSpec::new(1, 1, 2, 32)],
            nms_iou: 0.25,
            input_size: 96,
        }
    }

    /// Total number of patches selected across scales.
    pub fn total_count(&self) -> usize {
        self.windows.iter().map(|w| w.count).sum()
    }

    pub fn validate(&self, map_h: usize, map_w: usize) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::config("no window specs configured"));
        }
        for w in &self.windows {
            if w.height == 0 || w.width == 0 || w.height > map_h || w.width > map_w {
                return Err(Error::config(format!(
                    "window {}x{} does not fit a {map_h}x{map_w} map",
                    w.height, w.width
                )));
            }
            if w.count < 1 {
                return Err(Error::config("window count must be at least 1"));
            }
            if w.crop_size == 0 || w.crop_size > self.input_size {
                return Err(Error::config(format!(
                    "crop size {} exceeds input size {}",
                    w.crop_size, self.input_size
                )));
            }
        }
        Ok(())
    }
}

/// A scored window on the activation map plus, once mapped, its crop
/// rectangle on the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchProposal {
    /// `(row, col, height, width)` in feature cells.
    pub rect_feature: (usize, usize, usize, usize),
    pub score: f64,
    /// `(top, left, size)` in input pixels; filled by [`map_to_image`].
    pub rect_image: Option<(usize, usize, usize)>,
    /// Index of the producing [`WindowSpec`] in the config.
    pub scale_tag: usize,
}

/// Channel sum of the fused map: `(C, H, W) -> (H, W)`.
pub fn activation_map<F: Elem>(fused: &ArrayView3<'_, F>) -> Array2<f64> {
    let (c, h, w) = fused.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[y, x]] += fused[[ci, y, x]].as_f64();
            }
        }
    }
    out
}

/// Scores every stride-1 window position: the score is the mean of the
/// activation map over the window.
pub fn score_windows(
    a: &Array2<f64>,
    spec: &WindowSpec,
    scale_tag: usize,
) -> Result<Vec<PatchProposal>> {
    let (h, w) = a.dim();
    if spec.height > h || spec.width > w {
        return Err(Error::config(format!(
            "window {}x{} larger than {h}x{w} activation map",
            spec.height, spec.width
        )));
    }
    let denom = (spec.height * spec.width) as f64;
    let mut out = Vec::with_capacity((h - spec.height + 1) * (w - spec.width + 1));
    for row in 0..=h - spec.height {
        for col in 0..=w - spec.width {
            let mut sum = 0.0;
            for dy in 0..spec.height {
                for dx in 0..spec.width {
                    sum += a[[row + dy, col + dx]];
                }
            }
            out.push(PatchProposal {
                rect_feature: (row, col, spec.height, spec.width),
                score: sum / denom,
                rect_image: None,
                scale_tag,
            });
        }
    }
    Ok(out)
}

/// Intersection-over-union of two feature-cell rectangles.
pub fn iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let (ar, ac, ah, aw) = a;
    let (br, bc, bh, bw) = b;
    let y0 = ar.max(br);
    let x0 = ac.max(bc);
    let y1 = (ar + ah).min(br + bh);
    let x1 = (ac + aw).min(bc + bw);
    let inter = y1.saturating_sub(y0) * x1.saturating_sub(x0);
    let union = ah * aw + bh * bw - inter;
    inter as f64 / union as f64
}

/// Greedy non-maximum suppression over same-scale proposals.
///
/// Proposals are ranked by score, ties broken by row-major position; a
/// proposal is discarded when its IoU with any kept rectangle exceeds
/// `iou_thresh`. Returns the kept proposals and whether fewer than `keep`
/// survived.
pub fn nms_select(
    proposals: &[PatchProposal],
    keep: usize,
    iou_thresh: f64,
    map_width: usize,
) -> Result<(Vec<PatchProposal>, bool)> {
    if keep < 1 {
        return Err(Error::config("nms keep count must be at least 1"));
    }
    let mut sorted: Vec<&PatchProposal> = proposals.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                let ia = a.rect_feature.0 * map_width + a.rect_feature.1;
                let ib = b.rect_feature.0 * map_width + b.rect_feature.1;
                ia.cmp(&ib)
            })
    });
    let mut kept: Vec<PatchProposal> = Vec::with_capacity(keep);
    for cand in sorted {
        if kept.len() == keep {
            break;
        }
        let overlaps = kept
            .iter()
            .any(|k| iou(k.rect_feature, cand.rect_feature) > iou_thresh);
        if !overlaps {
            kept.push(cand.clone());
        }
    }
    let shortfall = kept.len() < keep;
    Ok((kept, shortfall))
}

/// Maps a feature-window proposal to a crop rectangle on the input image.
///
/// The window center scales by `input_size / map_height`; the crop of side
/// `crop_size` centered there is shifted (not shrunk) to lie fully inside
/// the image.
pub fn map_to_image(
    p: &PatchProposal,
    spec: &WindowSpec,
    map_h: usize,
    map_w: usize,
    input_size: usize,
) -> Result<PatchProposal> {
    if spec.crop_size > input_size {
        return Err(Error::config(format!(
            "crop size {} exceeds input size {input_size}",
            spec.crop_size
        )));
    }
    let stride_y = input_size as f64 / map_h as f64;
    let stride_x = input_size as f64 / map_w as f64;
    let (row, col, wh, ww) = p.rect_feature;
    let center_y = (row as f64 + wh as f64 / 2.0) * stride_y;
    let center_x = (col as f64 + ww as f64 / 2.0) * stride_x;
    let half = spec.crop_size as f64 / 2.0;
    let max_top = (input_size - spec.crop_size) as f64;
    let top = (center_y - half).clamp(0.0, max_top).round() as usize;
    let left = (center_x - half).clamp(0.0, max_top).round() as usize;
    let mut out = p.clone();
    out.rect_image = Some((top, left, spec.crop_size));
    Ok(out)
}

/// Full selection pipeline over one fused map `(C, H, W)`: per scale, score
/// all windows, suppress overlaps, keep the best `count`, and map every
/// survivor to an image rectangle. When suppression leaves fewer than
/// `count`, the top survivor is repeated to fill the quota (logged).
pub fn select_patches<F: Elem>(
    fused: &ArrayView3<'_, F>,
    cfg: &PsmConfig,
) -> Result<Vec<PatchProposal>> {
    let (_, h, w) = fused.dim();
    cfg.validate(h, w)?;
    let a = activation_map(fused);
    select_patches_from_activation(&a, cfg)
}

/// Selection from a precomputed activation map (used by tests and oracles).
pub fn select_patches_from_activation(
    a: &Array2<f64>,
    cfg: &PsmConfig,
) -> Result<Vec<PatchProposal>> {
    let (h, w) = a.dim();
    cfg.validate(h, w)?;
    let mut out = Vec::with_capacity(cfg.total_count());
    for (tag, spec) in cfg.windows.iter().enumerate() {
        let proposals = score_windows(a, spec, tag)?;
        let (mut kept, shortfall) = nms_select(&proposals, spec.count, cfg.nms_iou, w)?;
        if shortfall {
            log::warn!(
                "nms kept {} of {} requested {}x{} windows; repeating the top proposal",
                kept.len(),
                spec.count,
                spec.height,
                spec.width
            );
            let top = kept[0].clone();
            while kept.len() < spec.count {
                kept.push(top.clone());
            }
        }
        for p in kept {
            out.push(map_to_image(&p, spec, h, w, cfg.input_size)?);
        }
    }
    Ok(out)
}

/// Seeded uniform window positions with suppression skipped; stands in for
/// the selection pipeline in the patch-selection ablation.
pub fn random_patches(
    map_h: usize,
    map_w: usize,
    cfg: &PsmConfig,
    rng: &mut impl Rng,
) -> Result<Vec<PatchProposal>> {
    cfg.validate(map_h, map_w)?;
    let mut out = Vec::with_capacity(cfg.total_count());
    for (tag, spec) in cfg.windows.iter().enumerate() {
        for _ in 0..spec.count {
            let row = rng.random_range(0..=map_h - spec.height);
            let col = rng.random_range(0..=map_w - spec.width);
            let p = PatchProposal {
                rect_feature: (row, col, spec.height, spec.width),
                score: 0.0,
                rect_image: None,
                scale_tag: tag,
            };
            out.push(map_to_image(&p, spec, map_h, map_w, cfg.input_size)?);
        }
    }
    Ok(out)
}

/// Extracts the mapped crops from the input image and resizes each to
/// `out_size`, preserving proposal order.
pub fn crop_patches(
    image: &ImageTensor,
    proposals: &[PatchProposal],
    out_size: usize,
) -> Result<Vec<ImageTensor>> {
    if proposals.is_empty() {
        return Err(Error::config("no patch proposals to crop"));
    }
    let (h, w, _) = image.pixels.dim();
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        let (top, left, size) = p
            .rect_image
            .ok_or_else(|| Error::config("proposal lacks an image rectangle"))?;
        if top + size > h || left + size > w {
            return Err(Error::config(format!(
                "crop ({top},{left}) size {size} exceeds {h}x{w} image"
            )));
        }
        let crop = image
            .pixels
            .slice(ndarray::s![top..top + size, left..left + size, ..])
            .to_owned();
        let resized = if size == out_size {
            crop
        } else {
            resize_bilinear(&crop, out_size, out_size)
        };
        out.push(ImageTensor::from_pixels(resized));
    }
    Ok(out)
}
