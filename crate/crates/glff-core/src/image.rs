//! Image loading, basic pixel-space operations and codec round trips.
//!
//! Pixels live as `H x W x 3` arrays of `f32` in `[0, 1]`. The detector's
//! per-channel mean/std normalization is part of the model forward pass, not
//! of this representation, so post-processing operations compose naturally.

use crate::error::{Error, Result};
use image::codecs::jpeg::JpegEncoder;
use image::{ImageReader, RgbImage};
use ndarray::Array3;
use std::io::Cursor;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ImageTensor {
    /// `H x W x 3`, values in `[0, 1]`.
    pub pixels: Array3<f32>,
    pub path: Option<PathBuf>,
    /// Dimensions before any resize, `(height, width)`.
    pub original_size: (usize, usize),
}

impl ImageTensor {
    pub fn from_pixels(pixels: Array3<f32>) -> Self {
        let (h, w, _) = pixels.dim();
        ImageTensor {
            pixels,
            path: None,
            original_size: (h, w),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::image(path, e))?
            .to_rgb8();
        let mut t = Self::from_rgb8(&img);
        t.path = Some(path.to_path_buf());
        Ok(t)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        });
        ImageTensor {
            pixels,
            path: None,
            original_size: (h as usize, w as usize),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w, _) = self.pixels.dim();
        let mut img = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize(self.pixels[[y, x, 0]]),
                    quantize(self.pixels[[y, x, 1]]),
                    quantize(self.pixels[[y, x, 2]]),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn all_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    /// Bilinear resize to `size x size` without preserving aspect ratio.
    pub fn resized(&self, size: usize) -> ImageTensor {
        if self.height() == size && self.width() == size {
            return self.clone();
        }
        let mut out = ImageTensor {
            pixels: resize_bilinear(&self.pixels, size, size),
            path: self.path.clone(),
            original_size: self.original_size,
        };
        out.original_size = self.original_size;
        out
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear interpolation with half-pixel centers.
pub fn resize_bilinear(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    let ry = h as f64 / out_h as f64;
    let rx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * ry - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * rx - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for ci in 0..c {
                let v00 = src[[y0, x0, ci]];
                let v01 = src[[y0, x1, ci]];
                let v10 = src[[y1, x0, ci]];
                let v11 = src[[y1, x1, ci]];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[[oy, ox, ci]] = top + (bot - top) * fy;
            }
        }
    }
    out
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Gaussian blur with kernel radius `ceil(3 * sigma)` and reflected borders.
/// `sigma = 0` is the identity.
pub fn gaussian_blur(src: &Array3<f32>, sigma: f64) -> Array3<f32> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for k in -radius..=radius {
        kernel.push((-((k * k) as f64) * inv).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    let (h, w, c) = src.dim();
    // Horizontal pass then vertical pass, f64 accumulation.
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = mirror(x as isize + ki as isize - radius, w);
                    acc += src[[y, sx, ci]] as f64 * kv;
                }
                tmp[[y, x, ci]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = mirror(y as isize + ki as isize - radius, h);
                    acc += tmp[[sy, x, ci]] * kv;
                }
                out[[y, x, ci]] = acc as f32;
            }
        }
    }
    out
}

/// Baseline-JPEG encode/decode round trip at the given quality (1..=100).
/// The image goes through 8-bit RGB on both sides, like a file on disk would.
pub fn jpeg_roundtrip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    let enc = JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality);
    rgb.write_with_encoder(enc)
        .map_err(|e| Error::image(img.path.clone().unwrap_or_default(), e))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| Error::image(img.path.clone().unwrap_or_default(), e))?
        .to_rgb8();
    let mut out = ImageTensor::from_rgb8(&decoded);
    out.path = img.path.clone();
    out.original_size = img.original_size;
    Ok(out)
}

/// Binary PPM (P6, maxval 255) writer; the frame format exchanged with the
/// external video encoder.
pub fn write_ppm(img: &ImageTensor, path: &Path) -> Result<()> {
    use std::io::Write;
    let (h, w, _) = img.pixels.dim();
    let mut buf = Vec::with_capacity(h * w * 3 + 32);
    buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(quantize(img.pixels[[y, x, c]]));
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Binary PPM (P6) reader.
pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&data[start..pos]).unwrap_or("").to_string());
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::image(path, "not a maxval-255 P6 ppm"));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::image(path, "bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| Error::image(path, "bad height"))?;
    pos += 1; // single whitespace after maxval
    if data.len() < pos + h * w * 3 {
        return Err(Error::image(path, "truncated ppm payload"));
    }
    let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        data[pos + (y * w + x) * 3 + c] as f32 / 255.0
    });
    let mut img = ImageTensor::from_pixels(pixels);
    img.path = Some(path.to_path_buf());
    Ok(img)
}

/// Peak signal-to-noise ratio in dB between two same-shape images.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Variance of the Laplacian response, a standard sharpness measure.
pub fn laplacian_variance(img: &Array3<f32>) -> f64 {
    let (h, w, _) = img.dim();
    let gray = |y: usize, x: usize| -> f64 {
        (img[[y, x, 0]] + img[[y, x, 1]] + img[[y, x, 2]]) as f64 / 3.0
    };
    let mut vals = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = gray(y - 1, x) + gray(y + 1, x) + gray(y, x - 1) + gray(y, x + 1)
                - 4.0 * gray(y, x);
            vals.push(lap);
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64
}
