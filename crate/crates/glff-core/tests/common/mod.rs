//! Shared fixtures for integration tests: the checked-in toy dataset and a
//! mock external video encoder (the sandboxed CI image has no ffmpeg; the
//! encoder contract is exercised through a stand-in that honors the same
//! command line).

#![allow(dead_code)]

use glff_core::image::ImageTensor;
use glff_core::rng;
use ndarray::Array3;
use rand::Rng;
use std::path::{Path, PathBuf};
use std::process::Command;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn toy_real_dir() -> PathBuf {
    data_dir().join("toy/real")
}

pub fn toy_fake_dir() -> PathBuf {
    data_dir().join("toy/fake")
}

pub fn texture_image_path() -> PathBuf {
    data_dir().join("texture.png")
}

/// Procedural "real" image: smooth low-frequency shading only.
pub fn synth_real(idx: u64, size: usize) -> ImageTensor {
    let mut r = rng::stream(0xD47A, "toy-real", &[idx]);
    let fx: f64 = r.random_range(0.5..2.0);
    let fy: f64 = r.random_range(0.5..2.0);
    let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let tint: [f64; 3] = [
        r.random_range(0.3..0.7),
        r.random_range(0.3..0.7),
        r.random_range(0.3..0.7),
    ];
    ImageTensor::from_pixels(Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let u = x as f64 / size as f64;
        let v = y as f64 / size as f64;
        let wave = ((u * fx + v * fy) * std::f64::consts::TAU + phase).sin() * 0.18;
        ((tint[c] + wave + 0.12 * (u - v)).clamp(0.02, 0.98)) as f32
    }))
}

/// Procedural "fake" image: the same smooth shading plus pixel-grid
/// artifacts (checkerboard modulation and speckle), the kind of
/// high-frequency residue synthesis pipelines leave behind.
pub fn synth_fake(idx: u64, size: usize) -> ImageTensor {
    let base = synth_real(idx + 1000, size);
    let mut r = rng::stream(0xD47A, "toy-fake", &[idx]);
    let amp: f64 = r.random_range(0.10..0.20);
    let mut pixels = base.pixels.clone();
    for y in 0..size {
        for x in 0..size {
            let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            let speckle: f64 = r.random_range(-0.05..0.05);
            for c in 0..3 {
                let v = pixels[[y, x, c]] as f64 + amp * checker + speckle;
                pixels[[y, x, c]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::from_pixels(pixels)
}

/// Regenerates the checked-in toy dataset (16 real + 16 fake, 96x96) and
/// the textured df3 test image. Invoked by the ignored `regenerate` test.
pub fn write_toy_dataset() -> std::io::Result<()> {
    let real = toy_real_dir();
    let fake = toy_fake_dir();
    std::fs::create_dir_all(&real)?;
    std::fs::create_dir_all(&fake)?;
    for i in 0..16u64 {
        synth_real(i, 96)
            .save_png(&real.join(format!("real_{i:02}.png")))
            .map_err(std::io::Error::other)?;
        synth_fake(i, 96)
            .save_png(&fake.join(format!("fake_{i:02}.png")))
            .map_err(std::io::Error::other)?;
    }
    synth_fake(777, 96)
        .save_png(&texture_image_path())
        .map_err(std::io::Error::other)?;
    Ok(())
}

const MOCK_ENCODER_SRC: &str = include_str!("mock_encoder_src.rs");

/// Builds (once) a small stand-in encoder that accepts the ffmpeg-style
/// invocation the pipeline emits and applies a deterministic lossy
/// transform. Returns the binary path.
pub fn ensure_mock_encoder() -> PathBuf {
    let out_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/mock-encoder");
    std::fs::create_dir_all(&out_dir).expect("create mock encoder dir");
    let bin = out_dir.join("mock-encoder");
    if bin.is_file() {
        return bin;
    }
    let src = out_dir.join(format!("mock_encoder_{}.rs", std::process::id()));
    std::fs::write(&src, MOCK_ENCODER_SRC).expect("write mock encoder source");
    let tmp_bin = out_dir.join(format!("mock-encoder-{}", std::process::id()));
    let status = Command::new("rustc")
        .args([
            "-O",
            "--edition",
            "2021",
            src.to_str().unwrap(),
            "-o",
            tmp_bin.to_str().unwrap(),
        ])
        .status()
        .expect("rustc available");
    assert!(status.success(), "mock encoder failed to compile");
    // atomic publish; racing test binaries converge on the same file
    match std::fs::rename(&tmp_bin, &bin) {
        Ok(()) => {}
        Err(_) if bin.is_file() => {}
        Err(e) => panic!("failed to publish mock encoder: {e}"),
    }
    let _ = std::fs::remove_file(&src);
    bin
}
