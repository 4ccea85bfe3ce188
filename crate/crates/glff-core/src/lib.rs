//! Two-branch detector for AI-synthesized images.
//!
//! The model fuses multi-scale global features (shallow and deep backbone
//! taps combined per deep pixel with multi-head attention) with local
//! features from automatically selected informative patches, and classifies
//! the fused embedding as real or fake. Around the model, this crate ships
//! the training loop, a post-processing pipeline for building robustness
//! test sets (JPEG, blur, multi-image video compression, adversarial
//! perturbation, mixed chains) and an OA/AUC/ROC evaluation harness.

pub mod amsff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod df3;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod model;
pub mod image;
pub mod nn;
pub mod psm;
pub mod rng;
pub mod tensor;
pub mod training;

pub use config::{ModelConfig, Variant};
pub use error::{Error, Result};
pub use fusion::DetectionScore;
pub use image::ImageTensor;
pub use model::{Detector, Model};
