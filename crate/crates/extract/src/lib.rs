//! Embedding extraction with a pretrained ONNX feature network.
//!
//! The network takes one `1 × 3 × H × W` float image and must emit a single
//! 2048-value feature vector (any output shape whose non-unit axes multiply
//! to 2048, e.g. `[1, 2048]` or `[1, 2048, 1, 1]`). Image preprocessing is
//! read from a JSON sidecar stored beside the model:
//!
//! ```json
//! {"resize": [224, 224], "mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225], "channel_order": "rgb"}
//! ```
//!
//! Pixels are scaled to `[0, 1]`, then normalized per channel as
//! `(x - mean) / std`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use fcluster_core::ingest::{EmbeddingMatrix, Manifest};
use fcluster_core::{par, Matrix};
use image::imageops::FilterType;
use image::DynamicImage;
use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;

pub const FEATURE_DIM: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error(transparent)]
    Core(#[from] fcluster_core::Error),
    #[error("preprocessing config {path}: {message}")]
    Preprocessing { path: PathBuf, message: String },
    #[error("image for {image_id} not found at {path}")]
    MissingImage { image_id: String, path: PathBuf },
    #[error("cannot decode image for {image_id}: {source}")]
    Decode {
        image_id: String,
        #[source]
        source: image::ImageError,
    },
    #[error("model {path}: {message}")]
    Model { path: PathBuf, message: String },
    #[error("model output has shape {shape:?} ({features} values), expected {FEATURE_DIM}")]
    OutputShape { shape: Vec<usize>, features: usize },
}

pub type Result<T, E = ExtractError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessing {
    /// `[height, width]`.
    pub resize: [u32; 2],
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub channel_order: ChannelOrder,
}

impl Preprocessing {
    pub fn load(path: &Path) -> Result<Self> {
        let bad = |message: String| ExtractError::Preprocessing { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        p.validate().map_err(bad)?;
        Ok(p)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.resize.contains(&0) {
            return Err(format!("resize {:?} must be positive", self.resize));
        }
        if self.std.iter().any(|s| !s.is_finite() || *s == 0.0) {
            return Err(format!("std {:?} must be finite and non-zero", self.std));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(format!("mean {:?} must be finite", self.mean));
        }
        Ok(())
    }

    /// Decoded image to a `3 × H × W` planar buffer.
    pub fn apply(&self, img: &DynamicImage) -> Vec<f32> {
        let [h, w] = self.resize;
        let rgb = img.resize_exact(w, h, FilterType::Triangle).to_rgb8();
        let plane = (h * w) as usize;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                let src = match self.channel_order {
                    ChannelOrder::Rgb => c,
                    ChannelOrder::Bgr => 2 - c,
                };
                let x = px.0[src] as f32 / 255.0;
                out[c * plane + i] = (x - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// `model.onnx` → `model.preprocess.json`.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    let stem = model_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    model_path.with_file_name(format!("{stem}.preprocess.json"))
}

pub struct FeatureExtractor {
    plan: Arc<TypedSimplePlan>,
    preprocessing: Preprocessing,
    path: PathBuf,
}

impl FeatureExtractor {
    /// Loads the model with the sidecar found by [`sidecar_path`].
    pub fn open(model_path: &Path) -> Result<Self> {
        let prep = Preprocessing::load(&sidecar_path(model_path))?;
        Self::with_preprocessing(model_path, prep)
    }

    pub fn with_preprocessing(model_path: &Path, preprocessing: Preprocessing) -> Result<Self> {
        preprocessing.validate().map_err(|message| ExtractError::Preprocessing {
            path: sidecar_path(model_path),
            message,
        })?;
        let model_err = |e: TractError| ExtractError::Model {
            path: model_path.to_path_buf(),
            message: format!("{e:#}"),
        };
        let [h, w] = preprocessing.resize;
        let plan = tract_onnx::onnx()
            .model_for_path(model_path)
            .and_then(|m| m.with_input_fact(0, f32::fact([1, 3, h as usize, w as usize]).into()))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(model_err)?;
        Ok(Self { plan, preprocessing, path: model_path.to_path_buf() })
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    pub fn embed(&self, img: &DynamicImage) -> Result<Vec<f32>> {
        let [h, w] = self.preprocessing.resize;
        let input = Tensor::from_shape(&[1, 3, h as usize, w as usize], &self.preprocessing.apply(img))
            .map_err(|e| self.model_error(e))?;
        let outputs = self.plan.run(tvec!(input.into())).map_err(|e| self.model_error(e))?;
        let out = outputs
            .first()
            .ok_or_else(|| ExtractError::Model { path: self.path.clone(), message: "no outputs".into() })?;
        let shape = out.shape().to_vec();
        let features: usize = shape.iter().product();
        if features != FEATURE_DIM {
            return Err(ExtractError::OutputShape { shape, features });
        }
        let view = out.to_plain_array_view::<f32>().map_err(|e| self.model_error(e))?;
        Ok(view.iter().copied().collect())
    }

    fn model_error(&self, e: TractError) -> ExtractError {
        ExtractError::Model { path: self.path.clone(), message: format!("{e:#}") }
    }

    /// One row per manifest record, resolved as `image_root/file_path`.
    /// Images are processed in parallel; row `i` is always record `i`.
    pub fn extract(&self, manifest: &Manifest, image_root: &Path) -> Result<EmbeddingMatrix> {
        let records = manifest.records();
        let rows = par::map_range(records.len(), |i| {
            let rec = &records[i];
            let path = image_root.join(&rec.file_path);
            if !path.is_file() {
                return Err(ExtractError::MissingImage { image_id: rec.image_id.clone(), path });
            }
            let img = image::open(&path)
                .map_err(|source| ExtractError::Decode { image_id: rec.image_id.clone(), source })?;
            self.embed(&img)
        });
        let mut data = Vec::with_capacity(records.len() * FEATURE_DIM);
        for row in rows {
            data.extend(row?.into_iter().map(f64::from));
        }
        let values = Matrix::from_vec(records.len(), FEATURE_DIM, data)?;
        Ok(EmbeddingMatrix::new(manifest.image_ids(), values)?)
    }
}

/// Loads `model_path` with its sidecar and embeds every manifest image.
pub fn extract_embeddings(model_path: &Path, manifest: &Manifest, image_root: &Path) -> Result<EmbeddingMatrix> {
    FeatureExtractor::open(model_path)?.extract(manifest, image_root)
}
