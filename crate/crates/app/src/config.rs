//! Pipeline configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! pca_dim = 256
//! k = 50
//!
//! [paths]
//! manifest = "data/manifest.csv"
//! embeddings = "data/embeddings.emb"
//! weather = "data/weather.csv"
//! output_dir = "out"
//!
//! [tsne]
//! perplexity = 30.0
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file. Every field is optional.

use std::path::{Path, PathBuf};

use fcluster_core::kmeans::KMeansConfig;
use fcluster_core::tsne::TsneConfig;
use fcluster_core::weather::{AddMode, AddOptions, SeriesZone};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    /// Precomputed embeddings; takes precedence over `model`.
    pub embeddings: Option<PathBuf>,
    /// ONNX feature network, with its `.preprocess.json` sidecar beside it.
    pub model: Option<PathBuf>,
    /// Root that manifest `file_path`s are relative to.
    pub image_root: Option<PathBuf>,
    pub weather: Option<PathBuf>,
    /// `donor_id,start_date` CSV; earliest photo per donor when absent.
    pub donor_starts: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            manifest: None,
            embeddings: None,
            model: None,
            image_root: None,
            weather: None,
            donor_starts: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansSettings {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        let d = KMeansConfig::default();
        KMeansSettings { restarts: d.restarts, max_iter: d.max_iter, tol: d.tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub pca_dim: usize,
    pub k: usize,
    /// Weight of the appended weather columns.
    pub alpha: f64,
    pub normalize: bool,
    /// Zone that bounds calendar days: `UTC`, `-04:00` or an IANA name.
    pub weather_zone: String,
    /// Sum daily averages instead of averaging them.
    pub cumulative: bool,
    pub skip_missing: bool,
    /// Drives both t-SNE and KMeans.
    pub seed: u64,
    pub tsne: TsneConfig,
    pub kmeans: KMeansSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            pca_dim: 256,
            k: 50,
            alpha: 1.0,
            normalize: true,
            weather_zone: "UTC".into(),
            cumulative: false,
            skip_missing: false,
            seed: 0,
            tsne: TsneConfig::default(),
            kmeans: KMeansSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bad = |message: String| AppError::Config { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative_to(base);
        }
        Ok(cfg)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.manifest,
            &mut p.embeddings,
            &mut p.model,
            &mut p.image_root,
            &mut p.weather,
            &mut p.donor_starts,
        ] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        if p.output_dir.is_relative() {
            p.output_dir = base.join(&p.output_dir);
        }
    }

    pub fn zone(&self) -> Result<SeriesZone> {
        self.weather_zone
            .parse()
            .map_err(|e: fcluster_core::Error| AppError::Usage(e.to_string()))
    }

    pub fn add_options(&self) -> AddOptions {
        AddOptions {
            mode: if self.cumulative { AddMode::Cumulative } else { AddMode::Mean },
            skip_missing: self.skip_missing,
        }
    }

    pub fn tsne_config(&self) -> TsneConfig {
        TsneConfig { seed: self.seed, ..self.tsne.clone() }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            seed: self.seed,
            restarts: self.kmeans.restarts,
            max_iter: self.kmeans.max_iter,
            tol: self.kmeans.tol,
        }
    }
}
