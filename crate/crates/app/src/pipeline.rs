//! Stage functions and the end-to-end `run`.
//!
//! Every stage hands the next one values rounded through `f32`, the
//! on-disk precision, so running the stages one by one from their files
//! gives the same result as a single `run`.

use std::path::{Path, PathBuf};

use fcluster_core::eval::{Assignments, EvaluationSession};
use fcluster_core::ingest::{load_embeddings, load_manifest, save_embeddings, EmbeddingMatrix, Manifest};
use fcluster_core::kmeans::{kmeans_fit, save_model, ClusterModel};
use fcluster_core::pca::fit_pca_completed;
use fcluster_core::tsne::{export_kl_trace, export_scatter, run_tsne, Embedding2D, TsneConfig};
use fcluster_core::weather::{
    augment_features, build_weather_block, load_donor_starts, load_weather, AugmentedMatrix,
    StartPolicy, WeatherBlock,
};
use fcluster_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{stage_error, AppError, Result, Stage, StageExt};

/// Files written by [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub manifest: PathBuf,
    pub image_root: Option<PathBuf>,
    /// Present when the embeddings were extracted during the run.
    pub embeddings: Option<PathBuf>,
    pub weather: PathBuf,
    pub reduced: PathBuf,
    pub augmented: PathBuf,
    pub scaling: PathBuf,
    pub scatter: PathBuf,
    pub kl_trace: PathBuf,
    pub model: PathBuf,
    pub assignments: PathBuf,
    pub session: PathBuf,
}

pub const ARTIFACTS_FILE: &str = "artifacts.json";

impl RunArtifacts {
    pub fn in_dir(out: &Path, manifest: PathBuf, image_root: Option<PathBuf>) -> Self {
        RunArtifacts {
            manifest,
            image_root,
            embeddings: None,
            weather: out.join("weather.csv"),
            reduced: out.join("reduced.emb"),
            augmented: out.join("augmented.emb"),
            scaling: out.join("scaling.json"),
            scatter: out.join("scatter.csv"),
            kl_trace: out.join("kl_trace.csv"),
            model: out.join("kmeans.model"),
            assignments: out.join("assignments.csv"),
            session: out.join("session.json"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |message: String| AppError::Config { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain struct");
        std::fs::write(path, text + "\n")
            .map_err(|e| AppError::Usage(format!("cannot write {}: {e}", path.display())))
    }
}

/// What [`run`] prints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub n: usize,
    pub raw_dim: usize,
    pub reduced_dim: usize,
    pub augmented_dim: usize,
    pub k: usize,
    pub inertia: f64,
    pub final_kl: Option<f64>,
    pub artifacts: RunArtifacts,
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "images:      {}", self.n)?;
        writeln!(f, "dimensions:  {} -> {} -> {}", self.raw_dim, self.reduced_dim, self.augmented_dim)?;
        writeln!(f, "clusters:    {}", self.k)?;
        writeln!(f, "inertia:     {:.6}", self.inertia)?;
        if let Some(kl) = self.final_kl {
            writeln!(f, "final KL:    {kl:.6}")?;
        }
        write!(f, "assignments: {}", self.artifacts.assignments.display())
    }
}

fn required<'a>(path: &'a Option<PathBuf>, stage: Stage, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| stage_error(stage, format!("no {what} configured")))
}

fn rounded(mut values: Matrix) -> Matrix {
    values.round_to_f32();
    values
}

pub fn ingest(cfg: &PipelineConfig) -> Result<(Manifest, EmbeddingMatrix)> {
    let manifest = load_manifest(required(&cfg.paths.manifest, Stage::Ingest, "manifest")?)
        .stage(Stage::Ingest)?;
    let embeddings = if let Some(path) = &cfg.paths.embeddings {
        load_embeddings(path, &manifest).stage(Stage::Ingest)?
    } else if let Some(model) = &cfg.paths.model {
        let root = cfg
            .paths
            .image_root
            .clone()
            .or_else(|| manifest.source_path().parent().map(Path::to_path_buf))
            .unwrap_or_default();
        fcluster_extract::extract_embeddings(model, &manifest, &root).stage(Stage::Ingest)?
    } else {
        return Err(stage_error(Stage::Ingest, "neither embeddings nor a model is configured"));
    };
    Ok((manifest, embeddings))
}

pub fn weather(cfg: &PipelineConfig, manifest: &Manifest) -> Result<WeatherBlock> {
    let path = required(&cfg.paths.weather, Stage::Weather, "weather file")?;
    let zone = cfg.zone().stage(Stage::Weather)?;
    let series = load_weather(path, zone).stage(Stage::Weather)?;
    let policy = match &cfg.paths.donor_starts {
        Some(p) => StartPolicy::Explicit(load_donor_starts(p).stage(Stage::Weather)?),
        None => StartPolicy::EarliestPhoto,
    };
    build_weather_block(manifest, &series, &policy, cfg.add_options()).stage(Stage::Weather)
}

pub fn reduce(raw: &EmbeddingMatrix, dim: usize) -> Result<EmbeddingMatrix> {
    let model = fit_pca_completed(&raw.values, dim).stage(Stage::Pca)?;
    let reduced = model.transform(&raw.values).stage(Stage::Pca)?;
    EmbeddingMatrix::new(raw.row_ids.clone(), rounded(reduced)).stage(Stage::Pca)
}

pub fn augment(reduced: &EmbeddingMatrix, block: &WeatherBlock, alpha: f64, normalize: bool) -> Result<AugmentedMatrix> {
    if block.row_ids != reduced.row_ids {
        return Err(stage_error(Stage::Weather, "weather block rows do not match the reduced matrix"));
    }
    let mut aug = augment_features(reduced, &block.to_matrix(), alpha, normalize).stage(Stage::Weather)?;
    aug.combined.values.round_to_f32();
    Ok(aug)
}

pub fn embed(features: &EmbeddingMatrix, config: &TsneConfig) -> Result<Embedding2D> {
    run_tsne(&features.values, config).stage(Stage::Tsne)
}

pub fn cluster(features: &EmbeddingMatrix, cfg: &PipelineConfig) -> Result<ClusterModel> {
    kmeans_fit(&features.values, &cfg.kmeans_config()).stage(Stage::KMeans)
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: Stage) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").stage(stage)
}

/// ingest → weather → PCA → augment → t-SNE → KMeans, persisting each
/// intermediate under `cfg.paths.output_dir`.
pub fn run(cfg: &PipelineConfig) -> Result<RunSummary> {
    let out = &cfg.paths.output_dir;
    std::fs::create_dir_all(out)
        .map_err(|e| AppError::Usage(format!("cannot create {}: {e}", out.display())))?;
    let manifest_path = required(&cfg.paths.manifest, Stage::Ingest, "manifest")?.to_path_buf();
    let mut artifacts = RunArtifacts::in_dir(out, manifest_path, cfg.paths.image_root.clone());

    let (manifest, raw) = ingest(cfg)?;
    if cfg.paths.embeddings.is_none() {
        let path = out.join("embeddings.emb");
        save_embeddings(&path, &raw).stage(Stage::Ingest)?;
        artifacts.embeddings = Some(path);
    }

    let block = weather(cfg, &manifest)?;
    block.write_csv(&artifacts.weather).stage(Stage::Weather)?;

    let reduced = reduce(&raw, cfg.pca_dim)?;
    save_embeddings(&artifacts.reduced, &reduced).stage(Stage::Pca)?;

    let aug = augment(&reduced, &block, cfg.alpha, cfg.normalize)?;
    save_embeddings(&artifacts.augmented, &aug.combined).stage(Stage::Weather)?;
    write_json(&artifacts.scaling, &aug.scaling, Stage::Weather)?;

    let tsne_cfg = cfg.tsne_config();
    let embedding = embed(&aug.combined, &tsne_cfg)?;

    let model = cluster(&aug.combined, cfg)?;
    save_model(&artifacts.model, &model).stage(Stage::KMeans)?;
    let assignments = Assignments::new(manifest.image_ids(), model.assignments.clone()).stage(Stage::KMeans)?;
    assignments.save(&artifacts.assignments).stage(Stage::KMeans)?;

    export_scatter(&artifacts.scatter, &embedding, &manifest.image_ids(), Some(&model.assignments))
        .stage(Stage::Tsne)?;
    export_kl_trace(&artifacts.kl_trace, &embedding, tsne_cfg.early_exaggeration_iters).stage(Stage::Tsne)?;

    ensure_session(&artifacts.session, &artifacts.assignments, &assignments)?;
    artifacts.save(&out.join(ARTIFACTS_FILE))?;

    Ok(RunSummary {
        n: manifest.len(),
        raw_dim: raw.n_cols(),
        reduced_dim: reduced.n_cols(),
        augmented_dim: aug.width(),
        k: model.k,
        inertia: model.inertia,
        final_kl: embedding.kl_trace.last().copied(),
        artifacts,
    })
}

/// Keeps an existing session that still fits the assignments; otherwise
/// starts a new one.
fn ensure_session(path: &Path, assignments_path: &Path, assignments: &Assignments) -> Result<()> {
    if path.exists() {
        match EvaluationSession::load(path).and_then(|s| s.validate(assignments)) {
            Ok(()) => return Ok(()),
            Err(e) => eprintln!("replacing session {}: {e}", path.display()),
        }
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    EvaluationSession::new(id, assignments_path.to_string_lossy())
        .save_atomic(path)
        .stage(Stage::Evaluate)
}
