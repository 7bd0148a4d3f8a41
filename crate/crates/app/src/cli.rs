use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fcluster_core::eval::Assignments;
use fcluster_core::ingest::{load_embeddings, load_manifest, save_embeddings};
use fcluster_core::kmeans::save_model;
use fcluster_core::tsne::{export_kl_trace, export_scatter};
use fcluster_core::weather::WeatherBlock;

use crate::config::PipelineConfig;
use crate::error::{AppError, Result, Stage, StageExt};
use crate::pipeline::{self, RunArtifacts, ARTIFACTS_FILE};
use crate::report;
use crate::server::{self, ServeOptions};

#[derive(Debug, Parser)]
#[command(name = "fcluster", version, about = "Cluster forensic image collections and review the clusters")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the manifest and write the embedding matrix, extracting it if needed.
    Ingest(StageIo),
    /// Compute the per-image ADD block.
    Weather(StageIo),
    /// PCA-reduce the embeddings.
    Reduce {
        #[command(flatten)]
        io: StageIo,
        /// Target dimension; defaults to the configured `pca_dim`.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Append the weather block to the reduced features.
    Augment {
        #[command(flatten)]
        io: StageIo,
        /// Weather block CSV.
        #[arg(long)]
        weather_block: Option<PathBuf>,
    },
    /// Project features to 2D and write the scatter and KL trace.
    Tsne {
        #[command(flatten)]
        io: StageIo,
        /// Assignments used to tag scatter points.
        #[arg(long)]
        assignments: Option<PathBuf>,
    },
    /// Run KMeans and write the model and assignments.
    Cluster {
        #[command(flatten)]
        io: StageIo,
        /// Number of clusters; defaults to the configured `k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run every stage and write all artifacts to the output directory.
    Run,
    /// Print per-cluster precision for a review session.
    Evaluate {
        #[arg(long)]
        assignments: Option<PathBuf>,
        #[arg(long)]
        session: Option<PathBuf>,
    },
    /// Serve the review API and UI.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct StageIo {
    /// Input file; defaults to the previous stage's artifact.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output file; defaults to the standard artifact path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// `artifacts.json` written by `run`.
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
    /// Session file; created when missing.
    #[arg(long)]
    pub session: Option<PathBuf>,
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Directory holding the review UI.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

impl Cli {
    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(m) = &self.manifest {
            cfg.paths.manifest = Some(m.clone());
        }
        if let Some(o) = &self.output_dir {
            cfg.paths.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

pub fn main_with(cli: Cli) -> Result<()> {
    let cfg = cli.pipeline_config()?;
    let std_paths = RunArtifacts::in_dir(
        &cfg.paths.output_dir,
        cfg.paths.manifest.clone().unwrap_or_default(),
        cfg.paths.image_root.clone(),
    );
    let embeddings_out = cfg.paths.output_dir.join("embeddings.emb");
    match cli.command {
        Command::Ingest(io) => {
            let mut cfg = cfg;
            if io.input.is_some() {
                cfg.paths.embeddings = io.input;
            }
            let (_, emb) = pipeline::ingest(&cfg)?;
            let out = io.out.unwrap_or(embeddings_out);
            ensure_parent(&out)?;
            save_embeddings(&out, &emb).stage(Stage::Ingest)?;
            println!("{} x {} -> {}", emb.n_rows(), emb.n_cols(), out.display());
        }
        Command::Weather(io) => {
            let mut cfg = cfg;
            if io.input.is_some() {
                cfg.paths.weather = io.input;
            }
            let manifest = manifest(&cfg, Stage::Weather)?;
            let block = pipeline::weather(&cfg, &manifest)?;
            let out = io.out.unwrap_or(std_paths.weather);
            ensure_parent(&out)?;
            block.write_csv(&out).stage(Stage::Weather)?;
            println!("{} rows -> {}", block.row_ids.len(), out.display());
        }
        Command::Reduce { io, dim } => {
            let manifest = manifest(&cfg, Stage::Pca)?;
            let input = io.input.or(cfg.paths.embeddings.clone()).unwrap_or(embeddings_out);
            let raw = load_embeddings(&input, &manifest).stage(Stage::Pca)?;
            let reduced = pipeline::reduce(&raw, dim.unwrap_or(cfg.pca_dim))?;
            let out = io.out.unwrap_or(std_paths.reduced);
            ensure_parent(&out)?;
            save_embeddings(&out, &reduced).stage(Stage::Pca)?;
            println!("{} -> {} dims -> {}", raw.n_cols(), reduced.n_cols(), out.display());
        }
        Command::Augment { io, weather_block } => {
            let manifest = manifest(&cfg, Stage::Weather)?;
            let reduced = load_embeddings(io.input.unwrap_or(std_paths.reduced), &manifest).stage(Stage::Weather)?;
            let block = WeatherBlock::read_csv(weather_block.unwrap_or(std_paths.weather), &manifest)
                .stage(Stage::Weather)?;
            let aug = pipeline::augment(&reduced, &block, cfg.alpha, cfg.normalize)?;
            let out = io.out.unwrap_or(std_paths.augmented);
            ensure_parent(&out)?;
            save_embeddings(&out, &aug.combined).stage(Stage::Weather)?;
            let scaling = out.with_file_name("scaling.json");
            let text = serde_json::to_string_pretty(&aug.scaling).expect("plain struct");
            std::fs::write(&scaling, text + "\n").stage(Stage::Weather)?;
            println!("{} dims -> {}", aug.width(), out.display());
        }
        Command::Tsne { io, assignments } => {
            let manifest = manifest(&cfg, Stage::Tsne)?;
            let features = load_embeddings(io.input.unwrap_or(std_paths.augmented), &manifest).stage(Stage::Tsne)?;
            let tsne_cfg = cfg.tsne_config();
            let embedding = pipeline::embed(&features, &tsne_cfg)?;
            let tags = match assignments {
                Some(p) => {
                    let a = Assignments::load(&p).stage(Stage::Tsne)?;
                    if a.image_ids != features.row_ids {
                        return Err(crate::error::stage_error(
                            Stage::Tsne,
                            format!("{} does not follow the manifest order", p.display()),
                        ));
                    }
                    Some(a.clusters)
                }
                None => None,
            };
            let out = io.out.unwrap_or(std_paths.scatter);
            ensure_parent(&out)?;
            export_scatter(&out, &embedding, &features.row_ids, tags.as_deref()).stage(Stage::Tsne)?;
            let trace = out.with_file_name("kl_trace.csv");
            export_kl_trace(&trace, &embedding, tsne_cfg.early_exaggeration_iters).stage(Stage::Tsne)?;
            if let Some(kl) = embedding.kl_trace.last() {
                println!("final KL {kl:.6}");
            }
            println!("scatter -> {}", out.display());
        }
        Command::Cluster { io, k } => {
            let mut cfg = cfg;
            if let Some(k) = k {
                cfg.k = k;
            }
            let manifest = manifest(&cfg, Stage::KMeans)?;
            let features = load_embeddings(io.input.unwrap_or(std_paths.augmented), &manifest).stage(Stage::KMeans)?;
            let model = pipeline::cluster(&features, &cfg)?;
            let out = io.out.unwrap_or(std_paths.assignments);
            ensure_parent(&out)?;
            save_model(out.with_file_name("kmeans.model"), &model).stage(Stage::KMeans)?;
            Assignments::new(features.row_ids.clone(), model.assignments.clone())
                .and_then(|a| a.save(&out))
                .stage(Stage::KMeans)?;
            println!("k = {}, inertia {:.6} -> {}", model.k, model.inertia, out.display());
        }
        Command::Run => {
            let summary = pipeline::run(&cfg)?;
            println!("{summary}");
        }
        Command::Evaluate { assignments, session } => {
            let a = assignments.unwrap_or(std_paths.assignments);
            let s = session.unwrap_or(std_paths.session);
            print!("{}", report::evaluate(&a, &s)?);
        }
        Command::Serve(args) => {
            let opts = serve_options(&cfg, args)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| AppError::Server(e.to_string()))?;
            runtime.block_on(server::serve(opts))?;
        }
    }
    Ok(())
}

fn manifest(cfg: &PipelineConfig, stage: Stage) -> Result<fcluster_core::ingest::Manifest> {
    let path = cfg
        .paths
        .manifest
        .as_ref()
        .ok_or_else(|| crate::error::stage_error(stage, "no manifest configured"))?;
    load_manifest(path).stage(stage)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir)
            .map_err(|e| AppError::Usage(format!("cannot create {}: {e}", dir.display()))),
        _ => Ok(()),
    }
}

fn serve_options(cfg: &PipelineConfig, args: ServeArgs) -> Result<ServeOptions> {
    let addr = SocketAddr::new(args.host, args.port);
    let artifacts_path = args.artifacts.unwrap_or_else(|| cfg.paths.output_dir.join(ARTIFACTS_FILE));
    let mut opts = if artifacts_path.exists() {
        ServeOptions::from_artifacts(&RunArtifacts::load(&artifacts_path)?, addr)
    } else {
        let std_paths = RunArtifacts::in_dir(&cfg.paths.output_dir, PathBuf::new(), cfg.paths.image_root.clone());
        ServeOptions {
            assignments: std_paths.assignments,
            session: std_paths.session,
            manifest: cfg.paths.manifest.clone(),
            image_root: cfg.paths.image_root.clone(),
            scatter: Some(std_paths.scatter).filter(|p| p.exists()),
            static_dir: None,
            addr,
        }
    };
    if let Some(a) = args.assignments {
        opts.assignments = a;
    }
    if let Some(s) = args.session {
        opts.session = s;
    }
    if args.image_root.is_some() {
        opts.image_root = args.image_root;
    }
    opts.static_dir = args.static_dir;
    Ok(opts)
}
