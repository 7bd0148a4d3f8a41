//! Synthetic on-disk datasets for driving the binary and the library.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::{Duration, TimeZone, Utc};
use fcluster_core::ingest::{save_embeddings, EmbeddingMatrix};
use fcluster_core::Matrix;

pub fn image_id(i: usize) -> String {
    format!("img_{i:04}")
}

/// Writes `manifest.csv`, `embeddings.emb`, `weather.csv`, a stand-in file
/// per image under `images/` and `pipeline.toml`. Returns the config path.
pub fn write_dataset(dir: &Path, features: &Matrix, k: usize, seed: u64, extra_toml: &str) -> PathBuf {
    let n = features.rows();
    let ids: Vec<String> = (0..n).map(image_id).collect();
    let base = Utc.with_ymd_and_hms(2015, 6, 1, 12, 0, 0).unwrap();

    let mut manifest = String::from("image_id,file_path,donor_id,taken_at\n");
    std::fs::create_dir_all(dir.join("images")).unwrap();
    for (i, id) in ids.iter().enumerate() {
        let at = base + Duration::days((i % 20) as i64);
        manifest.push_str(&format!("{id},images/{id}.png,d{},{}\n", i % 3, at.to_rfc3339()));
        std::fs::write(dir.join(format!("images/{id}.png")), format!("png-bytes-{i}")).unwrap();
    }
    std::fs::write(dir.join("manifest.csv"), manifest).unwrap();

    let emb = EmbeddingMatrix::new(ids, features.clone()).unwrap();
    save_embeddings(dir.join("embeddings.emb"), &emb).unwrap();

    let mut weather = String::from("observed_at,temperature_c,relative_humidity_pct,wind_speed_mps\n");
    let start = Utc.with_ymd_and_hms(2015, 6, 1, 0, 0, 0).unwrap();
    for h in 0..24 * 22 {
        let t = h as f64;
        weather.push_str(&format!(
            "{},{:.2},{:.1},{:.2}\n",
            (start + Duration::hours(h)).to_rfc3339(),
            18.0 + 6.0 * (t / 24.0 * std::f64::consts::TAU).sin() + 0.01 * t,
            60.0 + 20.0 * (t / 37.0).cos(),
            3.0 + 2.0 * (t / 11.0).sin().abs(),
        ));
    }
    std::fs::write(dir.join("weather.csv"), weather).unwrap();

    let config = dir.join("pipeline.toml");
    std::fs::write(
        &config,
        format!(
            "seed = {seed}\nk = {k}\n{extra_toml}\n\n[paths]\nmanifest = \"manifest.csv\"\nembeddings = \"embeddings.emb\"\nweather = \"weather.csv\"\noutput_dir = \"out\"\n"
        ),
    )
    .unwrap();
    config
}

pub fn fcluster(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcluster"))
        .args(args)
        .output()
        .expect("spawn fcluster")
}
