//! Human review bookkeeping: miss-clustered marks, cluster labels, merges
//! and precision.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::check_header;

pub const ASSIGNMENTS_HEADER: [&str; 2] = ["image_id", "cluster"];

/// Cluster index per image, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignments {
    pub image_ids: Vec<String>,
    pub clusters: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct AssignmentRow {
    image_id: String,
    cluster: u32,
}

impl Assignments {
    pub fn new(image_ids: Vec<String>, clusters: Vec<u32>) -> Result<Self> {
        if image_ids.len() != clusters.len() {
            return Err(Error::RowCountMismatch {
                expected: image_ids.len(),
                found: clusters.len(),
            });
        }
        let mut seen = HashSet::with_capacity(image_ids.len());
        if let Some(dup) = image_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Session(format!("duplicate image_id {dup:?} in assignments")));
        }
        Ok(Assignments {
            image_ids,
            clusters,
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn cluster_ids(&self) -> BTreeSet<u32> {
        self.clusters.iter().copied().collect()
    }

    pub fn cluster_of(&self, image_id: &str) -> Option<u32> {
        self.image_ids
            .iter()
            .position(|id| id == image_id)
            .map(|i| self.clusters[i])
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.image_ids.iter().any(|id| id == image_id)
    }

    /// Image ids of `cluster`, in row order.
    pub fn members(&self, cluster: u32) -> Vec<&str> {
        self.image_ids
            .iter()
            .zip(&self.clusters)
            .filter(|(_, &c)| c == cluster)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn sizes(&self) -> BTreeMap<u32, usize> {
        let mut sizes = BTreeMap::new();
        for &c in &self.clusters {
            *sizes.entry(c).or_insert(0) += 1;
        }
        sizes
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let path = Path::new("<assignments>");
        let mut w = csv::Writer::from_writer(out);
        for (id, &c) in self.image_ids.iter().zip(&self.clusters) {
            w.serialize(AssignmentRow {
                image_id: id.clone(),
                cluster: c,
            })
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        check_header(path, &header, &ASSIGNMENTS_HEADER)?;
        let mut ids = Vec::new();
        let mut clusters = Vec::new();
        for row in reader.deserialize::<AssignmentRow>() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            ids.push(row.image_id);
            clusters.push(row.cluster);
        }
        if ids.is_empty() {
            return Err(Error::Empty { path: path.into() });
        }
        Assignments::new(ids, clusters)
    }
}

/// Maps every assignment through `merge_map`.
pub fn apply_merge(assignments: &[u32], merge_map: &BTreeMap<u32, u32>) -> Result<Vec<u32>> {
    assignments
        .iter()
        .map(|c| merge_map.get(c).copied().ok_or(Error::MergeMissing(*c)))
        .collect()
}

/// Relabels merge targets to `0..G` preserving their relative order.
pub fn normalize_merge_map(merge_map: &BTreeMap<u32, u32>) -> BTreeMap<u32, u32> {
    let targets: BTreeSet<u32> = merge_map.values().copied().collect();
    let rank: HashMap<u32, u32> = targets
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, i as u32))
        .collect();
    merge_map.iter().map(|(&s, t)| (s, rank[t])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterPrecision {
    pub total: usize,
    pub missed: usize,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub per_cluster: BTreeMap<u32, ClusterPrecision>,
    /// Unweighted mean over non-empty clusters.
    pub macro_precision: f64,
    /// `(Σtotal − Σmissed) / Σtotal`.
    pub micro_precision: f64,
}

/// Precision of each group in `groups` (aligned with `image_ids`), counting
/// every marked image as a miss for its group.
pub fn compute_precision(
    image_ids: &[String],
    groups: &[u32],
    marks: &[String],
) -> Result<PrecisionReport> {
    if image_ids.len() != groups.len() {
        return Err(Error::RowCountMismatch {
            expected: image_ids.len(),
            found: groups.len(),
        });
    }
    let index: HashMap<&str, u32> = image_ids
        .iter()
        .map(String::as_str)
        .zip(groups.iter().copied())
        .collect();
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for &g in groups {
        counts.entry(g).or_default().0 += 1;
    }
    let mut seen = HashSet::new();
    for m in marks {
        let g = index
            .get(m.as_str())
            .ok_or_else(|| Error::UnknownImage(m.clone()))?;
        if seen.insert(m.as_str()) {
            counts.get_mut(g).expect("group counted").1 += 1;
        }
    }

    let per_cluster: BTreeMap<u32, ClusterPrecision> = counts
        .into_iter()
        .map(|(g, (total, missed))| {
            (
                g,
                ClusterPrecision {
                    total,
                    missed,
                    precision: (total - missed) as f64 / total as f64,
                },
            )
        })
        .collect();
    let total: usize = per_cluster.values().map(|c| c.total).sum();
    let missed: usize = per_cluster.values().map(|c| c.missed).sum();
    let (macro_precision, micro_precision) = if total == 0 {
        (1.0, 1.0)
    } else {
        let macro_sum: f64 = per_cluster.values().map(|c| c.precision).sum();
        (
            macro_sum / per_cluster.len() as f64,
            (total - missed) as f64 / total as f64,
        )
    };
    Ok(PrecisionReport {
        per_cluster,
        macro_precision,
        micro_precision,
    })
}

/// One evaluator's review of an assignments file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSession {
    pub session_id: String,
    pub assignments_ref: String,
    /// Marked image ids in click order, without duplicates.
    pub marks: Vec<String>,
    pub labels: BTreeMap<u32, String>,
    pub merge_map: BTreeMap<u32, u32>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl EvaluationSession {
    pub fn new(session_id: impl Into<String>, assignments_ref: impl Into<String>) -> Self {
        let now = Utc::now();
        EvaluationSession {
            session_id: session_id.into(),
            assignments_ref: assignments_ref.into(),
            marks: Vec::new(),
            labels: BTreeMap::new(),
            merge_map: BTreeMap::new(),
            created_at: now,
            updated_at: now,
        }
    }

    fn touch(&mut self) {
        self.updated_at = Utc::now();
    }

    /// Checks the session against `assignments`.
    pub fn validate(&self, assignments: &Assignments) -> Result<()> {
        let mut seen = HashSet::new();
        for m in &self.marks {
            if !assignments.contains(m) {
                return Err(Error::UnknownImage(m.clone()));
            }
            if !seen.insert(m) {
                return Err(Error::Session(format!("image {m:?} is marked twice")));
            }
        }
        let clusters = assignments.cluster_ids();
        if let Some(c) = self.labels.keys().find(|c| !clusters.contains(c)) {
            return Err(Error::UnknownCluster(*c));
        }
        if !self.merge_map.is_empty() {
            check_merge_map(&self.merge_map, &clusters)?;
        }
        Ok(())
    }

    /// Marks `image_id` as miss-clustered. Returns `false` if it was
    /// already marked (its position is kept).
    pub fn add_mark(&mut self, assignments: &Assignments, image_id: &str) -> Result<bool> {
        if !assignments.contains(image_id) {
            return Err(Error::UnknownImage(image_id.to_string()));
        }
        if self.marks.iter().any(|m| m == image_id) {
            return Ok(false);
        }
        self.marks.push(image_id.to_string());
        self.touch();
        Ok(true)
    }

    /// Removes a mark; a no-op when the image is not marked.
    pub fn remove_mark(&mut self, image_id: &str) -> bool {
        let before = self.marks.len();
        self.marks.retain(|m| m != image_id);
        let removed = self.marks.len() != before;
        if removed {
            self.touch();
        }
        removed
    }

    pub fn set_label(
        &mut self,
        assignments: &Assignments,
        cluster_id: u32,
        keyword: &str,
    ) -> Result<()> {
        if !assignments.clusters.contains(&cluster_id) {
            return Err(Error::UnknownCluster(cluster_id));
        }
        let keyword = keyword.trim();
        if keyword.is_empty() {
            return Err(Error::Session("label keyword must not be empty".into()));
        }
        self.labels.insert(cluster_id, keyword.to_string());
        self.touch();
        Ok(())
    }

    /// Replaces the merge map. It must cover exactly the observed clusters;
    /// targets are renumbered to `0..G`. An empty map clears the merge.
    pub fn set_merge_map(
        &mut self,
        assignments: &Assignments,
        merge_map: BTreeMap<u32, u32>,
    ) -> Result<()> {
        if !merge_map.is_empty() {
            check_merge_map(&merge_map, &assignments.cluster_ids())?;
        }
        self.merge_map = normalize_merge_map(&merge_map);
        self.touch();
        Ok(())
    }

    /// Group id per image: merged when a merge map is set, raw otherwise.
    pub fn groups(&self, assignments: &Assignments) -> Result<Vec<u32>> {
        if self.merge_map.is_empty() {
            Ok(assignments.clusters.clone())
        } else {
            apply_merge(&assignments.clusters, &self.merge_map)
        }
    }

    pub fn precision(&self, assignments: &Assignments) -> Result<PrecisionReport> {
        compute_precision(&assignments.image_ids, &self.groups(assignments)?, &self.marks)
    }

    /// One image id per line in click order, each followed by `\n`.
    pub fn export_marks(&self) -> String {
        self.marks.iter().map(|m| format!("{m}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("corrupt session file: {e}")))
    }

    /// Writes to a temporary file next to `path` and renames it into place.
    pub fn save_atomic(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let io = |e| Error::io(path, e);
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        let mut normalized = self.clone();
        normalized.merge_map = normalize_merge_map(&self.merge_map);
        serde_json::to_writer_pretty(&mut tmp, &normalized)
            .map_err(|e| Error::format(path, e.to_string()))?;
        tmp.write_all(b"\n").map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }
}

fn check_merge_map(merge_map: &BTreeMap<u32, u32>, clusters: &BTreeSet<u32>) -> Result<()> {
    if let Some(c) = clusters.iter().find(|c| !merge_map.contains_key(c)) {
        return Err(Error::MergeMissing(*c));
    }
    if let Some(c) = merge_map.keys().find(|c| !clusters.contains(c)) {
        return Err(Error::UnknownCluster(*c));
    }
    Ok(())
}
