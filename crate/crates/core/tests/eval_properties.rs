use std::collections::BTreeMap;

use fcluster_core::eval::{apply_merge, compute_precision, Assignments, EvaluationSession};
use fcluster_core::ingest::{load_embeddings, save_embeddings, EmbeddingMatrix, ImageRecord, Manifest};
use fcluster_core::Matrix;
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img{i}")).collect()
}

fn groups_and_marks() -> impl Strategy<Value = (Vec<u32>, Vec<usize>)> {
    (1usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(0u32..6, n),
            prop::collection::vec(0..n, 0..n),
        )
    })
}

proptest! {
    #[test]
    fn micro_precision_is_one_minus_marked_fraction((groups, picks) in groups_and_marks()) {
        let all = ids(groups.len());
        let mut marks: Vec<String> = Vec::new();
        for p in picks {
            if !marks.contains(&all[p]) {
                marks.push(all[p].clone());
            }
        }
        let r = compute_precision(&all, &groups, &marks).unwrap();
        let expected = 1.0 - marks.len() as f64 / groups.len() as f64;
        prop_assert!((r.micro_precision - expected).abs() < 1e-15);
        prop_assert!(r.per_cluster.values().all(|c| (0.0..=1.0).contains(&c.precision)));
        let total: usize = r.per_cluster.values().map(|c| c.total).sum();
        prop_assert_eq!(total, groups.len());
    }

    #[test]
    fn adding_a_mark_never_raises_precision((groups, picks) in groups_and_marks(), extra in any::<prop::sample::Index>()) {
        let all = ids(groups.len());
        let mut marks: Vec<String> = picks.iter().map(|&p| all[p].clone()).collect();
        marks.dedup();
        let before = compute_precision(&all, &groups, &marks).unwrap();
        marks.push(all[extra.index(all.len())].clone());
        let after = compute_precision(&all, &groups, &marks).unwrap();
        prop_assert!(after.micro_precision <= before.micro_precision);
        prop_assert!(after.macro_precision <= before.macro_precision + 1e-15);
        for (c, p) in &after.per_cluster {
            prop_assert!(p.precision <= before.per_cluster[c].precision);
        }
    }

    #[test]
    fn no_marks_gives_all_ones(groups in prop::collection::vec(0u32..10, 1..50)) {
        let r = compute_precision(&ids(groups.len()), &groups, &[]).unwrap();
        prop_assert!(r.per_cluster.values().all(|c| c.precision == 1.0));
        prop_assert_eq!(r.macro_precision, 1.0);
        prop_assert_eq!(r.micro_precision, 1.0);
    }

    #[test]
    fn merge_preserves_length_and_is_idempotent_on_retractions(
        assignments in prop::collection::vec(0u32..12, 0..60),
        targets in prop::collection::vec(0u32..12, 12),
    ) {
        // Make the map a retraction: every target maps to itself.
        let mut map: BTreeMap<u32, u32> = (0..12).map(|c| (c, targets[c as usize])).collect();
        for t in targets.iter().copied() {
            map.insert(t, t);
        }
        let once = apply_merge(&assignments, &map).unwrap();
        prop_assert_eq!(once.len(), assignments.len());
        prop_assert_eq!(apply_merge(&once, &map).unwrap(), once);
    }

    #[test]
    fn session_file_roundtrip(marks in prop::collection::vec(0usize..20, 0..20), labels in prop::collection::btree_map(0u32..4, "[a-z ]{1,12}[a-z]", 0..4)) {
        let all = ids(20);
        let a = Assignments::new(all.clone(), (0..20).map(|i| i % 4).collect()).unwrap();
        let mut s = EvaluationSession::new("prop", "assignments.csv");
        for m in marks {
            s.add_mark(&a, &all[m]).unwrap();
        }
        for (c, kw) in &labels {
            s.set_label(&a, *c, kw).unwrap();
        }
        s.set_merge_map(&a, BTreeMap::from([(0, 9), (1, 9), (2, 4), (3, 4)])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        s.save_atomic(&p).unwrap();
        prop_assert_eq!(EvaluationSession::load(&p).unwrap(), s);
    }

    #[test]
    fn embeddings_roundtrip_bit_exact(values in prop::collection::vec(-1e30f32..1e30, 1..64), width in 1usize..8) {
        let n = values.len() / width;
        prop_assume!(n > 0);
        let data: Vec<f64> = values[..n * width].iter().map(|&v| v as f64).collect();
        let records: Vec<ImageRecord> = (0..n)
            .map(|i| ImageRecord {
                image_id: format!("r{i}"),
                file_path: format!("r{i}.png"),
                donor_id: "d".into(),
                taken_at: fcluster_core::ingest::parse_timestamp("2013-07-14T09:30:00-04:00").unwrap(),
            })
            .collect();
        let manifest = Manifest::new(records, "mem").unwrap();
        let m = EmbeddingMatrix::new(manifest.image_ids(), Matrix::from_vec(n, width, data).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.emb");
        save_embeddings(&p, &m).unwrap();
        let back = load_embeddings(&p, &manifest).unwrap();
        prop_assert_eq!(back, m);
    }
}
