//! Cohort and annotation input, imputation, node features, and synthetic data.

mod annotation;
mod cohort;
mod features;
mod impute;
mod synth;

pub use annotation::{parse_annotations, write_annotations, Base, CpGAnnotation, ANNOTATION_COLUMNS};
pub use cohort::{parse_cohort, CohortTable, DiseaseStatus, SampleMeta, Sex};
pub use features::{build_node_features, NodeFeatureTemplate, FEATURE_NAMES, METHYLATION_COL, N_FEATURES};
pub use impute::{knn_impute, masked_distance};
pub use synth::{logistic, synth_cohort, GeneratorTruth, SiteModel, SynthCohort, SynthConfig};

#[cfg(test)]
mod tests {
    use std::fs;
    use std::path::PathBuf;

    use ndarray::array;

    use super::*;
    use crate::error::Error;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    const META2: &str = "sample_id,age,sex,disease,dataset_id\ns1,65,female,healthy,d1\ns2,40.5,M,ovarian_cancer,d1\n";

    #[test]
    fn parse_cohort_marks_missing_and_reads_ages() {
        let dir = tempfile::tempdir().unwrap();
        let beta = write(&dir, "b.csv", "sample_id,cg1,cg2,cg3\ns1,0.1,,0.3\ns2,0.4,0.5,0.6\n");
        let meta = write(&dir, "m.csv", META2);
        let c = parse_cohort(&beta, &meta).unwrap();
        assert_eq!(c.missing_count(), 1);
        assert!(c.beta[[0, 1]].is_nan());
        assert_eq!(c.samples[0].age, 65.0);
        assert_eq!(c.samples[1].sex, Sex::Male);
        assert_eq!(
            c.samples[1].disease,
            DiseaseStatus::Disease("ovarian_cancer".into())
        );
    }

    #[test]
    fn na_literal_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        let beta = write(&dir, "b.csv", "sample_id,cg1\ns1,NA\ns2,0.2\n");
        let meta = write(&dir, "m.csv", META2);
        assert_eq!(parse_cohort(&beta, &meta).unwrap().missing_count(), 1);
    }

    #[test]
    fn parse_cohort_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(&dir, "m.csv", META2);
        let dup = write(&dir, "dup.csv", "sample_id,cg1\ns1,0.1\ns1,0.2\n");
        assert!(matches!(parse_cohort(&dup, &meta), Err(Error::Parse { .. })));
        let range = write(&dir, "range.csv", "sample_id,cg1\ns1,1.2\ns2,0.2\n");
        let err = parse_cohort(&range, &meta).unwrap_err().to_string();
        assert!(err.contains("outside [0,1]"), "{err}");
        let orphan = write(&dir, "orphan.csv", "sample_id,cg1\ns1,0.1\n");
        let err = parse_cohort(&orphan, &meta).unwrap_err().to_string();
        assert!(err.contains("s2"), "{err}");
    }

    const ANNOT: &str = "cpg_id,chromosome,map_info,gene,in_island,island_start,island_end,next_base,tss_distance\n\
cg1,chr1,1000,ELOVL2,1,100,600,C,50\n\
cg2,chr1,2000,,0,,,A,\n\
cg3,chr2,500,ELOVL2,0,,,T,200\n";

    #[test]
    fn parse_annotations_reads_islands_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = parse_annotations(&write(&dir, "a.csv", ANNOT)).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].island_len(), Some(500));
        assert!(!a[1].in_island);
        assert_eq!(a[1].island_start, None);
        assert_eq!(a[1].gene, None);
        assert_eq!(a[1].tss_distance, None);
        let ids: Vec<_> = a.iter().map(|x| x.cpg_id.as_str()).collect();
        assert_eq!(ids, ["cg1", "cg2", "cg3"]);
    }

    #[test]
    fn parse_annotations_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let head = ANNOT.lines().next().unwrap();
        for (name, row, needle) in [
            ("base.csv", "cg1,chr1,1,,0,,,X,", "unknown base"),
            ("island.csv", "cg1,chr1,1,,1,,,A,", "without island bounds"),
            ("dup.csv", "cg1,chr1,1,,0,,,A,\ncg1,chr1,2,,0,,,A,", "duplicate"),
        ] {
            let p = write(&dir, name, &format!("{head}\n{row}\n"));
            let err = parse_annotations(&p).unwrap_err().to_string();
            assert!(err.contains(needle), "{name}: {err}");
        }
    }

    #[test]
    fn node_features_follow_documented_rules() {
        let dir = tempfile::tempdir().unwrap();
        let a = parse_annotations(&write(&dir, "a.csv", ANNOT)).unwrap();
        let t = build_node_features(&a);
        let x = t.instantiate(array![0.9, 0.5, 0.1].view()).unwrap();
        assert_eq!(x.dim(), (3, N_FEATURES));
        assert_eq!(x[[0, METHYLATION_COL]], 0.9);
        // cg1: island, next base C, tss 50 of max 200, map 1000 of chr1 max 2000
        assert_eq!(x.row(0).to_vec(), vec![0.9, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 100.0 / 600.0, 1.0, 0.25, 0.5]);
        // cg2: no island, missing tss -> 1
        assert_eq!(x.row(1).to_vec(), vec![0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        for row in x.rows() {
            assert_eq!(row[3] + row[4] + row[5] + row[6], 1.0);
        }
        assert!(t.instantiate(array![0.1].view()).is_err());
    }

    fn tiny_cohort(beta: ndarray::Array2<f64>) -> CohortTable {
        let samples = (0..beta.nrows())
            .map(|i| SampleMeta {
                id: format!("s{i}"),
                age: 30.0 + i as f64,
                sex: Sex::Unknown,
                disease: DiseaseStatus::Healthy,
                dataset_id: "t".into(),
            })
            .collect();
        let ids = (0..beta.ncols()).map(|j| format!("cg{j}")).collect();
        CohortTable::new(ids, samples, beta).unwrap()
    }

    #[test]
    fn knn_without_holes_is_identity() {
        let c = tiny_cohort(array![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]);
        let out = knn_impute(&c, 2).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn knn_on_identical_samples_copies_the_shared_value() {
        let c = tiny_cohort(array![[0.2, 0.7, 0.4], [0.2, f64::NAN, 0.4], [0.2, 0.7, 0.4]]);
        let out = knn_impute(&c, 2).unwrap();
        assert_eq!(out.beta[[1, 1]], 0.7);
        assert_eq!(out.missing_count(), 0);
    }

    #[test]
    fn knn_rejects_fully_missing_column_and_k_zero() {
        let c = tiny_cohort(array![[0.2, f64::NAN], [0.3, f64::NAN], [0.1, f64::NAN]]);
        assert!(knn_impute(&c, 1).is_err());
        let c = tiny_cohort(array![[0.2, f64::NAN], [0.3, 0.1], [0.1, 0.5]]);
        assert!(knn_impute(&c, 0).is_err());
        assert!(knn_impute(&c, 3).is_err());
    }

    #[test]
    fn knn_falls_back_to_available_donors() {
        let c = tiny_cohort(array![
            [0.2, f64::NAN],
            [0.3, 0.8],
            [0.1, f64::NAN],
            [0.9, f64::NAN]
        ]);
        let out = knn_impute(&c, 3).unwrap();
        assert_eq!(out.beta[[0, 1]], 0.8);
    }

    #[test]
    fn synth_is_deterministic_and_validated() {
        let cfg = SynthConfig {
            n_cpg: 30,
            n_samples: 20,
            n_clock_sites: 5,
            ..SynthConfig::default()
        };
        let a = synth_cohort(&cfg, 4).unwrap();
        let b = synth_cohort(&cfg, 4).unwrap();
        assert_eq!(a.cohort, b.cohort);
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.cohort.disease_indices().len(), 4);

        let bad = SynthConfig {
            n_clock_sites: 31,
            ..cfg.clone()
        };
        assert!(synth_cohort(&bad, 0).is_err());
        let bad = SynthConfig {
            disease_fraction: 1.5,
            ..cfg
        };
        assert!(synth_cohort(&bad, 0).is_err());
    }

    #[test]
    fn noiseless_clock_sites_are_monotone_in_age() {
        let cfg = SynthConfig {
            n_cpg: 20,
            n_samples: 40,
            n_clock_sites: 6,
            noise_sd: 0.0,
            disease_fraction: 0.0,
            ..SynthConfig::default()
        };
        let s = synth_cohort(&cfg, 9).unwrap();
        let mut order: Vec<usize> = (0..40).collect();
        order.sort_by(|&a, &b| s.cohort.samples[a].age.total_cmp(&s.cohort.samples[b].age));
        for &c in &s.truth.clock_sites {
            let SiteModel::Clock { slope, .. } = s.truth.sites[c] else {
                panic!()
            };
            for w in order.windows(2) {
                let (a0, a1) = (s.cohort.samples[w[0]].age, s.cohort.samples[w[1]].age);
                if a1 > a0 {
                    let (b0, b1) = (s.cohort.beta[[w[0], c]], s.cohort.beta[[w[1], c]]);
                    assert!(if slope > 0.0 { b1 > b0 } else { b1 < b0 });
                }
            }
        }
        // noise-free inversion recovers the age exactly (healthy cohort)
        for (i, m) in s.cohort.samples.iter().enumerate() {
            assert!((s.truth.invert_age(s.cohort.beta.row(i)) - m.age).abs() < 1e-6);
        }
    }

    #[test]
    fn cohort_csv_round_trip() {
        let cfg = SynthConfig {
            n_cpg: 12,
            n_samples: 9,
            n_clock_sites: 3,
            missing_fraction: 0.1,
            ..SynthConfig::default()
        };
        let s = synth_cohort(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (b, m, a) = (
            dir.path().join("b.csv"),
            dir.path().join("m.csv"),
            dir.path().join("a.csv"),
        );
        s.cohort.write_csv(&b, &m).unwrap();
        write_annotations(&a, &s.annotations).unwrap();
        let back = parse_cohort(&b, &m).unwrap();
        assert_eq!(back.samples, s.cohort.samples);
        assert_eq!(back.missing_count(), s.cohort.missing_count());
        for (x, y) in back.beta.iter().zip(s.cohort.beta.iter()) {
            assert!(x == y || (x.is_nan() && y.is_nan()));
        }
        assert_eq!(parse_annotations(&a).unwrap(), s.annotations);
    }
}
