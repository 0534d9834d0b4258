use nalgebra::Matrix3;
use proptest::prelude::*;

use ssm_core::dataset::Dataset;
use ssm_core::eval::{evaluate_predictions, reconstruct_mesh, report_csv, rmse, write_report, EvalOptions, CSV_HEADER};
use ssm_core::geometry::{rotation_from_euler, CorrespondenceSet, Frame, Point3};
use ssm_core::mesh::surface_to_surface;
use ssm_core::model::AnatomyPrediction;
use ssm_core::synth::{generate_dataset, SplitSizes, SyntheticSpec};

fn tiny() -> Dataset {
    generate_dataset(&SyntheticSpec {
        splits: SplitSizes {
            train: 3,
            val: 1,
            test: 2,
        },
        num_points: 32,
        mesh_vertices: 162,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn opts() -> EvalOptions {
    EvalOptions {
        surface_samples: 500,
        ..EvalOptions::default()
    }
}

fn oracle(ds: &Dataset) -> Vec<Vec<Option<AnatomyPrediction>>> {
    ds.samples
        .iter()
        .map(|s| {
            s.anatomies
                .iter()
                .map(|a| {
                    Some(AnatomyPrediction {
                        bbox: a.bbox,
                        local: a.local.clone(),
                        world: a.world.clone(),
                    })
                })
                .collect()
        })
        .collect()
}

fn set(points: Vec<Point3>) -> CorrespondenceSet {
    CorrespondenceSet::new(points, Frame::Local, 0).unwrap()
}

fn mesh_gap(a: &[Point3], b: &[Point3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).amax()).fold(0.0, f64::max)
}

#[test]
fn ground_truth_scores_zero() {
    let ds = tiny();
    let samples: Vec<_> = ds.samples.iter().collect();
    let report = evaluate_predictions(&samples, &oracle(&ds), &ds.templates, &opts()).unwrap();
    assert_eq!(report.missed_detections, 0);
    assert_eq!(report.recall, 1.0);
    assert_eq!(report.rows.len(), ds.samples.len() * ds.num_classes);
    for r in &report.rows {
        assert_eq!(r.local_rmse, Some(0.0));
        assert_eq!(r.world_rmse, Some(0.0));
        assert_eq!(r.center_err, Some(0.0));
        assert_eq!(r.radius_err, Some(0.0));
        assert!(r.s2s_mean.unwrap() < 1e-9);
        assert!(r.s2s_max.unwrap() < 1e-9);
    }
}

#[test]
fn single_sample_aggregate_is_its_row() {
    let ds = tiny();
    let mut preds = oracle(&ds);
    let s = &ds.samples[0];
    for p in preds[0].iter_mut().flatten() {
        p.local = p.local.translated(&Point3::new(0.5, -0.25, 1.0));
        p.bbox.center[0] += 2.0;
    }
    let report = evaluate_predictions(&[s], &preds[..1], &ds.templates, &opts()).unwrap();
    for (k, agg) in report.per_anatomy.iter().enumerate() {
        let row = &report.rows[k];
        assert_eq!(agg.count, 1);
        assert_eq!(agg.local_rmse, row.local_rmse.unwrap());
        assert_eq!(agg.center_err, row.center_err.unwrap());
        assert_eq!(agg.s2s_mean, row.s2s_mean.unwrap());
        // Uniform translation t gives RMSE |t|/sqrt(3).
        let expect = Point3::new(0.5, -0.25, 1.0).norm() / 3f64.sqrt();
        assert!((row.local_rmse.unwrap() - expect).abs() < 1e-12);
        assert!((row.center_err.unwrap() - 2.0).abs() < 1e-12);
    }
}

#[test]
fn missing_prediction_counts_as_missed() {
    let ds = tiny();
    let mut preds = oracle(&ds);
    preds[1][2] = None;
    let samples: Vec<_> = ds.samples.iter().collect();
    let report = evaluate_predictions(&samples, &preds, &ds.templates, &opts()).unwrap();
    let cells = ds.samples.len() * ds.num_classes;
    assert_eq!(report.missed_detections, 1);
    assert!((report.recall - (1.0 - 1.0 / cells as f64)).abs() < 1e-15);
    assert_eq!(report.aggregate.count, cells - 1);
    assert_eq!(report.per_anatomy[2].count, ds.samples.len() - 1);
    let row = report.rows.iter().find(|r| r.missed).unwrap();
    assert_eq!((row.sample.as_str(), row.anatomy), (ds.samples[1].id.as_str(), 2));
    assert!(row.local_rmse.is_none() && row.s2s_mean.is_none());

    let csv = report_csv(&report);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.clone().count(), cells);
    assert!(lines.any(|l| l.ends_with(",,,,,,,1")));

    let dir = tempfile::tempdir().unwrap();
    write_report(&report, dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("eval.csv")).unwrap(), csv);
    assert!(dir.path().join("eval.json").exists());
}

#[test]
fn mismatched_prediction_count_is_rejected() {
    let ds = tiny();
    let samples: Vec<_> = ds.samples.iter().collect();
    let preds = oracle(&ds);
    assert!(evaluate_predictions(&samples, &preds[..1], &ds.templates, &opts()).is_err());
}

#[test]
fn reconstruction_reproduces_affine_warps() {
    let ds = tiny();
    for t in &ds.templates {
        let base = &t.surface_mesh().vertices;
        let w = t.world_template();

        let same = reconstruct_mesh(w, t).unwrap();
        assert!(mesh_gap(&same.vertices, base) < 1e-9);
        assert_eq!(same.faces, t.surface_mesh().faces);

        let r = rotation_from_euler(0.3, -0.2, 0.7);
        let shift = Point3::new(1.5, -2.0, 0.5);
        for m in [r, Matrix3::identity() * 1.1] {
            let moved = set(w.points().iter().map(|p| m * p + shift).collect());
            let mesh = reconstruct_mesh(&moved, t).unwrap();
            let expect: Vec<_> = base.iter().map(|p| m * p + shift).collect();
            assert!(mesh_gap(&mesh.vertices, &expect) < 1e-6);
        }
    }
}

#[test]
fn surface_distance_is_symmetric_and_detects_offsets() {
    let ds = tiny();
    let t = &ds.templates[0];
    let a = t.surface_mesh().clone();
    let b = a.map_vertices(|p| p * 1.2);
    let ab = surface_to_surface(&a, &b, 400, 3).unwrap();
    let ba = surface_to_surface(&b, &a, 400, 3).unwrap();
    assert_eq!(ab, ba);
    assert!(ab.mean > 0.0 && ab.max >= ab.mean);
    let aa = surface_to_surface(&a, &a, 400, 3).unwrap();
    assert!(aa.mean < 1e-9);
}

fn cloud(n: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), n)
        .prop_map(|v| v.into_iter().map(Point3::from).collect())
}

proptest! {
    #[test]
    fn rmse_is_a_metric((a, b, c) in (4usize..20).prop_flat_map(|n| (cloud(n), cloud(n), cloud(n)))) {
        let (a, b, c) = (set(a), set(b), set(c));
        prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        prop_assert!((rmse(&a, &b).unwrap() - rmse(&b, &a).unwrap()).abs() < 1e-12);
        let lhs = rmse(&a, &c).unwrap();
        let rhs = rmse(&a, &b).unwrap() + rmse(&b, &c).unwrap();
        prop_assert!(lhs <= rhs + 1e-9);
    }

    #[test]
    fn rmse_rejects_cardinality_mismatch(a in cloud(5), b in cloud(6)) {
        prop_assert!(rmse(&set(a), &set(b)).is_err());
    }
}
