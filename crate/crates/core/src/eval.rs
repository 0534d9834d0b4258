//! Correspondence and surface metrics, and per-sample evaluation reports.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::geometry::CorrespondenceSet;
use crate::io::{write_json, write_obj};
use crate::mesh::{surface_to_surface, vertex_distances, TriMesh, DEFAULT_SURFACE_SAMPLES};
use crate::model::{AnatomyPrediction, Model};
use crate::nn::ParamStore;
use crate::template::TemplateShape;
use crate::tps::ThinPlateSpline;

/// Root mean squared error over all `3M` coordinates.
pub fn rmse(pred: &CorrespondenceSet, gt: &CorrespondenceSet) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::MismatchedCardinality {
            left: pred.len(),
            right: gt.len(),
        });
    }
    let sq: f64 = pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok((sq / (3 * pred.len()) as f64).sqrt())
}

/// Warps the template mesh by the thin-plate spline taking the world
/// template correspondences onto `correspondences`.
pub fn reconstruct_mesh(correspondences: &CorrespondenceSet, template: &TemplateShape) -> Result<TriMesh> {
    let source = template.world_template();
    if source.len() != correspondences.len() {
        return Err(Error::MismatchedCardinality {
            left: correspondences.len(),
            right: source.len(),
        });
    }
    let tps = ThinPlateSpline::fit(source.points(), correspondences.points())?;
    Ok(template.surface_mesh().map_vertices(|v| tps.transform(v)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub presence_threshold: f64,
    pub surface_samples: usize,
    pub seed: u64,
    /// Directory for per-case predicted meshes with per-vertex distances.
    pub heatmap_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            presence_threshold: crate::detection::DEFAULT_PRESENCE_THRESHOLD,
            surface_samples: DEFAULT_SURFACE_SAMPLES,
            seed: 0,
            heatmap_dir: None,
        }
    }
}

/// One `(sample, anatomy)` cell. Metric fields are `None` when missed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample: String,
    pub anatomy: usize,
    pub local_rmse: Option<f64>,
    pub world_rmse: Option<f64>,
    pub center_err: Option<f64>,
    pub radius_err: Option<f64>,
    pub s2s_mean: Option<f64>,
    pub s2s_max: Option<f64>,
    pub missed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub local_rmse: f64,
    pub world_rmse: f64,
    pub center_err: f64,
    pub radius_err: f64,
    pub s2s_mean: f64,
    pub s2s_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregate: Aggregate,
    pub per_anatomy: Vec<Aggregate>,
    pub missed_detections: usize,
    pub recall: f64,
    pub rows: Vec<EvalRow>,
}

fn aggregate<'a>(rows: impl Iterator<Item = &'a EvalRow>) -> Aggregate {
    let mut agg = Aggregate::default();
    for r in rows.filter(|r| !r.missed) {
        agg.count += 1;
        agg.local_rmse += r.local_rmse.unwrap_or(0.0);
        agg.world_rmse += r.world_rmse.unwrap_or(0.0);
        agg.center_err += r.center_err.unwrap_or(0.0);
        agg.radius_err += r.radius_err.unwrap_or(0.0);
        agg.s2s_mean += r.s2s_mean.unwrap_or(0.0);
        agg.s2s_max += r.s2s_max.unwrap_or(0.0);
    }
    if agg.count > 0 {
        let n = agg.count as f64;
        for v in [
            &mut agg.local_rmse,
            &mut agg.world_rmse,
            &mut agg.center_err,
            &mut agg.radius_err,
            &mut agg.s2s_mean,
            &mut agg.s2s_max,
        ] {
            *v /= n;
        }
    }
    agg
}

fn evaluate_cell(
    sample: &SampleRecord,
    k: usize,
    pred: Option<&AnatomyPrediction>,
    template: &TemplateShape,
    opts: &EvalOptions,
) -> Result<EvalRow> {
    let gt = sample.anatomy(k).expect("caller iterates present anatomies");
    let Some(p) = pred else {
        return Ok(EvalRow {
            sample: sample.id.clone(),
            anatomy: k,
            local_rmse: None,
            world_rmse: None,
            center_err: None,
            radius_err: None,
            s2s_mean: None,
            s2s_max: None,
            missed: true,
        });
    };
    let pred_mesh = reconstruct_mesh(&p.local, template)?;
    let gt_mesh = reconstruct_mesh(&gt.local, template)?;
    let s2s = surface_to_surface(&pred_mesh, &gt_mesh, opts.surface_samples, opts.seed)?;
    if let Some(dir) = &opts.heatmap_dir {
        let base = dir.join(format!("{}_anatomy_{k}", sample.id));
        write_obj(&base.with_extension("obj"), &pred_mesh)?;
        let dist = vertex_distances(&pred_mesh, &gt_mesh)?;
        let text: String = dist.iter().map(|d| format!("{d}\n")).collect();
        let path = base.with_extension("dist");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let center_err = (p.bbox.center_point() - gt.bbox.center_point()).norm();
    let radius_err = (p.bbox.radii_point() - gt.bbox.radii_point()).norm();
    Ok(EvalRow {
        sample: sample.id.clone(),
        anatomy: k,
        local_rmse: Some(rmse(&p.local, &gt.local)?),
        world_rmse: Some(rmse(&p.world, &gt.world)?),
        center_err: Some(center_err),
        radius_err: Some(radius_err),
        s2s_mean: Some(s2s.mean),
        s2s_max: Some(s2s.max),
        missed: false,
    })
}

/// Scores per-sample predictions (indexed by anatomy class) against ground
/// truth. Anatomies absent from the ground truth are ignored.
pub fn evaluate_predictions(
    samples: &[&SampleRecord],
    predictions: &[Vec<Option<AnatomyPrediction>>],
    templates: &[TemplateShape],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if samples.len() != predictions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples, {} prediction sets",
            samples.len(),
            predictions.len()
        )));
    }
    if let Some(dir) = &opts.heatmap_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let per_sample: Vec<Vec<EvalRow>> = samples
        .par_iter()
        .zip(predictions.par_iter())
        .map(|(s, preds)| {
            s.anatomies
                .iter()
                .map(|a| {
                    let k = a.anatomy();
                    let template = templates.get(k).ok_or_else(|| {
                        Error::ConfigMismatch(format!("no template for anatomy {k}"))
                    })?;
                    evaluate_cell(s, k, preds.get(k).and_then(|p| p.as_ref()), template, opts)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<EvalRow> = per_sample.into_iter().flatten().collect();
    let num_classes = templates.len();
    let missed = rows.iter().filter(|r| r.missed).count();
    Ok(EvalReport {
        aggregate: aggregate(rows.iter()),
        per_anatomy: (0..num_classes)
            .map(|k| aggregate(rows.iter().filter(|r| r.anatomy == k)))
            .collect(),
        missed_detections: missed,
        recall: if rows.is_empty() {
            1.0
        } else {
            1.0 - missed as f64 / rows.len() as f64
        },
        rows,
    })
}

/// Full inference (detection, local, world) and scoring of every sample.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[&SampleRecord],
    templates: &[TemplateShape],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    model.check_templates(templates)?;
    for s in samples {
        if let Some(a) = s.anatomies.iter().find(|a| a.anatomy() >= model.config.num_classes) {
            return Err(Error::ConfigMismatch(format!(
                "sample {} has anatomy {}, model has {} classes",
                s.id,
                a.anatomy(),
                model.config.num_classes
            )));
        }
        if s.anatomies.iter().any(|a| a.local.len() != model.config.num_points) {
            return Err(Error::ConfigMismatch(format!(
                "sample {} has correspondence sets of a different size than the model's {}",
                s.id, model.config.num_points
            )));
        }
    }
    let predictions = samples
        .par_iter()
        .map(|s| model.predict(store, &s.volume, templates, opts.presence_threshold))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(samples, &predictions, templates, opts)
}

pub const CSV_HEADER: &str = "sample,anatomy,local_rmse,world_rmse,center_err,radius_err,s2s_mean,s2s_max,missed";

pub fn report_csv(report: &EvalReport) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.sample,
            r.anatomy,
            f(r.local_rmse),
            f(r.world_rmse),
            f(r.center_err),
            f(r.radius_err),
            f(r.s2s_mean),
            f(r.s2s_max),
            u8::from(r.missed)
        ));
    }
    s
}

/// Writes `eval.csv` (per-sample rows) and `eval.json` (aggregates).
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("eval.csv");
    fs::write(&csv, report_csv(report)).map_err(|e| Error::io(&csv, e))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        aggregate: &'a Aggregate,
        per_anatomy: &'a [Aggregate],
        missed_detections: usize,
        recall: f64,
    }
    write_json(
        &dir.join("eval.json"),
        &Summary {
            aggregate: &report.aggregate,
            per_anatomy: &report.per_anatomy,
            missed_detections: report.missed_detections,
            recall: report.recall,
        },
    )
}
