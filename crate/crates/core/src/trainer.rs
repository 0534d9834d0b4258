//! Multi-task training: detection losses on the strided maps, correspondence
//! losses on ROI-pooled predictions, scheduled loss weights and teacher
//! forcing, Adam updates, CSV logging and resumable checkpoints.
//!
//! Every random draw comes from a ChaCha8 stream derived from the seed, the
//! epoch and the sample index, so results do not depend on thread count.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::MapGrads;
use crate::config::TrainConfig;
use crate::dataset::SampleRecord;
use crate::detection::{
    extract_class, heatmap_focal_loss, offset_loss, radius_masked_mse, render_ground_truth, BoundingBox,
    RenderedTargets,
};
use crate::error::{Error, Result};
use crate::eval::rmse;
use crate::geometry::{CorrespondenceSet, Point3, RigidTransform};
use crate::heads::{local_loss, predict_world, world_backward, world_loss, HeadPrediction};
use crate::model::Model;
use crate::nn::checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};
use crate::nn::{Adam, Gradients, ParamStore, Scalar, Tensor};
use crate::roi::{roi_pool_backward, RoiCache};
use crate::schedule::{learning_rate, schedule_at, ScheduleValues};
use crate::template::TemplateShape;

pub const LOG_HEADER: &str = "epoch,lh,lr_loss,lo,ll,lw,total,val_rmse_world,val_rmse_local,lr";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Per-component loss values, in the order `lh, lr, lo, ll, lw`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub heatmap: f64,
    pub radius: f64,
    pub offset: f64,
    pub local: f64,
    pub world: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 5] = ["heatmap", "radius", "offset", "local", "world"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.heatmap, self.radius, self.offset, self.local, self.world]
    }

    fn add(&mut self, o: &Self) {
        self.heatmap += o.heatmap;
        self.radius += o.radius;
        self.offset += o.offset;
        self.local += o.local;
        self.world += o.world;
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            heatmap: self.heatmap * s,
            radius: self.radius * s,
            offset: self.offset * s,
            local: self.local * s,
            world: self.world * s,
        }
    }
}

/// Weighted sum of the components. Fails on the first non-finite component.
pub fn combined_loss(c: &LossComponents, s: &ScheduleValues) -> Result<f64> {
    let mut total = 0.0;
    for ((name, v), w) in LossComponents::NAMES.iter().zip(c.as_array()).zip(s.weights()) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component: name, value: v });
        }
        total += w * v;
    }
    Ok(total)
}

/// Events that change what a training step does.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Predicted box did not overlap the ground truth; the ground-truth box
    /// was used instead.
    pub forced_fallback: u64,
    /// No detection above threshold; the anatomy was left out of the
    /// correspondence losses for that step.
    pub skipped_absent: u64,
    /// Alignment backward fell back to a constant transform.
    pub detached_fallback: u64,
}

impl Counters {
    fn add(&mut self, o: &Self) {
        self.forced_fallback += o.forced_fallback;
        self.skipped_absent += o.skipped_absent;
        self.detached_fallback += o.detached_fallback;
    }
}

/// A sample with its rendered detection targets.
#[derive(Clone, Debug)]
pub struct PreparedSample<'a> {
    pub record: &'a SampleRecord,
    pub targets: RenderedTargets,
    /// Position in the training set; selects the sample's random stream.
    pub index: usize,
}

pub fn prepare<'a>(samples: &[&'a SampleRecord], config: &TrainConfig) -> Result<Vec<PreparedSample<'a>>> {
    let m = &config.model;
    samples
        .par_iter()
        .enumerate()
        .map(|(index, &record)| {
            if let Some(a) = record.anatomies.iter().find(|a| a.anatomy() >= m.num_classes) {
                return Err(Error::ConfigMismatch(format!(
                    "sample {} has anatomy {}, model has {} classes",
                    record.id,
                    a.anatomy(),
                    m.num_classes
                )));
            }
            let targets = render_ground_truth(
                &record.boxes(),
                m.num_classes,
                record.volume.dims,
                m.stride,
                config.splat_sigma_scale,
            )?;
            Ok(PreparedSample { record, targets, index })
        })
        .collect()
}

/// Random stream for `(epoch, slot)`; slot `u32::MAX` is the epoch shuffle.
pub fn stream_rng(seed: u64, epoch: usize, slot: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | slot as u64);
    rng
}

pub struct SampleOutcome<T> {
    pub losses: LossComponents,
    pub counters: Counters,
    pub grads: Gradients<T>,
}

enum WorldPart<T> {
    Aligned {
        input: CorrespondenceSet,
        from_prediction: bool,
        transform: RigidTransform,
        grad: Vec<Point3>,
    },
    Direct {
        pred: HeadPrediction<T>,
        grad: Vec<Point3>,
    },
}

struct AnatomyPass<T> {
    roi: RoiCache,
    local: HeadPrediction<T>,
    local_grad: Vec<Point3>,
    world: WorldPart<T>,
    template: usize,
}

fn scale_points(v: &[Point3], s: f64) -> Vec<Point3> {
    v.iter().map(|p| p * s).collect()
}

fn boxes_overlap(a: &BoundingBox, b: &BoundingBox) -> bool {
    (0..3).all(|i| (a.center[i] - b.center[i]).abs() < a.radii[i] + b.radii[i])
}

/// Forward pass and parameter gradients of the scheduled loss for one
/// sample. Components with zero weight are evaluated but not
/// back-propagated.
pub fn sample_gradients<T: Scalar, R: Rng + ?Sized>(
    model: &Model,
    store: &ParamStore<T>,
    templates: &[TemplateShape],
    sample: &PreparedSample<'_>,
    sched: &ScheduleValues,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<SampleOutcome<T>> {
    let rec = sample.record;
    let dims = rec.volume.dims;
    let out = model.backbone.forward(store, &rec.volume)?;
    let tm = &sample.targets.maps;
    let mask = &sample.targets.mask;
    let lh = heatmap_focal_loss(&out.maps.heatmap, &tm.heatmap, &config.loss)?;
    let lr = radius_masked_mse(&out.maps.radius, &tm.radius, mask)?;
    let lo = offset_loss(&out.maps.offset, &tm.offset, mask, &config.loss)?;
    let (a, c) = (config.loss.a, config.loss.c);

    let mut counters = Counters::default();
    let mut passes = Vec::with_capacity(rec.anatomies.len());
    let (mut ll_sum, mut lw_sum) = (0.0, 0.0);
    for gt in &rec.anatomies {
        let k = gt.anatomy();
        let template = templates
            .get(k)
            .ok_or_else(|| Error::ConfigMismatch(format!("no template for anatomy {k}")))?;
        let use_gt_box = rng.gen_bool(sched.p_gt_box);
        let use_gt_local = rng.gen_bool(sched.p_gt_local);
        let bx = if use_gt_box {
            gt.bbox
        } else {
            match extract_class(&out.maps, k, config.presence_threshold) {
                None => {
                    counters.skipped_absent += 1;
                    continue;
                }
                Some(b) if !boxes_overlap(&b, &gt.bbox) => {
                    counters.forced_fallback += 1;
                    gt.bbox
                }
                Some(b) => b,
            }
        };
        let (roi, roi_cache) = model.roi_feature(&out.pyramid, &bx, dims)?;
        let local = model.local_head.predict_local(store, &roi, &bx, template)?;
        let (ll, local_grad) = local_loss(&local.points, &gt.local, a, c)?;
        let (lw, world) = match &model.world_head {
            None => {
                let input = if use_gt_local {
                    gt.local.clone()
                } else {
                    local.points.clone()
                };
                let (w, transform) = predict_world(&input, template)?;
                let (lw, grad) = world_loss(&w, &gt.world, a, c)?;
                let part = WorldPart::Aligned {
                    input,
                    from_prediction: !use_gt_local,
                    transform,
                    grad,
                };
                (lw, part)
            }
            Some(head) => {
                let pred = head.predict_world_direct(store, &roi, &bx, template)?;
                let (lw, grad) = world_loss(&pred.points, &gt.world, a, c)?;
                (lw, WorldPart::Direct { pred, grad })
            }
        };
        ll_sum += ll;
        lw_sum += lw;
        passes.push(AnatomyPass {
            roi: roi_cache,
            local,
            local_grad,
            world,
            template: k,
        });
    }
    let n = passes.len();
    let inv = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    let losses = LossComponents {
        heatmap: lh.value,
        radius: lr.value,
        offset: lo.value,
        local: ll_sum * inv,
        world: lw_sum * inv,
    };
    combined_loss(&losses, sched)?;

    let mut grads = store.zero_grads();
    let mut level_grads: Vec<Option<Tensor<T>>> = vec![None; out.pyramid.levels.len()];
    let wl = sched.lambda_l * inv;
    let ww = sched.lambda_w * inv;
    for p in &passes {
        let mut upstream = if wl > 0.0 {
            Some(scale_points(&p.local_grad, wl))
        } else {
            None
        };
        let mut d_roi: Option<Vec<T>> = None;
        if ww > 0.0 {
            match &p.world {
                WorldPart::Aligned {
                    input,
                    from_prediction: true,
                    transform,
                    grad,
                } if !config.detach_world_gradient => {
                    let up = scale_points(grad, ww);
                    let (g, detached) = world_backward(input, &templates[p.template], transform, &up)?;
                    if detached {
                        counters.detached_fallback += 1;
                    }
                    match &mut upstream {
                        Some(u) => u.iter_mut().zip(&g).for_each(|(u, g)| *u += g),
                        None => upstream = Some(g),
                    }
                }
                WorldPart::Aligned { .. } => {}
                WorldPart::Direct { pred, grad } => {
                    let head = model.world_head.as_ref().expect("direct part implies world head");
                    d_roi = Some(head.backward(store, pred, &scale_points(grad, ww), &mut grads));
                }
            }
        }
        if let Some(up) = upstream {
            let d = model.local_head.backward(store, &p.local, &up, &mut grads);
            match &mut d_roi {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                None => d_roi = Some(d),
            }
        }
        if let Some(d) = d_roi {
            roi_pool_backward(&out.pyramid, &p.roi, &d, &mut level_grads);
        }
    }
    let map_grads = (sched.lambda_h > 0.0 || sched.lambda_r > 0.0 || sched.lambda_o > 0.0).then(|| MapGrads {
        heatmap: lh.grad.iter().map(|g| g * sched.lambda_h).collect(),
        radius: lr.grad.iter().map(|g| g * sched.lambda_r).collect(),
        offset: lo.grad.iter().map(|g| g * sched.lambda_o).collect(),
    });
    model
        .backbone
        .backward(store, &out.cache, map_grads.as_ref(), level_grads, &mut grads, false);
    Ok(SampleOutcome {
        losses,
        counters,
        grads,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    /// Batch means.
    pub losses: LossComponents,
    pub total: f64,
    pub counters: Counters,
}

/// One optimizer update on `batch`, with gradients averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    batch: &[&PreparedSample<'_>],
    templates: &[TemplateShape],
    epoch: usize,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let sched = schedule_at(epoch, &config.weights, &config.teacher_forcing);
    let lr = learning_rate(epoch, config.learning_rate, config.lr_step, config.lr_gamma);
    let frozen: &ParamStore<f32> = store;
    let outcomes = batch
        .par_iter()
        .map(|s| {
            let mut rng = stream_rng(config.seed, epoch, s.index as u32);
            sample_gradients(model, frozen, templates, s, &sched, config, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut metrics = StepMetrics::default();
    let mut grads = store.zero_grads();
    for o in &outcomes {
        grads.add_assign(&o.grads);
        metrics.losses.add(&o.losses);
        metrics.total += combined_loss(&o.losses, &sched)?;
        metrics.counters.add(&o.counters);
    }
    let inv = 1.0 / outcomes.len().max(1) as f64;
    grads.scale(inv as f32);
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            component: "gradient",
            value: grads.norm(),
        });
    }
    adam.update(store, &grads, lr);
    metrics.losses = metrics.losses.scaled(inv);
    metrics.total *= inv;
    Ok(metrics)
}

/// Validation correspondence error over detected anatomies. A detection
/// counts only when its box overlaps the ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub rmse_world: f64,
    pub rmse_local: f64,
    pub detected: usize,
    pub total: usize,
}

impl ValMetrics {
    pub fn recall(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.detected as f64 / self.total as f64
        }
    }
}

pub fn validate(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[&SampleRecord],
    templates: &[TemplateShape],
    presence_threshold: f64,
) -> Result<ValMetrics> {
    let per_sample = samples
        .par_iter()
        .map(|s| -> Result<Vec<Option<(f64, f64)>>> {
            let preds = model.predict(store, &s.volume, templates, presence_threshold)?;
            s.anatomies
                .iter()
                .map(|gt| match preds.get(gt.anatomy()).and_then(|p| p.as_ref()) {
                    Some(p) if boxes_overlap(&p.bbox, &gt.bbox) => {
                        Ok(Some((rmse(&p.world, &gt.world)?, rmse(&p.local, &gt.local)?)))
                    }
                    _ => Ok(None),
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<Option<(f64, f64)>> = per_sample.into_iter().flatten().collect();
    let hits: Vec<(f64, f64)> = cells.iter().flatten().copied().collect();
    let mean = |f: fn(&(f64, f64)) -> f64| {
        if hits.is_empty() {
            f64::NAN
        } else {
            hits.iter().map(f).sum::<f64>() / hits.len() as f64
        }
    };
    Ok(ValMetrics {
        rmse_world: mean(|h| h.0),
        rmse_local: mean(|h| h.1),
        detected: hits.len(),
        total: cells.len(),
    })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossComponents,
    pub total: f64,
    pub val: Option<ValMetrics>,
    pub learning_rate: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        let (vw, vl) = self
            .val
            .map(|v| (v.rmse_world, v.rmse_local))
            .unwrap_or((f64::NAN, f64::NAN));
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch, l.heatmap, l.radius, l.offset, l.local, l.world, self.total, vw, vl, self.learning_rate
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Continue from `out_dir/last.ckpt` when present.
    pub resume: bool,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct RunState {
    adam_step: u64,
    best_epoch: Option<usize>,
    best_val_world: Option<f64>,
    #[serde(default)]
    best_detected: usize,
    counters: Counters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    pub best_val_world: Option<f64>,
    pub counters: Counters,
    pub resumed_from: Option<usize>,
    pub wall_seconds: f64,
}

pub struct Trained {
    pub model: Model,
    /// Parameters after the final epoch.
    pub last: ParamStore<f32>,
    /// Parameters at the best validation epoch, if any epoch qualified.
    pub best: Option<ParamStore<f32>>,
    pub history: Vec<EpochRecord>,
    pub summary: FitSummary,
}

impl Trained {
    /// Best parameters when available, otherwise the last.
    pub fn params(&self) -> &ParamStore<f32> {
        self.best.as_ref().unwrap_or(&self.last)
    }
}

fn rewrite_log(path: &Path, keep_through: Option<usize>) -> Result<()> {
    let mut text = format!("{LOG_HEADER}\n");
    if let Some(last) = keep_through {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
                if epoch.is_some_and(|e| e <= last) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and rebuilds the model it was trained with.
pub fn load_model(path: &Path) -> Result<(Model, ParamStore<f32>, TrainConfig, Checkpoint)> {
    let ck = load_checkpoint(path)?;
    let config: TrainConfig = serde_json::from_value(ck.manifest.config.clone())
        .map_err(|e| Error::corrupt(path, 16, format!("bad config in checkpoint: {e}")))?;
    config.validate()?;
    let (model, mut store) = Model::new::<f32>(&config.model, config.seed)?;
    ck.restore_params(&mut store)?;
    Ok((model, store, config, ck))
}

/// Trains from scratch (or resumes) and writes `train_log.csv`,
/// `last.ckpt`, `best.ckpt`, `config.json` and `summary.json` under
/// `opts.out_dir`.
pub fn fit(
    train: &[&SampleRecord],
    val: &[&SampleRecord],
    templates: &[TemplateShape],
    config: &TrainConfig,
    opts: &FitOptions,
) -> Result<Trained> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let started = Instant::now();
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let identity = config.identity();
    let (model, mut store) = Model::new::<f32>(&config.model, config.seed)?;
    model.check_templates(templates)?;
    let prepared = prepare(train, config)?;

    let last_path = out.join(LAST_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);
    let log_path = out.join(TRAIN_LOG);
    let mut adam = Adam::new(&store);
    let mut state = RunState::default();
    let mut start_epoch = 0;
    let mut resumed_from = None;
    let mut best: Option<ParamStore<f32>> = None;
    if opts.resume && last_path.exists() {
        let ck = load_checkpoint(&last_path)?;
        if ck.manifest.config_hash != config_hash(&identity) {
            return Err(Error::ConfigMismatch(format!(
                "{} was written with a different configuration",
                last_path.display()
            )));
        }
        ck.restore_params(&mut store)?;
        state = serde_json::from_value(ck.manifest.state.clone())
            .map_err(|e| Error::corrupt(&last_path, 16, format!("bad run state: {e}")))?;
        adam = ck
            .restore_adam(&store, state.adam_step)?
            .ok_or_else(|| Error::corrupt(&last_path, 16, "optimizer state missing"))?;
        if state.best_epoch.is_some() && best_path.exists() {
            let (_, b, _, _) = load_model(&best_path)?;
            best = Some(b);
        }
        start_epoch = ck.manifest.epoch + 1;
        resumed_from = Some(ck.manifest.epoch);
        rewrite_log(&log_path, Some(ck.manifest.epoch))?;
    } else {
        rewrite_log(&log_path, None)?;
    }
    config.save(&out.join("config.json"))?;

    let mut history = Vec::new();
    let bs = config.batch_size;
    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, epoch, u32::MAX));
        let mut sum = LossComponents::default();
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let batch: Vec<&PreparedSample<'_>> = chunk.iter().map(|&i| &prepared[i]).collect();
            let m = train_step(&model, &mut store, &mut adam, &batch, templates, epoch, config)?;
            let w = batch.len() as f64;
            sum.add(&m.losses.scaled(w));
            total += m.total * w;
            state.counters.add(&m.counters);
        }
        let inv = 1.0 / prepared.len() as f64;
        let val_metrics = if val.is_empty() {
            None
        } else {
            Some(validate(&model, &store, val, templates, config.presence_threshold)?)
        };
        let record = EpochRecord {
            epoch,
            losses: sum.scaled(inv),
            total: total * inv,
            val: val_metrics,
            learning_rate: learning_rate(epoch, config.learning_rate, config.lr_step, config.lr_gamma),
        };
        append_log(&log_path, &record.csv_line())?;
        if opts.verbose {
            eprintln!("{}", record.csv_line());
        }
        if let Some(v) = val_metrics {
            // More detected anatomies first, then lower world error.
            let improved = match state.best_val_world {
                None => true,
                Some(b) => v.detected > state.best_detected || (v.detected == state.best_detected && v.rmse_world < b),
            };
            if v.detected > 0 && v.rmse_world.is_finite() && improved {
                state.best_val_world = Some(v.rmse_world);
                state.best_detected = v.detected;
                state.best_epoch = Some(epoch);
                save_checkpoint(&best_path, &identity, epoch, serde_json::Value::Null, &store, None)?;
                best = Some(store.clone());
            }
        }
        state.adam_step = adam.step;
        let st = serde_json::to_value(&state).expect("run state serializes");
        save_checkpoint(&last_path, &identity, epoch, st, &store, Some(&adam))?;
        history.push(record);
    }

    let summary = FitSummary {
        epochs_completed: config.epochs,
        best_epoch: state.best_epoch,
        best_val_world: state.best_val_world,
        counters: state.counters,
        resumed_from,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    crate::io::write_json(&out.join("summary.json"), &summary)?;
    Ok(Trained {
        model,
        last: store,
        best,
        history,
        summary,
    })
}
