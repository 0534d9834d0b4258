use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssm_core::detection::{
    heatmap_focal_loss, offset_loss, radius_masked_mse, sigmoid_weighted_mse, BoundingBox, DetectionLossParams,
};
use ssm_core::geometry::{align_points, procrustes_backward, random_rotation, CorrespondenceSet, Frame, Point3};
use ssm_core::heads::{local_loss, world_loss, LocalHead};
use ssm_core::nn::ParamStore;
use ssm_core::roi::RoiFeature;
use ssm_core::template::TemplateShape;

use crate::util::{central_diff, flatten, gaussian, random_point, rel_err, unflatten, well_spread};
use crate::Outcome;

const SEEDS: u64 = 50;

struct Check {
    name: &'static str,
    limit: f64,
    worst: f64,
}

fn over_seeds(name: &'static str, limit: f64, salt: u64, f: impl Fn(&mut ChaCha8Rng) -> f64) -> Check {
    let worst = (0..SEEDS)
        .map(|s| f(&mut ChaCha8Rng::seed_from_u64(salt * 1000 + s)))
        .fold(0.0, f64::max);
    Check { name, limit, worst }
}

fn mask(rng: &mut ChaCha8Rng, voxels: usize) -> Vec<usize> {
    let mut m: Vec<usize> = (0..voxels).filter(|_| rng.gen_bool(0.1)).collect();
    if m.is_empty() {
        m.push(rng.gen_range(0..voxels));
    }
    m
}

fn focal(rng: &mut ChaCha8Rng) -> f64 {
    let p = DetectionLossParams::default();
    let n = 2 * 64;
    let mut gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.95)).collect();
    gt[rng.gen_range(0..64)] = 1.0;
    gt[64 + rng.gen_range(0..64)] = 1.0;
    let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.98)).collect();
    let a = heatmap_focal_loss(&pred, &gt, &p).unwrap().grad;
    let num = central_diff(&pred, 1e-6, |x| heatmap_focal_loss(x, &gt, &p).unwrap().value);
    rel_err(&a, &num)
}

fn radius(rng: &mut ChaCha8Rng) -> f64 {
    let m = mask(rng, 64);
    let pred: Vec<f64> = (0..192).map(|_| rng.gen_range(0.0..12.0)).collect();
    let gt: Vec<f64> = (0..192).map(|_| rng.gen_range(0.0..12.0)).collect();
    let a = radius_masked_mse(&pred, &gt, &m).unwrap().grad;
    let num = central_diff(&pred, 1e-5, |x| radius_masked_mse(x, &gt, &m).unwrap().value);
    rel_err(&a, &num)
}

fn offset(rng: &mut ChaCha8Rng) -> f64 {
    let p = DetectionLossParams::default();
    let m = mask(rng, 64);
    let pred: Vec<f64> = (0..192).map(|_| rng.gen_range(0.0..4.0)).collect();
    let gt: Vec<f64> = (0..192).map(|_| rng.gen_range(0.0..4.0)).collect();
    let a = offset_loss(&pred, &gt, &m, &p).unwrap().grad;
    let num = central_diff(&pred, 1e-6, |x| offset_loss(x, &gt, &m, &p).unwrap().value);
    rel_err(&a, &num)
}

type KernelLoss = fn(&CorrespondenceSet, &CorrespondenceSet, f64, f64) -> ssm_core::Result<(f64, Vec<Point3>)>;

fn kernel(rng: &mut ChaCha8Rng, loss: Option<KernelLoss>) -> f64 {
    let p = DetectionLossParams::default();
    let gt: Vec<Point3> = (0..16).map(|_| random_point(rng, 5.0)).collect();
    let pred: Vec<Point3> = gt.iter().map(|g| g + random_point(rng, 0.5)).collect();
    let set = |v: Vec<Point3>| CorrespondenceSet::new(v, Frame::Local, 0).unwrap();
    let eval = |x: &[Point3]| match loss {
        None => sigmoid_weighted_mse(x, &gt, p.a, p.c).unwrap(),
        Some(f) => f(&set(x.to_vec()), &set(gt.clone()), p.a, p.c).unwrap(),
    };
    let a = flatten(&eval(&pred).1);
    let num = central_diff(&flatten(&pred), 1e-6, |x| eval(&unflatten(x)).0);
    rel_err(&a, &num)
}

fn head(rng: &mut ChaCha8Rng) -> f64 {
    let loss = DetectionLossParams::default();
    let m = 4;
    let mut store = ParamStore::<f64>::new();
    let head = LocalHead::new(&mut store, "head", 6, 2, m, &[5, 5], 1.0, rng);
    // Keep pre-activations off the ReLU kink.
    for p in store.params_mut() {
        p.value.iter_mut().for_each(|v| *v += 0.1 * gaussian(rng));
    }
    let local = well_spread(rng, m);
    let q = random_rotation(rng);
    let template = TemplateShape::from_correspondences(
        0,
        CorrespondenceSet::new(local.clone(), Frame::Local, 0).unwrap(),
        CorrespondenceSet::new(local.iter().map(|p| q * p).collect(), Frame::World, 0).unwrap(),
    )
    .unwrap();
    let bx = BoundingBox {
        anatomy: 0,
        center: [20.0, 21.0, 22.0],
        radii: [3.0, 2.0, 4.0],
        confidence: 1.0,
    };
    let features: Vec<f64> = (0..6).map(|_| gaussian(rng)).collect();
    let gt = CorrespondenceSet::new(
        template
            .local_template()
            .points()
            .iter()
            .map(|p| p + bx.center_point() + random_point(rng, 1.0))
            .collect(),
        Frame::Local,
        0,
    )
    .unwrap();
    let eval = |s: &ParamStore<f64>, f: &[f64]| {
        let roi = RoiFeature::new(f.to_vec(), 0, 2).unwrap();
        let p = head.predict_local(s, &roi, &bx, &template).unwrap();
        local_loss(&p.points, &gt, loss.a, loss.c).unwrap().0
    };
    let roi = RoiFeature::new(features.clone(), 0, 2).unwrap();
    let pred = head.predict_local(&store, &roi, &bx, &template).unwrap();
    let (_, up) = local_loss(&pred.points, &gt, loss.a, loss.c).unwrap();
    let mut grads = store.zero_grads();
    let dx = head.backward(&store, &pred, &up, &mut grads);

    let mut analytic = dx;
    let mut numeric = central_diff(&features, 1e-6, |f| eval(&store, f));
    let mut probe = store.clone();
    for (pi, g) in grads.grads.iter().enumerate() {
        for (j, &gj) in g.iter().enumerate() {
            let orig = probe.params()[pi].value[j];
            probe.params_mut()[pi].value[j] = orig + 1e-6;
            let fp = eval(&probe, &features);
            probe.params_mut()[pi].value[j] = orig - 1e-6;
            let fm = eval(&probe, &features);
            probe.params_mut()[pi].value[j] = orig;
            analytic.push(gj);
            numeric.push((fp - fm) / 2e-6);
        }
    }
    rel_err(&analytic, &numeric)
}

fn procrustes(rng: &mut ChaCha8Rng) -> f64 {
    let target = well_spread(rng, 12);
    let q = random_rotation(rng);
    let t = random_point(rng, 10.0);
    let source: Vec<Point3> = target.iter().map(|p| q * p + t + random_point(rng, 0.3)).collect();
    let up: Vec<Point3> = (0..12).map(|_| random_point(rng, 1.0)).collect();
    let set = |v: &[Point3]| CorrespondenceSet::new(v.to_vec(), Frame::Local, 0).unwrap();
    let analytic = flatten(&procrustes_backward(&set(&source), &set(&target), &up).unwrap());
    let numeric = central_diff(&flatten(&source), 1e-6, |x| {
        let src = unflatten(x);
        let tr = align_points(&src, &target).unwrap();
        src.iter().zip(&up).map(|(p, g)| tr.transform_point(p).dot(g)).sum()
    });
    rel_err(&analytic, &numeric)
}

pub fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let checks = [
        over_seeds("heatmap focal", 1e-4, 1, focal),
        over_seeds("radius masked MSE", 1e-4, 2, radius),
        over_seeds("offset sigmoid-weighted MSE", 1e-4, 3, offset),
        over_seeds("sigmoid-weighted MSE", 1e-4, 4, |r| kernel(r, None)),
        over_seeds("local loss", 1e-4, 5, |r| kernel(r, Some(local_loss))),
        over_seeds("world loss", 1e-4, 6, |r| kernel(r, Some(world_loss))),
        over_seeds("bounded local head", 1e-3, 7, head),
        over_seeds("procrustes backward", 1e-3, 8, procrustes),
    ];
    let secs = started.elapsed().as_secs_f64();
    let pass = checks.iter().all(|c| c.worst < c.limit) && secs < 120.0;
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.1e} (<{:.0e})", c.name, c.worst, c.limit))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("max relative error over {SEEDS} seeds: {detail}; {secs:.1}s < 120s"))
}
