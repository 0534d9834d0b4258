use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssm_core::detection::{encode_center, extract_detections, render_ground_truth, BoundingBox};
use ssm_core::geometry::{
    align_points, apply_transform, center_at, random_rotation, rotation_from_euler, CorrespondenceSet, Frame,
    Point3,
};
use ssm_core::heads::{displace, predict_world, LocalHead};
use ssm_core::nn::ParamStore;
use ssm_core::roi::RoiFeature;
use ssm_core::schedule::{schedule_at, LossWeightSchedule, TeacherForcingSchedule};
use ssm_core::synth::{generate_dataset, SplitSizes, SyntheticSpec};
use ssm_core::template::TemplateShape;

use crate::util::{gaussian, random_point, well_spread};
use crate::Outcome;

fn residual(a: &[Point3], b: &[Point3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum()
}

pub fn procrustes_oracle() -> Outcome {
    let started = Instant::now();
    let mut worst_r = 0.0f64;
    let mut worst_t = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(6..=30);
        let s = well_spread(&mut rng, m);
        let q = random_rotation(&mut rng);
        let t = random_point(&mut rng, 20.0);
        let moved: Vec<Point3> = s.iter().map(|p| q * p + t).collect();
        let found = align_points(&moved, &s).expect("well-posed alignment");
        worst_r = worst_r.max((found.rotation() - q.transpose()).amax());
        worst_t = worst_t.max((found.translation() + q.transpose() * t).amax());
    }

    // Least-squares optimality against a 24³ Euler grid, each grid rotation
    // paired with its optimal (centroid-matching) translation.
    let steps = 24;
    let angle = |i: usize| -PI + 2.0 * PI * i as f64 / steps as f64;
    let mut grid = Vec::with_capacity(steps * steps * steps);
    for i in 0..steps {
        for j in 0..steps {
            for k in 0..steps {
                grid.push(rotation_from_euler(angle(i), angle(j), angle(k)));
            }
        }
    }
    let mut beaten = 0;
    let mut closest_gap = f64::INFINITY;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let m = rng.gen_range(4..=10);
        let src = well_spread(&mut rng, m);
        let q = random_rotation(&mut rng);
        let dst: Vec<Point3> = src.iter().map(|p| q * p + random_point(&mut rng, 1.0)).collect();
        let tr = align_points(&src, &dst).expect("alignment");
        let set = CorrespondenceSet::new(src.clone(), Frame::Local, 0).unwrap();
        let best = residual(apply_transform(&tr, &set).points(), &dst);
        let cs = src.iter().sum::<Point3>() / m as f64;
        let cd = dst.iter().sum::<Point3>() / m as f64;
        let grid_min = grid
            .iter()
            .map(|r| {
                let moved: Vec<Point3> = src.iter().map(|p| r * (p - cs) + cd).collect();
                residual(&moved, &dst)
            })
            .fold(f64::INFINITY, f64::min);
        if grid_min < best - 1e-9 {
            beaten += 1;
        }
        closest_gap = closest_gap.min(grid_min - best);
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        worst_r < 1e-8 && worst_t < 1e-8 && beaten == 0 && secs < 10.0,
        format!(
            "max rotation error {worst_r:.2e}, max translation error {worst_t:.2e}; \
             grid beat the solver on {beaten}/10 instances (smallest grid excess {closest_gap:.3e}); {secs:.2}s < 10s"
        ),
    )
}

pub fn codec_round_trip() -> Outcome {
    let started = Instant::now();
    let (stride, dims, k) = (4usize, [64usize; 3], 3usize);
    let r = stride as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exact = 0;
    let mut offsets_ok = true;
    for _ in 0..100 {
        let mut boxes: Vec<BoundingBox> = Vec::with_capacity(k);
        while boxes.len() < k {
            let center = [0, 1, 2].map(|a| rng.gen_range(r..dims[a] as f64 - r));
            let (voxel, offset) = encode_center(&center, stride);
            if boxes.iter().any(|b| encode_center(&b.center, stride).0 == voxel) {
                continue;
            }
            offsets_ok &= offset.iter().all(|o| (0.0..r).contains(o));
            boxes.push(BoundingBox {
                anatomy: boxes.len(),
                center,
                radii: [0, 1, 2].map(|_| rng.gen_range(1.0..16.0)),
                confidence: 1.0,
            });
        }
        let targets = render_ground_truth(&boxes, k, dims, stride, 3.0).expect("render");
        let found = extract_detections(&targets.maps, 0.3);
        let same = found.len() == k
            && found
                .iter()
                .zip(&boxes)
                .all(|(f, b)| f.anatomy == b.anatomy && f.center == b.center && f.radii == b.radii);
        exact += usize::from(same);
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        exact == 100 && offsets_ok && secs < 30.0,
        format!("{exact}/100 boxes decoded with zero center and radius error; offsets in [0, R): {offsets_ok}; {secs:.2}s < 30s"),
    )
}

fn random_template(rng: &mut ChaCha8Rng, m: usize) -> TemplateShape {
    let local = well_spread(rng, m);
    let q = random_rotation(rng);
    let world: Vec<Point3> = local.iter().map(|p| q * p).collect();
    TemplateShape::from_correspondences(
        0,
        CorrespondenceSet::new(local, Frame::Local, 0).unwrap(),
        CorrespondenceSet::new(world, Frame::World, 0).unwrap(),
    )
    .unwrap()
}

/// Raw outputs spanning small, saturating and non-finite-magnitude values.
fn extreme_raw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            match rng.gen_range(0..6) {
                0 => 0.1 * gaussian(rng),
                1 => 3.0 * gaussian(rng),
                2 => 30.0 * gaussian(rng),
                3 => sign * 1e3,
                4 => sign * f64::MAX,
                _ => sign * f64::INFINITY,
            }
        })
        .collect()
}

pub fn bound_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = 16;
    let mut violations = 0usize;
    let mut closest = f64::INFINITY;
    let mut check = |base: &[Point3], pts: &[Point3], d: f64| {
        for (p, b) in pts.iter().zip(base) {
            let dev = (p - b).amax();
            closest = closest.min(d - dev);
            if !(dev < d) {
                violations += 1;
            }
        }
    };
    // 900 outputs through the displacement map, 100 through a randomly
    // initialized head with large output gain.
    for i in 0..1000 {
        let template = random_template(&mut rng, m);
        let bx = BoundingBox {
            anatomy: 0,
            center: [0, 1, 2].map(|_| rng.gen_range(10.0..54.0)),
            radii: [0, 1, 2].map(|_| rng.gen_range(1.0..15.0)),
            confidence: 1.0,
        };
        let base = center_at(template.local_template(), &bx.center_point());
        let d = bx.displacement_scale();
        if i < 900 {
            let (pts, _) = displace(base.points(), d, &extreme_raw(&mut rng, 3 * m));
            check(base.points(), &pts, d);
        } else {
            let mut store = ParamStore::<f64>::new();
            let head = LocalHead::new(&mut store, "head", 8, 1, m, &[16], 50.0, &mut rng);
            let roi = RoiFeature::new((0..8).map(|_| 100.0 * gaussian(&mut rng)).collect(), 0, 1).unwrap();
            let pred = head.predict_local(&store, &roi, &bx, &template).expect("head forward");
            check(base.points(), pred.points.points(), d);
        }
    }
    Outcome::new(
        violations == 0,
        format!("{violations} of {} coordinates reached ±d; smallest margin {closest:.3e}", 1000 * m * 3),
    )
}

pub fn world_rigid_invariance() -> Outcome {
    let ds = generate_dataset(&SyntheticSpec {
        splits: SplitSizes {
            train: 3,
            val: 0,
            test: 0,
        },
        ..SyntheticSpec::default()
    })
    .expect("synthetic data");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let s = &ds.samples[case % ds.samples.len()];
        let a = &s.anatomies[case % s.anatomies.len()];
        let template = &ds.templates[a.anatomy()];
        let noisy: Vec<Point3> = a.local.points().iter().map(|p| p + random_point(&mut rng, 0.5)).collect();
        let local = CorrespondenceSet::new(noisy.clone(), Frame::Local, a.anatomy()).unwrap();
        let q = random_rotation(&mut rng);
        let t = random_point(&mut rng, 15.0);
        let moved = CorrespondenceSet::new(noisy.iter().map(|p| q * p + t).collect(), Frame::Local, a.anatomy()).unwrap();
        let (w0, _) = predict_world(&local, template).expect("align");
        let (w1, _) = predict_world(&moved, template).expect("align");
        let rmse = (residual(w0.points(), w1.points()) / (3 * w0.len()) as f64).sqrt();
        worst = worst.max(rmse);
    }
    Outcome::new(worst < 1e-6, format!("max world RMSE change {worst:.2e} over 50 perturbations (< 1e-6)"))
}

pub fn schedule_conformance() -> Outcome {
    let w = LossWeightSchedule::default();
    let tf = TeacherForcingSchedule::default();
    let mut problems: Vec<String> = Vec::new();
    let s0 = schedule_at(0, &w, &tf);
    if (s0.lambda_h, s0.lambda_r, s0.lambda_o, s0.lambda_l, s0.lambda_w) != (1.0, 0.01, 1.0, 0.0, 0.0) {
        problems.push(format!("epoch 0 weights {:?}", s0.weights()));
    }
    let s30 = schedule_at(30, &w, &tf);
    if s30.lambda_l != 2.0 || s30.lambda_h != 40.0 {
        problems.push(format!("epoch 30: λ_l {} λ_h {}", s30.lambda_l, s30.lambda_h));
    }
    if schedule_at(50, &w, &tf).lambda_w != 2.0 {
        problems.push("λ_w below 2 at epoch 50".into());
    }
    let ramp = |e: usize, start: usize| if e < start { 0.0 } else { (0.2 * (e - start) as f64).min(2.0) };
    let decay = |e: usize, a: usize, b: usize| {
        if e <= a {
            1.0
        } else if e >= b {
            0.0
        } else {
            1.0 - (e - a) as f64 / (b - a) as f64
        }
    };
    for e in 0..=300 {
        let s = schedule_at(e, &w, &tf);
        let expect = [
            if e < 20 { 1.0 } else { 40.0 },
            0.01,
            1.0,
            ramp(e, 20),
            ramp(e, 40),
        ];
        let ok = s.weights().iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12)
            && (s.p_gt_box - decay(e, 20, 120)).abs() < 1e-12
            && (s.p_gt_local - decay(e, 40, 140)).abs() < 1e-12;
        if !ok {
            problems.push(format!("epoch {e}: {s:?}"));
        }
    }
    let detail = if problems.is_empty() {
        "epochs 0-300 match the phase-wise values".to_string()
    } else {
        format!("{} mismatches, first: {}", problems.len(), problems[0])
    };
    Outcome::new(problems.is_empty(), detail)
}
