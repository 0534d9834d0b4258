use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ssm_core::geometry::Point3;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_point(rng: &mut ChaCha8Rng, scale: f64) -> Point3 {
    Point3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * scale
}

pub fn flatten(p: &[Point3]) -> Vec<f64> {
    p.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

pub fn unflatten(x: &[f64]) -> Vec<Point3> {
    x.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

/// Anisotropic cloud with well separated principal extents.
pub fn well_spread(rng: &mut ChaCha8Rng, m: usize) -> Vec<Point3> {
    (0..m)
        .map(|_| Point3::new(6.0 * gaussian(rng), 3.0 * gaussian(rng), 1.5 * gaussian(rng)))
        .collect()
}
