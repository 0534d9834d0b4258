//! Incremental 3D convex hull, used to triangulate star-shaped point sets.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::Point3;

#[derive(Clone, Copy, Debug)]
struct Face {
    v: [usize; 3],
    normal: Point3,
    offset: f64,
    alive: bool,
}

impl Face {
    fn new(points: &[Point3], v: [usize; 3]) -> Self {
        let n = (points[v[1]] - points[v[0]]).cross(&(points[v[2]] - points[v[0]]));
        let norm = n.norm();
        let normal = if norm > 0.0 { n / norm } else { n };
        Self {
            v,
            normal,
            offset: normal.dot(&points[v[0]]),
            alive: true,
        }
    }

    fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Outward-oriented triangles of the convex hull of `points`.
///
/// Returned indices refer to the input slice. Points strictly inside the
/// hull (or within tolerance of an existing face) are left unreferenced.
pub fn convex_hull(points: &[Point3]) -> Result<Vec<[usize; 3]>> {
    let n = points.len();
    if n < 4 {
        return Err(Error::InvalidMesh(format!(
            "convex hull needs at least 4 points, got {n}"
        )));
    }
    let scale = points
        .iter()
        .map(|p| p.amax())
        .fold(0.0f64, f64::max)
        .max(1.0);
    let eps = 1e-10 * scale;

    // Initial tetrahedron from extreme points.
    let i0 = 0;
    let i1 = (0..n)
        .max_by(|&a, &b| {
            (points[a] - points[i0])
                .norm_squared()
                .total_cmp(&(points[b] - points[i0]).norm_squared())
        })
        .unwrap();
    let dir = (points[i1] - points[i0]).normalize();
    let line_dist = |p: &Point3| {
        let d = p - points[i0];
        (d - dir * d.dot(&dir)).norm()
    };
    let i2 = (0..n)
        .max_by(|&a, &b| line_dist(&points[a]).total_cmp(&line_dist(&points[b])))
        .unwrap();
    let plane = Face::new(points, [i0, i1, i2]);
    let i3 = (0..n)
        .max_by(|&a, &b| {
            plane
                .signed_distance(&points[a])
                .abs()
                .total_cmp(&plane.signed_distance(&points[b]).abs())
        })
        .unwrap();
    if line_dist(&points[i2]) <= eps || plane.signed_distance(&points[i3]).abs() <= eps {
        return Err(Error::InvalidMesh("points are coplanar".into()));
    }

    let interior = (points[i0] + points[i1] + points[i2] + points[i3]) / 4.0;
    let mut faces: Vec<Face> = Vec::new();
    for tri in [[i0, i1, i2], [i0, i1, i3], [i0, i2, i3], [i1, i2, i3]] {
        let mut f = Face::new(points, tri);
        if f.signed_distance(&interior) > 0.0 {
            f = Face::new(points, [tri[0], tri[2], tri[1]]);
        }
        faces.push(f);
    }

    let seed = [i0, i1, i2, i3];
    for p in 0..n {
        if seed.contains(&p) {
            continue;
        }
        let pt = points[p];
        let visible: Vec<usize> = faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.alive && f.signed_distance(&pt) > eps)
            .map(|(i, _)| i)
            .collect();
        if visible.is_empty() {
            continue;
        }
        let mut edges: HashSet<(usize, usize)> = HashSet::new();
        for &fi in &visible {
            let v = faces[fi].v;
            for e in 0..3 {
                edges.insert((v[e], v[(e + 1) % 3]));
            }
        }
        let mut horizon = Vec::new();
        for &fi in &visible {
            let v = faces[fi].v;
            for e in 0..3 {
                let (a, b) = (v[e], v[(e + 1) % 3]);
                if !edges.contains(&(b, a)) {
                    horizon.push((a, b));
                }
            }
            faces[fi].alive = false;
        }
        for (a, b) in horizon {
            faces.push(Face::new(points, [a, b, p]));
        }
    }

    Ok(faces.into_iter().filter(|f| f.alive).map(|f| f.v).collect())
}
