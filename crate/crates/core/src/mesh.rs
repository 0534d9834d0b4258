//! Triangle meshes, a bounding-volume hierarchy for closest-point queries,
//! and the symmetric sampled surface-to-surface distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Point3;

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::InvalidMesh(format!(
                "face {f:?} references a vertex beyond {}",
                vertices.len()
            )));
        }
        Ok(Self { vertices, faces })
    }

    pub fn triangle(&self, f: usize) -> [Point3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| triangle_area(&self.triangle(f))).sum()
    }

    /// Sum of signed tetrahedron volumes; positive for outward-oriented closed meshes.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn map_vertices(&self, f: impl Fn(&Point3) -> Point3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }
}

fn triangle_area(t: &[Point3; 3]) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

/// `n` near-uniform unit directions on a golden-angle spiral.
pub fn fibonacci_sphere(n: usize) -> Vec<Point3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let theta = golden * i as f64;
            Point3::new(r * theta.cos(), r * theta.sin(), z)
        })
        .collect()
}

/// Triangulate a star-shaped point set by taking the convex hull of its
/// directions about the centroid.
pub fn star_mesh(points: &[Point3]) -> Result<TriMesh> {
    let c = crate::geometry::centroid(points);
    let dirs: Vec<Point3> = points
        .iter()
        .map(|p| {
            let d = p - c;
            let n = d.norm();
            if n > 0.0 {
                d / n
            } else {
                d
            }
        })
        .collect();
    let faces = crate::hull::convex_hull(&dirs)?;
    TriMesh::new(points.to_vec(), faces)
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> Point3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Point3,
    hi: Point3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Point3::repeat(f64::INFINITY),
            hi: Point3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Point3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn distance_squared(&self, p: &Point3) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let v = if p[a] < self.lo[a] {
                self.lo[a] - p[a]
            } else if p[a] > self.hi[a] {
                p[a] - self.hi[a]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// Axis-aligned bounding-volume hierarchy over a mesh's triangles.
pub struct MeshIndex<'a> {
    mesh: &'a TriMesh,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> MeshIndex<'a> {
    pub fn build(mesh: &'a TriMesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let centroids: Vec<Point3> = (0..mesh.faces.len())
            .map(|f| {
                let t = mesh.triangle(f);
                (t[0] + t[1] + t[2]) / 3.0
            })
            .collect();
        let mut index = MeshIndex {
            mesh,
            order: (0..mesh.faces.len()).collect(),
            nodes: Vec::new(),
        };
        let n = index.order.len();
        index.build_node(&centroids, 0, n);
        Ok(index)
    }

    fn build_node(&mut self, centroids: &[Point3], start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &f in &self.order[start..end] {
            for p in self.mesh.triangle(f) {
                bounds.grow(&p);
            }
            cbounds.grow(&centroids[f]);
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { bounds, start, end });
            return id;
        }
        let ext = cbounds.hi - cbounds.lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis])
        });
        self.nodes.push(Node::Leaf {
            bounds,
            start,
            end,
        });
        let left = self.build_node(centroids, start, mid);
        let right = self.build_node(centroids, mid, end);
        self.nodes[id] = Node::Inner {
            bounds,
            left,
            right,
        };
        id
    }

    /// Closest point on the mesh and its distance to `p`.
    pub fn closest_point(&self, p: &Point3) -> (Point3, f64) {
        let mut best = f64::INFINITY;
        let mut best_pt = Point3::zeros();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.bounds().distance_squared(p) >= best {
                continue;
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[*start..*end] {
                        let [a, b, c] = self.mesh.triangle(f);
                        let q = closest_point_on_triangle(p, &a, &b, &c);
                        let d = (q - p).norm_squared();
                        if d < best {
                            best = d;
                            best_pt = q;
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bounds().distance_squared(p);
                    let dr = self.nodes[*right].bounds().distance_squared(p);
                    if dl < dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        (best_pt, best.sqrt())
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        self.closest_point(p).1
    }
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface<R: Rng + ?Sized>(mesh: &TriMesh, n: usize, rng: &mut R) -> Result<Vec<Point3>> {
    if mesh.faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += triangle_area(&mesh.triangle(f));
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::InvalidMesh("mesh has zero surface area".into()));
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let f = cumulative.partition_point(|&c| c <= u).min(mesh.faces.len() - 1);
            let [a, b, c] = mesh.triangle(f);
            let r1 = rng.gen::<f64>().sqrt();
            let r2 = rng.gen::<f64>();
            a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceDistance {
    pub mean: f64,
    pub max: f64,
}

pub const DEFAULT_SURFACE_SAMPLES: usize = 10_000;

/// Symmetric sampled surface distance: the mean of the two directed mean
/// distances and the larger of the two directed maxima.
///
/// Both meshes are sampled from a stream seeded by `seed`, so swapping the
/// arguments gives bit-identical results.
pub fn surface_to_surface(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<SurfaceDistance> {
    let (mean_ab, max_ab) = directed(a, b, samples, seed)?;
    let (mean_ba, max_ba) = directed(b, a, samples, seed)?;
    Ok(SurfaceDistance {
        mean: 0.5 * (mean_ab + mean_ba),
        max: max_ab.max(max_ba),
    })
}

fn directed(from: &TriMesh, to: &TriMesh, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = sample_surface(from, samples.max(1), &mut rng)?;
    let index = MeshIndex::build(to)?;
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for p in &pts {
        let d = index.distance(p);
        sum += d;
        max = max.max(d);
    }
    Ok((sum / pts.len() as f64, max))
}

/// Distance from every vertex of `mesh` to the surface `reference`.
pub fn vertex_distances(mesh: &TriMesh, reference: &TriMesh) -> Result<Vec<f64>> {
    let index = MeshIndex::build(reference)?;
    Ok(mesh.vertices.iter().map(|v| index.distance(v)).collect())
}
