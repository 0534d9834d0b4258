//! Synthetic multi-anatomy volumes with analytic correspondences.
//!
//! Every anatomy class is a family of (super)ellipsoids. Point `m` of every
//! sample is the image of the same Fibonacci-sphere direction under that
//! sample's shape map, so correspondences agree index-wise across the cohort.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{AnatomyRecord, Dataset, SampleRecord, Split};
use crate::detection::BoundingBox;
use crate::error::{Error, Result};
use crate::geometry::{align_points, rotation_from_euler, CorrespondenceSet, Frame, Point3};
use crate::hull::convex_hull;
use crate::mesh::{fibonacci_sphere, TriMesh};
use crate::template::{select_medoid_index, TemplateShape};
use crate::volume::{BinaryMask, ScalarVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassSpec {
    pub base_radii: [f64; 3],
    /// Each radius is drawn uniformly from `base ± radii_jitter`.
    pub radii_jitter: f64,
    pub center: [f64; 3],
    pub center_jitter: [f64; 3],
    /// Euler angles drawn uniformly from `±rotation_jitter_deg`.
    pub rotation_jitter_deg: [f64; 3],
    pub intensity: f64,
    /// Superellipsoid exponent; 2 is an ellipsoid.
    pub exponent: f64,
}

impl Default for ClassSpec {
    fn default() -> Self {
        Self {
            base_radii: [8.0, 6.0, 5.0],
            radii_jitter: 1.5,
            center: [32.0, 32.0, 32.0],
            center_jitter: [3.0; 3],
            rotation_jitter_deg: [20.0; 3],
            intensity: 1.0,
            exponent: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 200,
            val: 20,
            test: 20,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub num_points: usize,
    pub seed: u64,
    pub background: f64,
    pub noise_sigma: f64,
    /// Vertex count of the template surface meshes.
    pub mesh_vertices: usize,
    pub splits: SplitSizes,
    pub classes: Vec<ClassSpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [1.0; 3],
            num_points: 128,
            seed: 0,
            background: 0.0,
            noise_sigma: 0.1,
            mesh_vertices: 642,
            splits: SplitSizes::default(),
            classes: vec![
                ClassSpec {
                    base_radii: [10.0, 7.0, 5.0],
                    center: [18.0, 18.0, 20.0],
                    intensity: 0.5,
                    ..ClassSpec::default()
                },
                ClassSpec {
                    base_radii: [6.0, 9.0, 12.0],
                    center: [46.0, 20.0, 44.0],
                    intensity: 0.75,
                    ..ClassSpec::default()
                },
                ClassSpec {
                    base_radii: [8.0, 8.0, 6.0],
                    center: [30.0, 46.0, 30.0],
                    intensity: 1.0,
                    ..ClassSpec::default()
                },
            ],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInfeasible(m));
        if self.classes.is_empty() {
            return bad("no anatomy classes".into());
        }
        if self.num_points < 4 || self.mesh_vertices < 4 {
            return bad("num_points and mesh_vertices must be at least 4".into());
        }
        if self.dims.contains(&0) || !(self.noise_sigma >= 0.0) {
            return bad("dims must be positive and noise_sigma non-negative".into());
        }
        for (k, c) in self.classes.iter().enumerate() {
            let rmin = c.base_radii.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(c.radii_jitter >= 0.0) || rmin - c.radii_jitter <= 0.0 {
                return bad(format!("class {k}: radii jitter {} leaves non-positive radii", c.radii_jitter));
            }
            if !(c.exponent > 0.0) {
                return bad(format!("class {k}: exponent must be positive"));
            }
            let rotates = c.rotation_jitter_deg.iter().any(|&a| a != 0.0);
            // Largest reach along any axis once rotated.
            let rmax = c.base_radii.iter().cloned().fold(0.0, f64::max) + c.radii_jitter;
            let reach = if c.exponent < 2.0 { rmax * 3f64.sqrt() } else { rmax };
            for a in 0..3 {
                let ext = if rotates { reach } else { c.base_radii[a] + c.radii_jitter };
                let lo = c.center[a] - c.center_jitter[a] - ext;
                let hi = c.center[a] + c.center_jitter[a] + ext;
                if lo < 0.0 || hi > (self.dims[a] - 1) as f64 {
                    return bad(format!(
                        "class {k} can extend to [{lo}, {hi}] on axis {a}, outside [0, {}]",
                        self.dims[a] - 1
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One drawn shape: `x = center + rotation · g(u)` with `g` the radial
/// superellipsoid map.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInstance {
    pub center: Point3,
    pub rotation: Matrix3<f64>,
    pub radii: Point3,
    pub exponent: f64,
}

impl ShapeInstance {
    /// Body-frame surface point in unit direction `u`.
    pub fn body_point(&self, u: &Point3) -> Point3 {
        let e = self.exponent;
        let s = (0..3).map(|i| u[i].abs().powf(e)).sum::<f64>().powf(1.0 / e);
        self.radii.component_mul(u) / s
    }

    pub fn surface_point(&self, u: &Point3) -> Point3 {
        self.center + self.rotation * self.body_point(u)
    }

    pub fn contains(&self, x: &Point3) -> bool {
        let q = self.rotation.transpose() * (x - self.center);
        (0..3)
            .map(|i| (q[i] / self.radii[i]).abs().powf(self.exponent))
            .sum::<f64>()
            <= 1.0
    }

    /// Axis-aligned half-extents about the center.
    pub fn half_extents(&self) -> [f64; 3] {
        if self.exponent == 2.0 {
            let q = &self.rotation;
            [0, 1, 2].map(|i| {
                (0..3)
                    .map(|j| (q[(i, j)] * self.radii[j]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
        } else {
            let mut ext = [0.0f64; 3];
            for u in fibonacci_sphere(20_000) {
                let p = self.rotation * self.body_point(&u);
                for a in 0..3 {
                    ext[a] = ext[a].max(p[a].abs());
                }
            }
            ext
        }
    }

    pub fn bounding_box(&self, anatomy: usize) -> BoundingBox {
        BoundingBox {
            anatomy,
            center: [self.center.x, self.center.y, self.center.z],
            radii: self.half_extents(),
            confidence: 1.0,
        }
    }

    pub fn rasterize(&self, dims: [usize; 3]) -> BinaryMask {
        let mut mask = BinaryMask::zeros(dims);
        let ext = self.half_extents();
        let range = |a: usize| {
            let lo = (self.center[a] - ext[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + ext[a]).ceil() as usize).min(dims[a] - 1);
            lo..=hi
        };
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    if self.contains(&Point3::new(x as f64, y as f64, z as f64)) {
                        let i = mask.index(x, y, z);
                        mask.data[i] = 1;
                    }
                }
            }
        }
        mask
    }
}

fn uniform_sym<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..=half)
    } else {
        0.0
    }
}

pub fn draw_instance<R: Rng + ?Sized>(class: &ClassSpec, rng: &mut R) -> ShapeInstance {
    let radii = Point3::from(class.base_radii.map(|r| r + uniform_sym(rng, class.radii_jitter)));
    let center = Point3::from([0, 1, 2].map(|a| class.center[a] + uniform_sym(rng, class.center_jitter[a])));
    let ang = class.rotation_jitter_deg.map(|d| uniform_sym(rng, d).to_radians());
    ShapeInstance {
        center,
        rotation: rotation_from_euler(ang[0], ang[1], ang[2]),
        radii,
        exponent: class.exponent,
    }
}

/// Shape of class `class` in its canonical pose: base radii, no rotation,
/// centered at the origin.
pub fn canonical_instance(class: &ClassSpec) -> ShapeInstance {
    ShapeInstance {
        center: Point3::zeros(),
        rotation: Matrix3::identity(),
        radii: Point3::from(class.base_radii),
        exponent: class.exponent,
    }
}

/// Per-sample generator; `index` is the sample's position across all splits.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct Drawn {
    id: String,
    split: Split,
    volume: ScalarVolume,
    shapes: Vec<ShapeInstance>,
    masks: Vec<BinaryMask>,
    locals: Vec<Vec<Point3>>,
}

fn draw_sample(spec: &SyntheticSpec, dirs: &[Point3], index: usize, split: Split, id: String) -> Drawn {
    let mut rng = sample_rng(spec.seed, index);
    let shapes: Vec<ShapeInstance> = spec.classes.iter().map(|c| draw_instance(c, &mut rng)).collect();
    let masks: Vec<BinaryMask> = shapes.iter().map(|s| s.rasterize(spec.dims)).collect();
    let mut volume = ScalarVolume::zeros(spec.dims);
    volume.spacing = spec.spacing;
    volume.data.iter_mut().for_each(|v| *v = spec.background as f32);
    for (mask, class) in masks.iter().zip(&spec.classes) {
        for (v, &m) in volume.data.iter_mut().zip(&mask.data) {
            if m != 0 {
                *v = class.intensity as f32;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        volume
            .data
            .iter_mut()
            .for_each(|v| *v += noise.sample(&mut rng) as f32);
    }
    let locals = shapes
        .iter()
        .map(|s| dirs.iter().map(|u| s.surface_point(u)).collect())
        .collect();
    Drawn {
        id,
        split,
        volume,
        shapes,
        masks,
        locals,
    }
}

/// Generates all splits, selects per-class medoid templates over the
/// training split, and expresses world correspondences in each template's
/// frame.
///
/// The world template of class `k` is the medoid's local correspondences
/// rigidly aligned to the canonical shape; each sample's world
/// correspondences are its locals aligned to that world template.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.splits.train == 0 {
        return Err(Error::EmptyCohort);
    }
    let dirs = fibonacci_sphere(spec.num_points);
    let plan: Vec<(Split, usize)> = [
        (Split::Train, spec.splits.train),
        (Split::Val, spec.splits.val),
        (Split::Test, spec.splits.test),
    ]
    .iter()
    .flat_map(|&(s, n)| (0..n).map(move |i| (s, i)))
    .collect();
    let drawn: Vec<Drawn> = plan
        .iter()
        .enumerate()
        .map(|(index, &(split, i))| {
            let name = match split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            draw_sample(spec, &dirs, index, split, format!("{name}_{i:04}"))
        })
        .collect();

    let mesh_dirs = fibonacci_sphere(spec.mesh_vertices);
    let mesh_faces = convex_hull(&mesh_dirs)?;
    let train: Vec<&Drawn> = drawn.iter().filter(|d| d.split == Split::Train).collect();
    let mut templates = Vec::with_capacity(spec.classes.len());
    for (k, class) in spec.classes.iter().enumerate() {
        let masks: Vec<&BinaryMask> = train.iter().map(|d| &d.masks[k]).collect();
        let medoid = train[select_medoid_index(&masks)?];
        let canonical: Vec<Point3> = dirs.iter().map(|u| canonical_instance(class).surface_point(u)).collect();
        let to_world = align_points(&medoid.locals[k], &canonical)?;
        let world: Vec<Point3> = medoid.locals[k].iter().map(|p| to_world.transform_point(p)).collect();
        let shape = &medoid.shapes[k];
        let vertices = mesh_dirs
            .iter()
            .map(|u| to_world.transform_point(&shape.surface_point(u)))
            .collect();
        templates.push(TemplateShape::new(
            k,
            CorrespondenceSet::new(medoid.locals[k].clone(), Frame::Local, k)?,
            CorrespondenceSet::new(world, Frame::World, k)?,
            TriMesh::new(vertices, mesh_faces.clone())?,
        )?);
    }

    let samples = drawn
        .into_iter()
        .map(|d| {
            let anatomies = (0..spec.classes.len())
                .map(|k| {
                    let target = templates[k].world_template().points();
                    let t = align_points(&d.locals[k], target)?;
                    let world = d.locals[k].iter().map(|p| t.transform_point(p)).collect();
                    Ok(AnatomyRecord {
                        bbox: d.shapes[k].bounding_box(k),
                        local: CorrespondenceSet::new(d.locals[k].clone(), Frame::Local, k)?,
                        world: CorrespondenceSet::new(world, Frame::World, k)?,
                        mask: Some(d.masks[k].clone()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SampleRecord {
                id: d.id,
                split: d.split,
                volume: d.volume,
                anatomies,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        num_classes: spec.classes.len(),
        num_points: spec.num_points,
        dims: spec.dims,
        samples,
        templates,
    })
}
