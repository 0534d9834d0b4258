//! Correspondence containers, rigid transforms and Procrustes alignment.
//!
//! Point sets are ordered: index `m` refers to the same anatomical location
//! in every sample, and nothing in this module ever reorders points.

use nalgebra::{Matrix3, Rotation3, Vector3, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Tolerance on the rotation invariants (orthonormality, unit determinant).
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Relative threshold on the second singular value of the centered
/// cross-covariance below which the alignment rotation is not unique.
const RANK_TOLERANCE: f64 = 1e-10;

/// Relative threshold on the smallest pairwise spectral denominator used by
/// the rotation differential.
pub const SPECTRAL_GAP_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    /// Image space, voxel units.
    Local,
    /// Population space after rigid alignment to the template.
    World,
}

/// An ordered set of `M` 3D correspondence points for one anatomy.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    points: Vec<Point3>,
    frame: Frame,
    anatomy: usize,
}

impl CorrespondenceSet {
    pub fn new(points: Vec<Point3>, frame: Frame, anatomy: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidCorrespondences("empty point set".into()));
        }
        if let Some(m) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidCorrespondences(format!(
                "point {m} has a non-finite coordinate"
            )));
        }
        Ok(Self {
            points,
            frame,
            anatomy,
        })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn anatomy(&self) -> usize {
        self.anatomy
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    /// Flattened `[x0, y0, z0, x1, ...]` coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn translated(&self, offset: &Point3) -> Self {
        Self {
            points: self.points.iter().map(|p| p + offset).collect(),
            frame: self.frame,
            anatomy: self.anatomy,
        }
    }
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let sum = points.iter().fold(Point3::zeros(), |acc, p| acc + p);
    sum / points.len() as f64
}

/// A proper rigid motion `p ↦ rotation·p + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Point3,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Point3) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(orth <= ROTATION_TOLERANCE) {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (deviation {orth:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(Error::InvalidTransform(format!(
                "rotation determinant is {det}, reflections are not allowed"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidTransform("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Point3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Point3 {
        &self.translation
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Map every point through `t`, preserving order and anatomy.
pub fn apply_transform(t: &RigidTransform, pts: &CorrespondenceSet) -> CorrespondenceSet {
    CorrespondenceSet {
        points: pts.points.iter().map(|p| t.transform_point(p)).collect(),
        frame: pts.frame,
        anatomy: pts.anatomy,
    }
}

/// Translate a centered template so its centroid lands on `center`.
pub fn center_at(template_local: &CorrespondenceSet, center: &Point3) -> CorrespondenceSet {
    debug_assert!(template_local.centroid().norm() < 1e-6 * (1.0 + center.norm()));
    template_local.translated(center)
}

/// Intermediate quantities of a Kabsch solve, kept for the backward pass.
#[derive(Clone, Debug)]
struct KabschSolution {
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    singular: Vector3<f64>,
    signs: Vector3<f64>,
    rotation: Matrix3<f64>,
    source_centroid: Point3,
    target_centroid: Point3,
}

fn kabsch(source: &[Point3], target: &[Point3]) -> Result<KabschSolution> {
    if source.len() != target.len() {
        return Err(Error::MismatchedCardinality {
            left: source.len(),
            right: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 points, got {}",
            source.len()
        )));
    }
    let sc = centroid(source);
    let tc = centroid(target);
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - sc) * (t - tc).transpose();
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateConfiguration(
            "non-finite cross-covariance".into(),
        ));
    }
    let svd = SVD::new(h, true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v requested").transpose();
    let singular = svd.singular_values;
    if !(singular[0] > 0.0) || singular[1] <= RANK_TOLERANCE * singular[0] {
        return Err(Error::DegenerateConfiguration(format!(
            "cross-covariance rank < 2 (singular values {:.3e}, {:.3e}, {:.3e})",
            singular[0], singular[1], singular[2]
        )));
    }
    // Kabsch sign correction keeps det(rotation) = +1.
    let d = if (v * u.transpose()).determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let signs = Vector3::new(1.0, 1.0, d);
    let rotation = v * Matrix3::from_diagonal(&signs) * u.transpose();
    Ok(KabschSolution {
        u,
        v,
        singular,
        signs,
        rotation,
        source_centroid: sc,
        target_centroid: tc,
    })
}

/// Least-squares proper rigid transform taking `source` onto `target`.
pub fn procrustes_align(
    source: &CorrespondenceSet,
    target: &CorrespondenceSet,
) -> Result<RigidTransform> {
    align_points(source.points(), target.points())
}

pub fn align_points(source: &[Point3], target: &[Point3]) -> Result<RigidTransform> {
    let k = kabsch(source, target)?;
    Ok(RigidTransform {
        rotation: k.rotation,
        translation: k.target_centroid - k.rotation * k.source_centroid,
    })
}

/// Gradient of a scalar loss with respect to the source points of an
/// alignment, given `upstream[m] = ∂loss/∂(𝒯·source)[m]`.
///
/// Both the rotation and the translation of 𝒯 are treated as functions of
/// the source points. The rotation differential follows from the symmetry
/// of `rotation · H` at the optimum, which yields the skew generator
/// `x_ij = (d_j e_ji − d_i e_ij) / (d_i s_j + d_j s_i)` in the SVD basis.
pub fn procrustes_backward(
    source: &CorrespondenceSet,
    target: &CorrespondenceSet,
    upstream: &[Point3],
) -> Result<Vec<Point3>> {
    points_backward(source.points(), target.points(), upstream)
}

pub fn points_backward(
    source: &[Point3],
    target: &[Point3],
    upstream: &[Point3],
) -> Result<Vec<Point3>> {
    if upstream.len() != source.len() {
        return Err(Error::MismatchedCardinality {
            left: source.len(),
            right: upstream.len(),
        });
    }
    let k = kabsch(source, target)?;
    let s = &k.singular;
    let d = &k.signs;
    let mut min_gap = f64::INFINITY;
    let mut denom = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let den = d[i] * s[j] + d[j] * s[i];
                denom[(i, j)] = den;
                min_gap = min_gap.min(den.abs());
            }
        }
    }
    let threshold = SPECTRAL_GAP_TOLERANCE * s[0];
    if min_gap < threshold {
        return Err(Error::NearDegenerateSpectrum {
            gap: min_gap,
            threshold,
        });
    }

    let r = k.rotation;
    let rt = r.transpose();
    // Translation-path term: Rᵀ g_k minus its mean.
    let rotated: Vec<Point3> = upstream.iter().map(|g| rt * g).collect();
    let mean_rot = centroid(&rotated);

    // Rotation-path term.
    let mut gbar = Matrix3::zeros();
    for (g, p) in upstream.iter().zip(source) {
        gbar += g * (p - k.source_centroid).transpose();
    }
    let a = k.u.transpose() * rt * gbar * k.u;
    let mut ge = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                ge[(i, j)] = d[i] * (a[(j, i)] - a[(i, j)]) / denom[(i, j)];
            }
        }
    }
    let gh = k.u * ge * k.v.transpose();

    Ok(rotated
        .iter()
        .zip(target)
        .map(|(rg, t)| rg - mean_rot + gh * (t - k.target_centroid))
        .collect())
}

/// Gradient with the transform held constant: `∂/∂source = Rᵀ·upstream`.
pub fn detached_backward(rotation: &Matrix3<f64>, upstream: &[Point3]) -> Vec<Point3> {
    let rt = rotation.transpose();
    upstream.iter().map(|g| rt * g).collect()
}

/// Rotation from intrinsic-free Euler angles (radians), `Rz·Ry·Rx`.
pub fn rotation_from_euler(rx: f64, ry: f64, rz: f64) -> Matrix3<f64> {
    Rotation3::from_euler_angles(rx, ry, rz).into_inner()
}

/// Uniformly distributed proper rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            let quat = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q[0] / n,
                q[1] / n,
                q[2] / n,
                q[3] / n,
            ));
            return quat.to_rotation_matrix().into_inner();
        }
    }
}

/// Sum of squared point distances, `Σ_m ‖a_m − b_m‖²`.
pub fn squared_residual(a: &[Point3], b: &[Point3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum()
}
