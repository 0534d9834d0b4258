//! Per-anatomy template shapes and medoid selection.

use crate::error::{Error, Result};
use crate::geometry::{CorrespondenceSet, Frame};
use crate::mesh::{star_mesh, TriMesh};
use crate::volume::BinaryMask;

/// Medoid local/world correspondences plus a surface mesh in the world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateShape {
    anatomy: usize,
    local_template: CorrespondenceSet,
    world_template: CorrespondenceSet,
    surface_mesh: TriMesh,
}

impl TemplateShape {
    /// Builds a template; the local correspondences are re-centered at the
    /// origin.
    pub fn new(
        anatomy: usize,
        local: CorrespondenceSet,
        world: CorrespondenceSet,
        surface_mesh: TriMesh,
    ) -> Result<Self> {
        if local.len() != world.len() {
            return Err(Error::MismatchedCardinality {
                left: local.len(),
                right: world.len(),
            });
        }
        if surface_mesh.vertices.len() < 4 {
            return Err(Error::InvalidMesh(format!(
                "template mesh has {} vertices, need at least 4",
                surface_mesh.vertices.len()
            )));
        }
        let c = local.centroid();
        let local_template = CorrespondenceSet::new(
            local.points().iter().map(|p| p - c).collect(),
            Frame::Local,
            anatomy,
        )?;
        let world_template =
            CorrespondenceSet::new(world.into_points(), Frame::World, anatomy)?;
        Ok(Self {
            anatomy,
            local_template,
            world_template,
            surface_mesh,
        })
    }

    /// Rebuilds a stored template without re-centering, so reading back a
    /// written template is bitwise exact. The local set must already be
    /// centered.
    pub(crate) fn from_stored(
        anatomy: usize,
        local: CorrespondenceSet,
        world: CorrespondenceSet,
        surface_mesh: TriMesh,
    ) -> Result<Self> {
        let c = local.centroid();
        let scale = local.points().iter().map(|p| p.amax()).fold(1.0, f64::max);
        if c.amax() > 1e-9 * scale {
            return Err(Error::InvalidConfig(format!(
                "stored local template of anatomy {anatomy} is not centered (centroid {c:?})"
            )));
        }
        let mut t = Self::new(anatomy, local.clone(), world, surface_mesh)?;
        t.local_template = local.with_frame(Frame::Local);
        Ok(t)
    }

    /// Template whose mesh triangulates the world correspondences directly.
    pub fn from_correspondences(
        anatomy: usize,
        local: CorrespondenceSet,
        world: CorrespondenceSet,
    ) -> Result<Self> {
        let mesh = star_mesh(world.points())?;
        Self::new(anatomy, local, world, mesh)
    }

    pub fn anatomy(&self) -> usize {
        self.anatomy
    }

    pub fn local_template(&self) -> &CorrespondenceSet {
        &self.local_template
    }

    pub fn world_template(&self) -> &CorrespondenceSet {
        &self.world_template
    }

    pub fn surface_mesh(&self) -> &TriMesh {
        &self.surface_mesh
    }

    pub fn num_points(&self) -> usize {
        self.local_template.len()
    }
}

/// Index of the mask closest (voxelwise L2) to the cohort's mean mask after
/// each mask is translated so its centroid sits at the grid center.
///
/// Ties resolve to the lowest index.
pub fn select_medoid_index(masks: &[&BinaryMask]) -> Result<usize> {
    let first = masks.first().ok_or(Error::EmptyCohort)?;
    let dims = first.dims;
    let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let mut centered = Vec::with_capacity(masks.len());
    for (i, m) in masks.iter().enumerate() {
        if m.dims != dims {
            return Err(Error::ShapeMismatch(format!(
                "mask {i} has dims {:?}, expected {dims:?}",
                m.dims
            )));
        }
        let c = m.centroid().ok_or(Error::EmptyMask { index: i })?;
        let shift = [0, 1, 2].map(|a| (center[a] - c[a]).round() as i64);
        centered.push(m.shifted(shift));
    }

    let n = centered.len() as f64;
    let mut mean = vec![0.0f64; first.len()];
    for m in &centered {
        for (acc, &v) in mean.iter_mut().zip(&m.data) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);

    let mut best = (0usize, f64::INFINITY);
    for (i, m) in centered.iter().enumerate() {
        let d: f64 = m
            .data
            .iter()
            .zip(&mean)
            .map(|(&v, &mu)| {
                let e = v as f64 - mu;
                e * e
            })
            .sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// Medoid selection over a cohort of `(mask, local, world)` triples.
pub fn select_medoid(
    anatomy: usize,
    masks: &[&BinaryMask],
    locals: &[&CorrespondenceSet],
    worlds: &[&CorrespondenceSet],
) -> Result<(usize, TemplateShape)> {
    if masks.len() != locals.len() || masks.len() != worlds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} masks, {} local sets, {} world sets",
            masks.len(),
            locals.len(),
            worlds.len()
        )));
    }
    let idx = select_medoid_index(masks)?;
    let template = TemplateShape::from_correspondences(
        anatomy,
        locals[idx].clone(),
        worlds[idx].clone(),
    )?;
    Ok((idx, template))
}
