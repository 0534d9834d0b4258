//! Sample records and the on-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/samples/<id>/image.vol
//! <dir>/samples/<id>/anatomy_<k>.mask
//! <dir>/samples/<id>/anatomy_<k>.local.particles
//! <dir>/samples/<id>/anatomy_<k>.world.particles
//! <dir>/templates/anatomy_<k>/{local,world}.particles, mesh.obj   (optional)
//! ```
//!
//! The manifest lists dataset-wide properties, the split assignment and, per
//! sample, the relative file paths and bounding boxes. Box coordinates are
//! stored as JSON numbers that round-trip exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detection::BoundingBox;
use crate::error::{Error, Result};
use crate::geometry::{CorrespondenceSet, Frame};
use crate::io::{read_json, read_mask, read_particles, read_template_bundle, read_volume, write_json, write_mask, write_particles, write_template_bundle, write_volume};
use crate::template::TemplateShape;
use crate::volume::{BinaryMask, ScalarVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Ground truth of one anatomy in one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomyRecord {
    pub bbox: BoundingBox,
    pub local: CorrespondenceSet,
    pub world: CorrespondenceSet,
    pub mask: Option<BinaryMask>,
}

impl AnatomyRecord {
    pub fn anatomy(&self) -> usize {
        self.bbox.anatomy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub volume: ScalarVolume,
    /// Present anatomies, at most one per class, in class order.
    pub anatomies: Vec<AnatomyRecord>,
}

impl SampleRecord {
    pub fn anatomy(&self, k: usize) -> Option<&AnatomyRecord> {
        self.anatomies.iter().find(|a| a.anatomy() == k)
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.anatomies.iter().map(|a| a.bbox).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub num_points: usize,
    pub dims: [usize; 3],
    pub samples: Vec<SampleRecord>,
    pub templates: Vec<TemplateShape>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Restricts the dataset to one anatomy class, relabelled as class 0.
    pub fn single_class(&self, k: usize) -> Result<Dataset> {
        if k >= self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "class {k} out of range for {} classes",
                self.num_classes
            )));
        }
        let relabel = |a: &AnatomyRecord| -> Result<AnatomyRecord> {
            Ok(AnatomyRecord {
                bbox: BoundingBox {
                    anatomy: 0,
                    ..a.bbox
                },
                local: CorrespondenceSet::new(a.local.points().to_vec(), Frame::Local, 0)?,
                world: CorrespondenceSet::new(a.world.points().to_vec(), Frame::World, 0)?,
                mask: a.mask.clone(),
            })
        };
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(SampleRecord {
                    id: s.id.clone(),
                    split: s.split,
                    volume: s.volume.clone(),
                    anatomies: s.anatomy(k).map(relabel).transpose()?.into_iter().collect(),
                })
            })
            .collect::<Result<_>>()?;
        let templates = self
            .templates
            .get(k)
            .map(|t| {
                TemplateShape::new(
                    0,
                    CorrespondenceSet::new(t.local_template().points().to_vec(), Frame::Local, 0)?,
                    CorrespondenceSet::new(t.world_template().points().to_vec(), Frame::World, 0)?,
                    t.surface_mesh().clone(),
                )
            })
            .transpose()?
            .into_iter()
            .collect();
        Ok(Dataset {
            num_classes: 1,
            num_points: self.num_points,
            dims: self.dims,
            samples,
            templates,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestAnatomy {
    anatomy: usize,
    center: [f64; 3],
    radii: [f64; 3],
    local: String,
    world: String,
    mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    split: Split,
    volume: String,
    anatomies: Vec<ManifestAnatomy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    num_points: usize,
    dims: [usize; 3],
    templates: Option<String>,
    samples: Vec<ManifestSample>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let rel = PathBuf::from("samples").join(&s.id);
        let sdir = dir.join(&rel);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let vol = rel.join("image.vol");
        write_volume(&dir.join(&vol), &s.volume)?;
        let mut anatomies = Vec::with_capacity(s.anatomies.len());
        for a in &s.anatomies {
            let k = a.anatomy();
            let local = rel.join(format!("anatomy_{k}.local.particles"));
            let world = rel.join(format!("anatomy_{k}.world.particles"));
            write_particles(&dir.join(&local), &a.local)?;
            write_particles(&dir.join(&world), &a.world)?;
            let mask = match &a.mask {
                Some(m) => {
                    let p = rel.join(format!("anatomy_{k}.mask"));
                    write_mask(&dir.join(&p), m)?;
                    Some(path_string(&p))
                }
                None => None,
            };
            anatomies.push(ManifestAnatomy {
                anatomy: k,
                center: a.bbox.center,
                radii: a.bbox.radii,
                local: path_string(&local),
                world: path_string(&world),
                mask,
            });
        }
        samples.push(ManifestSample {
            id: s.id.clone(),
            split: s.split,
            volume: path_string(&vol),
            anatomies,
        });
    }
    let templates = if dataset.templates.is_empty() {
        None
    } else {
        write_template_bundle(&dir.join("templates"), &dataset.templates)?;
        Some("templates".to_string())
    };
    write_json(
        &dir.join(MANIFEST),
        &Manifest {
            num_classes: dataset.num_classes,
            num_points: dataset.num_points,
            dims: dataset.dims,
            templates,
            samples,
        },
    )
}

fn path_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Options controlling what [`read_dataset_with`] loads.
#[derive(Clone, Copy, Debug)]
pub struct ReadOptions {
    pub masks: bool,
    pub splits: Option<&'static [Split]>,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self {
            masks: true,
            splits: None,
        }
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    read_dataset_with(dir, ReadOptions::default())
}

pub fn read_dataset_with(dir: &Path, opts: ReadOptions) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let mut samples = Vec::new();
    for s in manifest.samples {
        if opts.splits.is_some_and(|sp| !sp.contains(&s.split)) {
            continue;
        }
        let volume = read_volume(&dir.join(&s.volume))?;
        if volume.dims != manifest.dims {
            return Err(Error::ShapeMismatch(format!(
                "sample {} has dims {:?}, manifest says {:?}",
                s.id, volume.dims, manifest.dims
            )));
        }
        let mut anatomies = Vec::with_capacity(s.anatomies.len());
        for a in s.anatomies {
            let mask = match (&a.mask, opts.masks) {
                (Some(p), true) => Some(read_mask(&dir.join(p))?),
                _ => None,
            };
            anatomies.push(AnatomyRecord {
                bbox: BoundingBox {
                    anatomy: a.anatomy,
                    center: a.center,
                    radii: a.radii,
                    confidence: 1.0,
                },
                local: read_particles(&dir.join(&a.local), Frame::Local, a.anatomy)?,
                world: read_particles(&dir.join(&a.world), Frame::World, a.anatomy)?,
                mask,
            });
        }
        samples.push(SampleRecord {
            id: s.id,
            split: s.split,
            volume,
            anatomies,
        });
    }
    let templates = match manifest.templates {
        Some(t) => read_template_bundle(&dir.join(t))?,
        None => Vec::new(),
    };
    Ok(Dataset {
        num_classes: manifest.num_classes,
        num_points: manifest.num_points,
        dims: manifest.dims,
        samples,
        templates,
    })
}
