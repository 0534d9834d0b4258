//! Plain-text particle files, Wavefront OBJ meshes, template bundles and
//! raw volume files.
//!
//! Volume files are a single JSON header line (`{"dims":[..],"spacing":[..],"dtype":".."}`)
//! terminated by `\n`, followed by the little-endian voxel blob (`f32` for
//! images, `u8` for masks) in x-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CorrespondenceSet, Frame, Point3};
use crate::mesh::TriMesh;
use crate::template::TemplateShape;
use crate::volume::{BinaryMask, ScalarVolume, Volume};

pub fn format_particles(points: &[Point3]) -> String {
    let mut s = String::with_capacity(points.len() * 48);
    for p in points {
        s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    s
}

pub fn parse_particles(text: &str, path: &Path) -> Result<Vec<Point3>> {
    let mut points = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let vals: Vec<f64> = trimmed
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::corrupt(path, offset, format!("bad number: {e}")))?;
            if vals.len() != 3 {
                return Err(Error::corrupt(
                    path,
                    offset,
                    format!("expected 3 values per line, found {}", vals.len()),
                ));
            }
            points.push(Point3::new(vals[0], vals[1], vals[2]));
        }
        offset += line.len() as u64;
    }
    Ok(points)
}

pub fn write_particles(path: &Path, set: &CorrespondenceSet) -> Result<()> {
    fs::write(path, format_particles(set.points())).map_err(|e| Error::io(path, e))
}

pub fn read_particles(path: &Path, frame: Frame, anatomy: usize) -> Result<CorrespondenceSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pts = parse_particles(&text, path)?;
    CorrespondenceSet::new(pts, frame, anatomy)
}

pub fn format_obj(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in &mesh.faces {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    s
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    fs::write(path, format_obj(mesh)).map_err(|e| Error::io(path, e))
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let mut toks = line.split_whitespace();
        let bad = |what: String| Error::corrupt(path, offset, what);
        match toks.next() {
            Some("v") => {
                let vals: Vec<f64> = toks
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("bad vertex: {e}")))?;
                if vals.len() < 3 {
                    return Err(bad("vertex needs 3 coordinates".into()));
                }
                vertices.push(Point3::new(vals[0], vals[1], vals[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = toks
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("bad face: {e}")))?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(bad("faces must be triangles with 1-based indices".into()));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
        offset += line.len() as u64;
    }
    TriMesh::new(vertices, faces)
}

/// Directory holding one anatomy's template.
pub fn template_dir(root: &Path, anatomy: usize) -> PathBuf {
    root.join(format!("anatomy_{anatomy}"))
}

/// Writes `anatomy_<k>/{local,world}.particles` and `anatomy_<k>/mesh.obj`.
pub fn write_template_bundle(root: &Path, templates: &[TemplateShape]) -> Result<()> {
    for t in templates {
        let dir = template_dir(root, t.anatomy());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_particles(&dir.join("local.particles"), t.local_template())?;
        write_particles(&dir.join("world.particles"), t.world_template())?;
        write_obj(&dir.join("mesh.obj"), t.surface_mesh())?;
    }
    Ok(())
}

pub fn read_template(root: &Path, anatomy: usize) -> Result<TemplateShape> {
    let dir = template_dir(root, anatomy);
    let local = read_particles(&dir.join("local.particles"), Frame::Local, anatomy)?;
    let world = read_particles(&dir.join("world.particles"), Frame::World, anatomy)?;
    let mesh = read_obj(&dir.join("mesh.obj"))?;
    TemplateShape::from_stored(anatomy, local, world, mesh)
}

/// Reads `anatomy_0 .. anatomy_{K-1}`, stopping at the first missing index.
pub fn read_template_bundle(root: &Path) -> Result<Vec<TemplateShape>> {
    let mut out = Vec::new();
    while template_dir(root, out.len()).is_dir() {
        out.push(read_template(root, out.len())?);
    }
    if out.is_empty() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no anatomy_<k> directories"),
        ));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

trait RawVoxel: Sized + Copy {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl RawVoxel for f32 {
    const DTYPE: &'static str = "f32le";
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl RawVoxel for u8 {
    const DTYPE: &'static str = "u8";
    const SIZE: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

fn write_raw<T: RawVoxel>(path: &Path, vol: &Volume<T>) -> Result<()> {
    let header = VolumeHeader {
        dims: vol.dims,
        spacing: vol.spacing,
        dtype: T::DTYPE.to_string(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    bytes.reserve(vol.data.len() * T::SIZE);
    for &v in &vol.data {
        v.put(&mut bytes);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn read_raw<T: RawVoxel>(path: &Path) -> Result<Volume<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::corrupt(path, bytes.len() as u64, "missing header terminator"))?;
    let header: VolumeHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::corrupt(path, 0, format!("bad header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::corrupt(
            path,
            0,
            format!("dtype {} where {} expected", header.dtype, T::DTYPE),
        ));
    }
    let n = header.dims.iter().product::<usize>();
    let body = &bytes[nl + 1..];
    let expected = n * T::SIZE;
    if body.len() != expected {
        return Err(Error::corrupt(
            path,
            bytes.len() as u64,
            format!(
                "voxel blob has {} bytes, header implies {expected}",
                body.len()
            ),
        ));
    }
    let data = body.chunks_exact(T::SIZE).map(T::get).collect();
    Ok(Volume {
        dims: header.dims,
        spacing: header.spacing,
        data,
    })
}

pub fn write_volume(path: &Path, vol: &ScalarVolume) -> Result<()> {
    write_raw(path, vol)
}

pub fn read_volume(path: &Path) -> Result<ScalarVolume> {
    read_raw(path)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_raw(path, mask)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    read_raw(path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
