//! Center-point detection maps: ground-truth rendering, strided center
//! decoding, per-class peak extraction and the detection loss kernels.
//!
//! Map layout is channel-major over the strided grid, `z` fastest. A center
//! `c` decomposes as `c = R·h + o` with integer strided voxel `h` and
//! sub-stride offset `o ∈ [0, R)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Clip applied to heatmap predictions before taking logarithms.
pub const HEATMAP_EPS: f64 = 1e-5;

pub const DEFAULT_PRESENCE_THRESHOLD: f64 = 0.3;

pub const DEFAULT_SPLAT_SIGMA_SCALE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionLossParams {
    pub alpha: f64,
    pub beta: f64,
    pub a: f64,
    pub c: f64,
}

impl Default for DetectionLossParams {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            beta: 4.0,
            a: 10.0,
            c: 0.2,
        }
    }
}

impl DetectionLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.a > 0.0 && self.c >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss params need alpha, beta, a > 0 and c >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub anatomy: usize,
    /// Full-resolution voxel coordinates.
    pub center: [f64; 3],
    /// Half-extents along each axis.
    pub radii: [f64; 3],
    pub confidence: f64,
}

impl BoundingBox {
    pub fn center_point(&self) -> Point3 {
        Point3::from(self.center)
    }

    pub fn radii_point(&self) -> Point3 {
        Point3::from(self.radii)
    }

    /// `2·max(radii)`, the displacement bound used by the local head.
    pub fn displacement_scale(&self) -> f64 {
        2.0 * self.radii.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.radii[a])
    }
}

/// Heatmap, radius and offset maps at stride `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMaps {
    pub num_classes: usize,
    /// Full-resolution volume dims.
    pub dims: [usize; 3],
    pub stride: usize,
    /// `K × S` values in `[0, 1]`.
    pub heatmap: Vec<f64>,
    /// `3 × S`, voxel units.
    pub radius: Vec<f64>,
    /// `3 × S`, voxel units.
    pub offset: Vec<f64>,
}

pub fn strided_dims(dims: [usize; 3], stride: usize) -> Result<[usize; 3]> {
    if stride == 0 || dims.iter().any(|&d| d == 0 || d % stride != 0) {
        return Err(Error::BadDims {
            dims,
            reason: format!("every dimension must be a positive multiple of stride {stride}"),
        });
    }
    Ok(dims.map(|d| d / stride))
}

impl DetectionMaps {
    pub fn zeros(num_classes: usize, dims: [usize; 3], stride: usize) -> Result<Self> {
        let g = strided_dims(dims, stride)?;
        let s = g[0] * g[1] * g[2];
        Ok(Self {
            num_classes,
            dims,
            stride,
            heatmap: vec![0.0; num_classes * s],
            radius: vec![0.0; 3 * s],
            offset: vec![0.0; 3 * s],
        })
    }

    pub fn grid(&self) -> [usize; 3] {
        self.dims.map(|d| d / self.stride)
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn voxel_index(&self, h: [usize; 3]) -> usize {
        let g = self.grid();
        (h[0] * g[1] + h[1]) * g[2] + h[2]
    }

    pub fn voxel_coords(&self, idx: usize) -> [usize; 3] {
        let g = self.grid();
        [idx / (g[1] * g[2]), (idx / g[2]) % g[1], idx % g[2]]
    }

    pub fn vector_at(map: &[f64], voxels: usize, idx: usize) -> [f64; 3] {
        [map[idx], map[voxels + idx], map[2 * voxels + idx]]
    }

    /// `K H W D R` header, then one line per channel (heatmap channels,
    /// then radius, then offset).
    pub fn to_dump(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {}\n",
            self.num_classes, self.dims[0], self.dims[1], self.dims[2], self.stride
        );
        let n = self.voxels();
        for chan in self
            .heatmap
            .chunks(n)
            .chain(self.radius.chunks(n))
            .chain(self.offset.chunks(n))
        {
            let line: Vec<String> = chan.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::ShapeMismatch(format!("map dump: {why}"));
        let mut lines = text.lines();
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad header")))
            .collect::<Result<_>>()?;
        if header.len() != 5 {
            return Err(bad("header needs K H W D R"));
        }
        let mut maps = Self::zeros(header[0], [header[1], header[2], header[3]], header[4])?;
        let n = maps.voxels();
        let mut values = Vec::with_capacity((maps.num_classes + 6) * n);
        for line in lines {
            for t in line.split_whitespace() {
                values.push(t.parse::<f64>().map_err(|_| bad("bad value"))?);
            }
        }
        if values.len() != (maps.num_classes + 6) * n {
            return Err(bad("wrong number of values"));
        }
        let k = maps.num_classes * n;
        maps.heatmap.copy_from_slice(&values[..k]);
        maps.radius.copy_from_slice(&values[k..k + 3 * n]);
        maps.offset.copy_from_slice(&values[k + 3 * n..]);
        Ok(maps)
    }
}

/// Ground-truth maps plus the supervised (center) voxel of each box.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedTargets {
    pub maps: DetectionMaps,
    /// Strided voxel index of each box center, in box order, deduplicated.
    pub mask: Vec<usize>,
}

/// Strided voxel and sub-stride offset of a full-resolution center.
pub fn encode_center(center: &[f64; 3], stride: usize) -> ([usize; 3], [f64; 3]) {
    let r = stride as f64;
    let h = center.map(|c| (c / r).floor());
    let o = [0, 1, 2].map(|a| center[a] - r * h[a]);
    (h.map(|v| v as usize), o)
}

/// `c = h·R + o` per axis.
pub fn decode_center(heat_voxel: [usize; 3], offset: [f64; 3], stride: usize) -> [f64; 3] {
    [0, 1, 2].map(|a| heat_voxel[a] as f64 * stride as f64 + offset[a])
}

pub fn render_ground_truth(
    boxes: &[BoundingBox],
    num_classes: usize,
    dims: [usize; 3],
    stride: usize,
    splat_sigma_scale: f64,
) -> Result<RenderedTargets> {
    let mut maps = DetectionMaps::zeros(num_classes, dims, stride)?;
    let grid = maps.grid();
    let n = maps.voxels();
    let mut seen = vec![false; num_classes];
    let mut mask = Vec::with_capacity(boxes.len());
    for b in boxes {
        if b.anatomy >= num_classes {
            return Err(Error::ShapeMismatch(format!(
                "box class {} outside 0..{num_classes}",
                b.anatomy
            )));
        }
        if std::mem::replace(&mut seen[b.anatomy], true) {
            return Err(Error::DuplicateClass(b.anatomy));
        }
        if (0..3).any(|a| !(b.center[a] >= 0.0 && b.center[a] < dims[a] as f64)) {
            return Err(Error::CenterOutOfBounds {
                center: b.center,
                dims,
            });
        }
        let (h, o) = encode_center(&b.center, stride);
        let min_r = b.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let sigma = (min_r / (splat_sigma_scale * stride as f64)).max(1.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let chan = &mut maps.heatmap[b.anatomy * n..(b.anatomy + 1) * n];
        for x in 0..grid[0] {
            let dx = x as f64 - h[0] as f64;
            for y in 0..grid[1] {
                let dy = y as f64 - h[1] as f64;
                for z in 0..grid[2] {
                    let dz = z as f64 - h[2] as f64;
                    let v = (-(dx * dx + dy * dy + dz * dz) * inv).exp();
                    let i = (x * grid[1] + y) * grid[2] + z;
                    if v > chan[i] {
                        chan[i] = v;
                    }
                }
            }
        }
        let idx = maps.voxel_index(h);
        for a in 0..3 {
            maps.radius[a * n + idx] = b.radii[a];
            maps.offset[a * n + idx] = o[a];
        }
        if !mask.contains(&idx) {
            mask.push(idx);
        }
    }
    Ok(RenderedTargets { maps, mask })
}

/// Per-class argmax decoding; classes whose peak is below
/// `presence_threshold` produce no box.
pub fn extract_detections(maps: &DetectionMaps, presence_threshold: f64) -> Vec<BoundingBox> {
    (0..maps.num_classes)
        .filter_map(|k| extract_class(maps, k, presence_threshold))
        .collect()
}

pub fn extract_class(maps: &DetectionMaps, k: usize, presence_threshold: f64) -> Option<BoundingBox> {
    let n = maps.voxels();
    let chan = &maps.heatmap[k * n..(k + 1) * n];
    let mut best = 0usize;
    for (i, &v) in chan.iter().enumerate() {
        if v > chan[best] {
            best = i;
        }
    }
    let confidence = chan[best];
    if !(confidence >= presence_threshold) {
        return None;
    }
    let h = maps.voxel_coords(best);
    let o = DetectionMaps::vector_at(&maps.offset, n, best);
    let mut center = decode_center(h, o, maps.stride);
    for a in 0..3 {
        let hi = maps.dims[a] as f64;
        center[a] = center[a].clamp(0.0, hi - 1e-6 * hi);
    }
    let radii = DetectionMaps::vector_at(&maps.radius, n, best).map(|r| r.max(1.0));
    Some(BoundingBox {
        anatomy: k,
        center,
        radii,
        confidence,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Penalty-reduced focal loss over a heatmap, normalized by the number of
/// positive (`gt == 1`) voxels.
pub fn heatmap_focal_loss(pred: &[f64], gt: &[f64], params: &DetectionLossParams) -> Result<LossGrad> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "heatmap prediction has {} values, target {}",
            pred.len(),
            gt.len()
        )));
    }
    let (alpha, beta) = (params.alpha, params.beta);
    let n_pos = gt.iter().filter(|&&g| g == 1.0).count().max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for ((&p_raw, &g), dp) in pred.iter().zip(gt).zip(grad.iter_mut()) {
        let p = p_raw.clamp(HEATMAP_EPS, 1.0 - HEATMAP_EPS);
        let inside = p_raw > HEATMAP_EPS && p_raw < 1.0 - HEATMAP_EPS;
        let (term, dterm) = if g == 1.0 {
            let q = 1.0 - p;
            (
                q.powf(alpha) * p.ln(),
                -alpha * q.powf(alpha - 1.0) * p.ln() + q.powf(alpha) / p,
            )
        } else {
            let w = (1.0 - g).powf(beta);
            let lq = (1.0 - p).ln();
            (
                w * p.powf(alpha) * lq,
                w * (alpha * p.powf(alpha - 1.0) * lq - p.powf(alpha) / (1.0 - p)),
            )
        };
        total += term;
        if inside {
            *dp = -dterm / n_pos;
        }
    }
    Ok(LossGrad {
        value: -total / n_pos,
        grad,
    })
}

/// Mean over masked voxels of the squared 3-vector radius error.
pub fn radius_masked_mse(pred: &[f64], gt: &[f64], mask: &[usize]) -> Result<LossGrad> {
    if pred.len() != gt.len() || !pred.len().is_multiple_of(3) {
        return Err(Error::ShapeMismatch(format!(
            "radius maps have {} and {} values",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() / 3;
    let mut grad = vec![0.0; pred.len()];
    if mask.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let inv = 1.0 / mask.len() as f64;
    let mut total = 0.0;
    for &v in mask {
        for a in 0..3 {
            let i = a * n + v;
            let e = pred[i] - gt[i];
            total += e * e;
            grad[i] += 2.0 * e * inv;
        }
    }
    Ok(LossGrad {
        value: total * inv,
        grad,
    })
}

/// Per-element sigmoid weight `1 / (1 + exp(a·(c − e)))`.
#[inline]
pub fn sigmoid_weight(e: f64, a: f64, c: f64) -> f64 {
    1.0 / (1.0 + (a * (c - e)).exp())
}

/// Mean over elements of `e² / (1 + exp(a·(c − e)))`, `e` the Euclidean
/// error of each 3-vector element. The gradient includes the weight's
/// dependence on `e`.
pub fn sigmoid_weighted_mse(pred: &[Point3], gt: &[Point3], a: f64, c: f64) -> Result<(f64, Vec<Point3>)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted elements vs {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let diff = p - g;
            let e = diff.norm();
            let w = sigmoid_weight(e, a, c);
            total += e * e * w;
            // d/de (e² w) / e = 2w + e·a·w(1−w); finite at e = 0.
            let scale = 2.0 * w + e * a * w * (1.0 - w);
            diff * (scale * inv)
        })
        .collect();
    Ok((total * inv, grad))
}

/// Offset loss: the sigmoid-weighted kernel applied at masked voxels.
pub fn offset_loss(pred: &[f64], gt: &[f64], mask: &[usize], params: &DetectionLossParams) -> Result<LossGrad> {
    if pred.len() != gt.len() || !pred.len().is_multiple_of(3) {
        return Err(Error::ShapeMismatch(format!(
            "offset maps have {} and {} values",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() / 3;
    let mut grad = vec![0.0; pred.len()];
    if mask.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let p: Vec<Point3> = mask
        .iter()
        .map(|&v| Point3::from(DetectionMaps::vector_at(pred, n, v)))
        .collect();
    let g: Vec<Point3> = mask
        .iter()
        .map(|&v| Point3::from(DetectionMaps::vector_at(gt, n, v)))
        .collect();
    let (value, gp) = sigmoid_weighted_mse(&p, &g, params.a, params.c)?;
    for (&v, d) in mask.iter().zip(&gp) {
        for a in 0..3 {
            grad[a * n + v] += d[a];
        }
    }
    Ok(LossGrad { value, grad })
}
