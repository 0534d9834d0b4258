//! Box-conditioned adaptive average pooling over a feature pyramid.

use crate::backbone::FeaturePyramid;
use crate::detection::BoundingBox;
use crate::error::{Error, Result};
use crate::nn::layers::accumulate;
use crate::nn::{Scalar, Tensor};

/// Fixed-length ROI descriptor plus the anatomy one-hot.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiFeature<T> {
    pub vector: Vec<T>,
    pub anatomy_onehot: Vec<T>,
}

impl<T: Scalar> RoiFeature<T> {
    pub fn new(vector: Vec<T>, anatomy: usize, num_classes: usize) -> Result<Self> {
        if anatomy >= num_classes {
            return Err(Error::AnatomyMismatch {
                expected: num_classes.saturating_sub(1),
                got: anatomy,
            });
        }
        let mut anatomy_onehot = vec![T::zero(); num_classes];
        anatomy_onehot[anatomy] = T::one();
        Ok(Self {
            vector,
            anatomy_onehot,
        })
    }

    pub fn anatomy(&self) -> usize {
        self.anatomy_onehot
            .iter()
            .position(|&v| v == T::one())
            .expect("one-hot has a set entry")
    }

    /// `vector ⧺ onehot`, the MLP input.
    pub fn concatenated(&self) -> Vec<T> {
        let mut x = self.vector.clone();
        x.extend_from_slice(&self.anatomy_onehot);
        x
    }
}

/// Pooling cell bounds `[lo, hi)` per axis, for every level and cell.
#[derive(Clone, Debug)]
pub struct RoiCache {
    grid: usize,
    cells: Vec<Vec<[[usize; 2]; 3]>>,
}

pub fn roi_feature_len(level_channels: &[usize], pool_grid: usize) -> usize {
    level_channels.iter().sum::<usize>() * pool_grid.pow(3)
}

/// Level-resolution region `[lo, hi)` covered by the box, clamped, at least
/// one voxel wide.
fn level_span(center: f64, radius: f64, stride: usize, n: usize) -> [usize; 2] {
    let s = stride as f64;
    let lo = ((center - radius) / s).floor().max(0.0) as usize;
    let hi = ((center + radius) / s).ceil().min(n as f64).max(0.0) as usize;
    let lo = lo.min(n - 1);
    [lo, hi.max(lo + 1)]
}

/// Splits `[lo, hi)` into `g` adaptive cells.
fn adaptive_cells(span: [usize; 2], g: usize) -> Vec<[usize; 2]> {
    let len = span[1] - span[0];
    (0..g)
        .map(|i| [span[0] + i * len / g, span[0] + ((i + 1) * len).div_ceil(g)])
        .collect()
}

pub fn roi_pool<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    bx: &BoundingBox,
    full_dims: [usize; 3],
    pool_grid: usize,
) -> Result<(Vec<T>, RoiCache)> {
    assert!(pool_grid >= 1, "pool grid must be positive");
    let outside = (0..3).any(|a| {
        bx.center[a] + bx.radii[a] <= 0.0 || bx.center[a] - bx.radii[a] >= full_dims[a] as f64
    });
    if outside {
        return Err(Error::EmptyIntersection {
            anatomy: bx.anatomy,
        });
    }
    let g = pool_grid;
    let mut out = Vec::with_capacity(roi_feature_len(
        &pyramid.levels.iter().map(|l| l.channels).collect::<Vec<_>>(),
        g,
    ));
    let mut all_cells = Vec::with_capacity(pyramid.levels.len());
    for (level, &stride) in pyramid.levels.iter().zip(&pyramid.strides) {
        let d = level.dims;
        let per_axis: Vec<Vec<[usize; 2]>> = (0..3)
            .map(|a| adaptive_cells(level_span(bx.center[a], bx.radii[a], stride, d[a]), g))
            .collect();
        let mut cells = Vec::with_capacity(g * g * g);
        for cx in &per_axis[0] {
            for cy in &per_axis[1] {
                for cz in &per_axis[2] {
                    cells.push([*cx, *cy, *cz]);
                }
            }
        }
        for c in 0..level.channels {
            let ch = level.channel(c);
            for cell in &cells {
                let mut acc = 0.0f64;
                for x in cell[0][0]..cell[0][1] {
                    for y in cell[1][0]..cell[1][1] {
                        let base = (x * d[1] + y) * d[2];
                        for z in cell[2][0]..cell[2][1] {
                            acc += ch[base + z].as_f64();
                        }
                    }
                }
                let count = cell.iter().map(|r| r[1] - r[0]).product::<usize>();
                out.push(T::lit(acc / count as f64));
            }
        }
        all_cells.push(cells);
    }
    Ok((out, RoiCache { grid: g, cells: all_cells }))
}

/// Scatters the pooled-vector gradient back onto the pyramid levels.
pub fn roi_pool_backward<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    cache: &RoiCache,
    d_vector: &[T],
    level_grads: &mut [Option<Tensor<T>>],
) {
    let cells_per = cache.grid.pow(3);
    let mut k = 0;
    for (li, level) in pyramid.levels.iter().enumerate() {
        let d = level.dims;
        let mut g = Tensor::zeros(level.channels, d);
        for c in 0..level.channels {
            let ch = g.channel_mut(c);
            for cell in &cache.cells[li] {
                let count = cell.iter().map(|r| r[1] - r[0]).product::<usize>();
                let share = d_vector[k] / T::lit(count as f64);
                k += 1;
                for x in cell[0][0]..cell[0][1] {
                    for y in cell[1][0]..cell[1][1] {
                        let base = (x * d[1] + y) * d[2];
                        for z in cell[2][0]..cell[2][1] {
                            ch[base + z] += share;
                        }
                    }
                }
            }
        }
        debug_assert_eq!(cache.cells[li].len(), cells_per);
        accumulate(&mut level_grads[li], g);
    }
    debug_assert_eq!(k, d_vector.len());
}
