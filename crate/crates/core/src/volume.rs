//! Dense 3D grids stored x-major (`z` varies fastest).

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume<T> {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<T>,
}

/// Image intensities.
pub type ScalarVolume = Volume<f32>;
/// Foreground = 1, background = 0.
pub type BinaryMask = Volume<u8>;

impl<T: Clone + Default> Volume<T> {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![T::default(); dims[0] * dims[1] * dims[2]],
        }
    }
}

impl<T> Volume<T> {
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let x = idx / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }
}

impl BinaryMask {
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Mean voxel coordinate of the foreground, `None` if empty.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0 {
                let c = self.coords(i);
                for a in 0..3 {
                    sum[a] += c[a] as f64;
                }
                n += 1;
            }
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }

    /// Foreground bounding extent `(min, max)` voxel coordinates.
    pub fn extent(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0 {
                any = true;
                let c = self.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Shift by an integer offset; voxels leaving the grid are dropped.
    pub fn shifted(&self, offset: [i64; 3]) -> BinaryMask {
        let mut out = BinaryMask::zeros(self.dims);
        out.spacing = self.spacing;
        for (i, &v) in self.data.iter().enumerate() {
            if v == 0 {
                continue;
            }
            let c = self.coords(i);
            let mut t = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let p = c[a] as i64 + offset[a];
                if p < 0 || p >= self.dims[a] as i64 {
                    inside = false;
                    break;
                }
                t[a] = p as usize;
            }
            if inside {
                let j = out.index(t[0], t[1], t[2]);
                out.data[j] = 1;
            }
        }
        out
    }
}
