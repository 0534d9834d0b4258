//! Forward/backward primitives on channel-major 3D feature grids.

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::{matmul, Scalar};

/// `C × X × Y × Z` feature grid, z fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Adds `g` into an optional accumulator.
pub fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Saved activations of a convolution: the unfolded input.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    col: Vec<T>,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
}

impl<T> ConvCache<T> {
    pub fn out_dims(&self) -> [usize; 3] {
        self.out_dims
    }
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel.pow(3);
        let weight = store.add_he(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel, kernel],
            fan_in,
            gain,
            rng,
        );
        let bias = store.add_const(format!("{name}.bias"), vec![cout], 0.0);
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|n| (n + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &Tensor<T>, out: [usize; 3]) -> Vec<T> {
        let k = self.kernel;
        let nout = out[0] * out[1] * out[2];
        let [nx, ny, nz] = x.dims;
        let mut col = vec![T::zero(); self.cin * k * k * k * nout];
        let off = |o: usize, kk: usize, n: usize| -> Option<usize> {
            let i = (o * self.stride + kk) as isize - self.pad as isize;
            (i >= 0 && (i as usize) < n).then_some(i as usize)
        };
        for c in 0..self.cin {
            let src = x.channel(c);
            for kx in 0..k {
                for ky in 0..k {
                    for kz in 0..k {
                        let row = ((c * k + kx) * k + ky) * k + kz;
                        let dst = &mut col[row * nout..(row + 1) * nout];
                        for ox in 0..out[0] {
                            let Some(ix) = off(ox, kx, nx) else { continue };
                            for oy in 0..out[1] {
                                let Some(iy) = off(oy, ky, ny) else { continue };
                                let base = (ix * ny + iy) * nz;
                                let obase = (ox * out[1] + oy) * out[2];
                                for oz in 0..out[2] {
                                    if let Some(iz) = off(oz, kz, nz) {
                                        dst[obase + oz] = src[base + iz];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T], in_dims: [usize; 3], out: [usize; 3]) -> Tensor<T> {
        let k = self.kernel;
        let nout = out[0] * out[1] * out[2];
        let [nx, ny, nz] = in_dims;
        let mut x = Tensor::zeros(self.cin, in_dims);
        let off = |o: usize, kk: usize, n: usize| -> Option<usize> {
            let i = (o * self.stride + kk) as isize - self.pad as isize;
            (i >= 0 && (i as usize) < n).then_some(i as usize)
        };
        for c in 0..self.cin {
            let dst = x.channel_mut(c);
            for kx in 0..k {
                for ky in 0..k {
                    for kz in 0..k {
                        let row = ((c * k + kx) * k + ky) * k + kz;
                        let src = &col[row * nout..(row + 1) * nout];
                        for ox in 0..out[0] {
                            let Some(ix) = off(ox, kx, nx) else { continue };
                            for oy in 0..out[1] {
                                let Some(iy) = off(oy, ky, ny) else { continue };
                                let base = (ix * ny + iy) * nz;
                                let obase = (ox * out[1] + oy) * out[2];
                                for oz in 0..out[2] {
                                    if let Some(iz) = off(oz, kz, nz) {
                                        dst[base + iz] += src[obase + oz];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.cin, "conv input channels");
        let out_dims = self.out_dims(x.dims);
        let nout = out_dims[0] * out_dims[1] * out_dims[2];
        let col = if self.is_pointwise() {
            x.data.clone()
        } else {
            self.im2col(x, out_dims)
        };
        let ck = self.cin * self.kernel.pow(3);
        let mut y = Tensor::zeros(self.cout, out_dims);
        let bias = store.get(self.bias);
        for (c, &b) in bias.iter().enumerate() {
            y.channel_mut(c).iter_mut().for_each(|v| *v = b);
        }
        matmul(
            false,
            false,
            self.cout,
            nout,
            ck,
            T::one(),
            store.get(self.weight),
            &col,
            T::one(),
            &mut y.data,
        );
        (
            y,
            ConvCache {
                col,
                in_dims: x.dims,
                out_dims,
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input` is set.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let nout = cache.out_dims.iter().product::<usize>();
        let ck = self.cin * self.kernel.pow(3);
        matmul(
            false,
            true,
            self.cout,
            ck,
            nout,
            T::one(),
            &dy.data,
            &cache.col,
            T::one(),
            grads.get_mut(self.weight),
        );
        let db = grads.get_mut(self.bias);
        for (c, g) in db.iter_mut().enumerate() {
            *g += dy.channel(c).iter().copied().sum::<T>();
        }
        if !need_input {
            return None;
        }
        let mut dcol = vec![T::zero(); ck * nout];
        matmul(
            true,
            false,
            ck,
            nout,
            self.cout,
            T::one(),
            store.get(self.weight),
            &dy.data,
            T::zero(),
            &mut dcol,
        );
        if self.is_pointwise() {
            Some(Tensor {
                channels: self.cin,
                dims: cache.in_dims,
                data: dcol,
            })
        } else {
            Some(self.col2im(&dcol, cache.in_dims, cache.out_dims))
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "groups must divide channels");
        Self {
            channels,
            groups,
            eps: 1e-5,
            gamma: store.add_const(format!("{name}.gamma"), vec![channels], 1.0),
            beta: store.add_const(format!("{name}.beta"), vec![channels], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, GroupNormCache<T>) {
        let n = x.voxels();
        let cg = self.channels / self.groups;
        let span = cg * n;
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut y = Tensor::zeros(x.channels, x.dims);
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let chunk = &x.data[g * span..(g + 1) * span];
            let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / span as f64;
            let var = chunk
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / span as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            let (m, s) = (T::lit(mean), T::lit(is));
            for c in g * cg..(g + 1) * cg {
                let (ga, be) = (gamma[c], beta[c]);
                for i in c * n..(c + 1) * n {
                    let h = (x.data[i] - m) * s;
                    xhat[i] = h;
                    y.data[i] = h * ga + be;
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &GroupNormCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Tensor<T> {
        let n = dy.voxels();
        let cg = self.channels / self.groups;
        let span = (cg * n) as f64;
        let gamma = store.get(self.gamma);
        {
            let dgamma = grads.get_mut(self.gamma);
            for c in 0..self.channels {
                let mut acc = T::zero();
                for i in c * n..(c + 1) * n {
                    acc += dy.data[i] * cache.xhat[i];
                }
                dgamma[c] += acc;
            }
        }
        {
            let dbeta = grads.get_mut(self.beta);
            for c in 0..self.channels {
                dbeta[c] += dy.channel(c).iter().copied().sum::<T>();
            }
        }
        let mut dx = Tensor::zeros(dy.channels, dy.dims);
        for g in 0..self.groups {
            let mut sum_dh = 0.0f64;
            let mut sum_dh_h = 0.0f64;
            for c in g * cg..(g + 1) * cg {
                for i in c * n..(c + 1) * n {
                    let dh = (dy.data[i] * gamma[c]).as_f64();
                    sum_dh += dh;
                    sum_dh_h += dh * cache.xhat[i].as_f64();
                }
            }
            let mean_dh = T::lit(sum_dh / span);
            let mean_dh_h = T::lit(sum_dh_h / span);
            let is = T::lit(cache.inv_std[g]);
            for c in g * cg..(g + 1) * cg {
                for i in c * n..(c + 1) * n {
                    let dh = dy.data[i] * gamma[c];
                    dx.data[i] = is * (dh - mean_dh - cache.xhat[i] * mean_dh_h);
                }
            }
        }
        dx
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Masks `dy` by the positive entries of the ReLU output `y`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, mut dy: Tensor<T>) -> Tensor<T> {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dy
}

/// Source taps of output index `o` along an axis of length `n` under ×2
/// linear interpolation with half-voxel centers and clamped edges.
fn taps(o: usize, n: usize) -> (usize, usize) {
    let i = o / 2;
    let j = if o % 2 == 0 { i.saturating_sub(1) } else { (i + 1).min(n - 1) };
    (i, j)
}

/// Doubles one axis of a `outer × n × inner` array.
fn lerp_axis<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let (near, far) = (T::lit(0.75), T::lit(0.25));
    let mut y = vec![T::zero(); outer * 2 * n * inner];
    for a in 0..outer {
        for o in 0..2 * n {
            let (i, j) = taps(o, n);
            let (si, sj, d) = ((a * n + i) * inner, (a * n + j) * inner, (a * 2 * n + o) * inner);
            for k in 0..inner {
                y[d + k] = near * x[si + k] + far * x[sj + k];
            }
        }
    }
    y
}

fn lerp_axis_backward<T: Scalar>(dy: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let (near, far) = (T::lit(0.75), T::lit(0.25));
    let mut dx = vec![T::zero(); outer * n * inner];
    for a in 0..outer {
        for o in 0..2 * n {
            let (i, j) = taps(o, n);
            let (si, sj, d) = ((a * n + i) * inner, (a * n + j) * inner, (a * 2 * n + o) * inner);
            for k in 0..inner {
                dx[si + k] += near * dy[d + k];
                dx[sj + k] += far * dy[d + k];
            }
        }
    }
    dx
}

/// Trilinear ×2 upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.channels;
    let [nx, ny, nz] = x.dims;
    let a = lerp_axis(&x.data, c * nx * ny, nz, 1);
    let b = lerp_axis(&a, c * nx, ny, 2 * nz);
    let data = lerp_axis(&b, c, nx, 4 * ny * nz);
    Tensor {
        channels: c,
        dims: [2 * nx, 2 * ny, 2 * nz],
        data,
    }
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let c = dy.channels;
    let [nx, ny, nz] = dy.dims.map(|d| d / 2);
    let b = lerp_axis_backward(&dy.data, c, nx, 4 * ny * nz);
    let a = lerp_axis_backward(&b, c * nx, ny, 2 * nz);
    let data = lerp_axis_backward(&a, c * nx * ny, nz, 1);
    Tensor {
        channels: c,
        dims: [nx, ny, nz],
        data,
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            input,
            output,
            weight: store.add_he(format!("{name}.weight"), vec![output, input], input, gain, rng),
            bias: store.add_const(format!("{name}.bias"), vec![output], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.input, "linear input width");
        let mut y = store.get(self.bias).to_vec();
        matmul(
            false,
            false,
            self.output,
            1,
            self.input,
            T::one(),
            store.get(self.weight),
            x,
            T::one(),
            &mut y,
        );
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        dy: &[T],
        grads: &mut Gradients<T>,
    ) -> Vec<T> {
        matmul(
            false,
            false,
            self.output,
            self.input,
            1,
            T::one(),
            dy,
            x,
            T::one(),
            grads.get_mut(self.weight),
        );
        for (g, &d) in grads.get_mut(self.bias).iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![T::zero(); self.input];
        matmul(
            true,
            false,
            self.input,
            1,
            self.output,
            T::one(),
            store.get(self.weight),
            dy,
            T::zero(),
            &mut dx,
        );
        dx
    }
}
