//! Local and world correspondence heads.
//!
//! The local head predicts a bounded per-coordinate displacement of the
//! anatomy's centered template, `L̂ = center_at(L̄, c) + d·tanh(f(x))`, with
//! `d` twice the largest box half-extent. The world head rigidly aligns the
//! local prediction to the world template.

use rand::Rng;

use crate::detection::{sigmoid_weighted_mse, BoundingBox};
use crate::error::{Error, Result};
use crate::geometry::{
    align_points, apply_transform, center_at, detached_backward, points_backward,
    CorrespondenceSet, Frame, Point3, RigidTransform,
};
use crate::nn::{Gradients, Linear, ParamStore, Scalar};
use crate::roi::RoiFeature;
use crate::template::TemplateShape;

/// Largest magnitude of the squashed displacement factor. Keeps
/// `|offset| < d` strict after rounding even when `tanh` saturates.
pub const TANH_LIMIT: f64 = 1.0 - 1e-9;

/// Fully connected stack with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    /// Input of every layer; entries after the first are ReLU outputs.
    inputs: Vec<Vec<T>>,
}

impl Mlp {
    /// He-initialized stack; the output layer's weights are scaled by
    /// `output_gain`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { output_gain } else { 1.0 };
                Linear::new(store, &format!("{name}.fc{i}"), widths[i], widths[i + 1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().expect("non-empty").output
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> (Vec<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(store, &h);
            if i + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        (h, MlpCache { inputs })
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &MlpCache<T>,
        dy: &[T],
        grads: &mut Gradients<T>,
    ) -> Vec<T> {
        let mut g = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            g = layer.backward(store, x, &g, grads);
            if i > 0 {
                for (gv, &xv) in g.iter_mut().zip(x) {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
        }
        g
    }
}

/// `f` mapping ROI features plus anatomy one-hot to `3M` raw displacements.
#[derive(Clone, Debug)]
pub struct LocalHead {
    pub mlp: Mlp,
    pub num_points: usize,
    pub num_classes: usize,
}

/// Bounded displacement of `base` by `d·tanh(raw)` per coordinate.
pub fn displace(base: &[Point3], d: f64, raw: &[f64]) -> (Vec<Point3>, Vec<f64>) {
    assert_eq!(raw.len(), 3 * base.len(), "raw output length");
    let t: Vec<f64> = raw
        .iter()
        .map(|&v| v.tanh().clamp(-TANH_LIMIT, TANH_LIMIT))
        .collect();
    let pts = base
        .iter()
        .enumerate()
        .map(|(m, b)| b + Point3::new(d * t[3 * m], d * t[3 * m + 1], d * t[3 * m + 2]))
        .collect();
    (pts, t)
}

/// Output of a displacement head with the state needed for its backward pass.
#[derive(Clone, Debug)]
pub struct HeadPrediction<T> {
    pub points: CorrespondenceSet,
    pub d: f64,
    squashed: Vec<f64>,
    cache: MlpCache<T>,
    input_len: usize,
}

impl LocalHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        feature_len: usize,
        num_classes: usize,
        num_points: usize,
        hidden: &[usize],
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mlp = Mlp::new(
            store,
            name,
            feature_len + num_classes,
            hidden,
            3 * num_points,
            output_gain,
            rng,
        );
        Self {
            mlp,
            num_points,
            num_classes,
        }
    }

    /// Raw `f(x)` as `f64`.
    pub fn raw<T: Scalar>(&self, store: &ParamStore<T>, roi: &RoiFeature<T>) -> (Vec<f64>, MlpCache<T>) {
        let (y, cache) = self.mlp.forward(store, &roi.concatenated());
        (y.iter().map(|v| v.as_f64()).collect(), cache)
    }

    fn predict_around<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        roi: &RoiFeature<T>,
        bx: &BoundingBox,
        base: &[Point3],
        frame: Frame,
    ) -> Result<HeadPrediction<T>> {
        if roi.anatomy() != bx.anatomy {
            return Err(Error::AnatomyMismatch {
                expected: bx.anatomy,
                got: roi.anatomy(),
            });
        }
        let d = bx.displacement_scale();
        let (raw, cache) = self.raw(store, roi);
        let (pts, squashed) = displace(base, d, &raw);
        Ok(HeadPrediction {
            points: CorrespondenceSet::new(pts, frame, bx.anatomy)?,
            d,
            squashed,
            cache,
            input_len: roi.vector.len(),
        })
    }

    /// Local correspondences: the template centered at the box center plus a
    /// bounded learned displacement.
    pub fn predict_local<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        roi: &RoiFeature<T>,
        bx: &BoundingBox,
        template: &TemplateShape,
    ) -> Result<HeadPrediction<T>> {
        if template.anatomy() != bx.anatomy {
            return Err(Error::AnatomyMismatch {
                expected: template.anatomy(),
                got: bx.anatomy,
            });
        }
        let base = center_at(template.local_template(), &bx.center_point());
        self.predict_around(store, roi, bx, base.points(), Frame::Local)
    }

    /// World correspondences regressed directly as a bounded displacement of
    /// the world template (no alignment stage).
    pub fn predict_world_direct<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        roi: &RoiFeature<T>,
        bx: &BoundingBox,
        template: &TemplateShape,
    ) -> Result<HeadPrediction<T>> {
        if template.anatomy() != bx.anatomy {
            return Err(Error::AnatomyMismatch {
                expected: template.anatomy(),
                got: bx.anatomy,
            });
        }
        self.predict_around(store, roi, bx, template.world_template().points(), Frame::World)
    }

    /// Accumulates parameter gradients for `upstream = ∂loss/∂points` and
    /// returns the gradient with respect to the ROI feature vector.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pred: &HeadPrediction<T>,
        upstream: &[Point3],
        grads: &mut Gradients<T>,
    ) -> Vec<T> {
        let draw: Vec<T> = pred
            .squashed
            .iter()
            .enumerate()
            .map(|(i, &t)| T::lit(upstream[i / 3][i % 3] * pred.d * (1.0 - t * t)))
            .collect();
        let mut dx = self.mlp.backward(store, &pred.cache, &draw, grads);
        dx.truncate(pred.input_len);
        dx
    }
}

fn kernel_loss(pred: &CorrespondenceSet, gt: &CorrespondenceSet, a: f64, c: f64) -> Result<(f64, Vec<Point3>)> {
    if pred.len() != gt.len() {
        return Err(Error::MismatchedCardinality {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.anatomy() != gt.anatomy() {
        return Err(Error::AnatomyMismatch {
            expected: gt.anatomy(),
            got: pred.anatomy(),
        });
    }
    sigmoid_weighted_mse(pred.points(), gt.points(), a, c)
}

/// Sigmoid-weighted squared error between local correspondence sets,
/// averaged over points.
pub fn local_loss(pred: &CorrespondenceSet, gt: &CorrespondenceSet, a: f64, c: f64) -> Result<(f64, Vec<Point3>)> {
    kernel_loss(pred, gt, a, c)
}

/// Same kernel as [`local_loss`] on world correspondence sets.
pub fn world_loss(pred: &CorrespondenceSet, gt: &CorrespondenceSet, a: f64, c: f64) -> Result<(f64, Vec<Point3>)> {
    kernel_loss(pred, gt, a, c)
}

/// Rigidly aligns the local prediction onto the world template.
pub fn predict_world(
    local: &CorrespondenceSet,
    template: &TemplateShape,
) -> Result<(CorrespondenceSet, RigidTransform)> {
    let target = template.world_template();
    if local.len() != target.len() {
        return Err(Error::MismatchedCardinality {
            left: local.len(),
            right: target.len(),
        });
    }
    let t = align_points(local.points(), target.points())?;
    Ok((apply_transform(&t, local).with_frame(Frame::World), t))
}

/// Gradient of a world-frame loss with respect to the local points fed to
/// [`predict_world`]. The flag is set when the spectrum was too close to
/// degenerate and the transform was treated as constant.
pub fn world_backward(
    local: &CorrespondenceSet,
    template: &TemplateShape,
    transform: &RigidTransform,
    upstream: &[Point3],
) -> Result<(Vec<Point3>, bool)> {
    match points_backward(local.points(), template.world_template().points(), upstream) {
        Ok(g) => Ok((g, false)),
        Err(Error::NearDegenerateSpectrum { .. }) => {
            Ok((detached_backward(transform.rotation(), upstream), true))
        }
        Err(e) => Err(e),
    }
}
