//! Small 3D convolutional encoder with top-down feature-pyramid fusion and
//! strided detection heads.
//!
//! Stage `i` halves the resolution with a stride-2 `3³` convolution, then
//! applies group normalization and ReLU; level `i` therefore has stride
//! `2^(i+1)`. Each stage output is projected to a common width by a `1×1`
//! lateral convolution and summed with the upsampled coarser level. The
//! heatmap, radius and offset heads are `1×1` convolutions on the level whose
//! stride equals the detection stride.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{strided_dims, DetectionMaps};
use crate::error::{Error, Result};
use crate::nn::layers::{
    accumulate, relu_backward, relu_inplace, upsample2, upsample2_backward, ConvCache,
    GroupNormCache,
};
use crate::nn::{Conv3d, Gradients, GroupNorm, ParamStore, Scalar, Tensor};
use crate::volume::ScalarVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channel width of each encoder stage.
    pub channels: Vec<usize>,
    pub fpn_width: usize,
    pub norm_groups: usize,
    /// Radius head output is `radius_scale · raw`.
    pub radius_scale: f64,
    /// Initial radius prediction in voxels.
    pub radius_prior: f64,
    /// Initial heatmap probability everywhere.
    pub heatmap_prior: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
            fpn_width: 32,
            norm_groups: 4,
            radius_scale: 8.0,
            radius_prior: 8.0,
            heatmap_prior: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn strides(&self) -> Vec<usize> {
        (0..self.channels.len()).map(|i| 1 << (i + 1)).collect()
    }

    pub fn deepest_stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn validate(&self, detection_stride: usize) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.fpn_width == 0 {
            return Err(Error::InvalidConfig("backbone widths must be positive".into()));
        }
        if self.norm_groups == 0 || self.channels.iter().any(|c| c % self.norm_groups != 0) {
            return Err(Error::InvalidConfig(format!(
                "norm_groups {} must divide every stage width {:?}",
                self.norm_groups, self.channels
            )));
        }
        if !self.strides().contains(&detection_stride) {
            return Err(Error::InvalidConfig(format!(
                "detection stride {detection_stride} is not a pyramid stride {:?}",
                self.strides()
            )));
        }
        if !(self.heatmap_prior > 0.0 && self.heatmap_prior < 1.0) || self.radius_scale <= 0.0 {
            return Err(Error::InvalidConfig(
                "heatmap_prior must be in (0,1) and radius_scale positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-stride feature volumes, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
    pub strides: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv3d,
    norm: GroupNorm,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub num_classes: usize,
    pub detection_stride: usize,
    stages: Vec<Stage>,
    laterals: Vec<Conv3d>,
    heat: Conv3d,
    radius: Conv3d,
    offset: Conv3d,
}

struct StageCache<T> {
    conv: ConvCache<T>,
    norm: GroupNormCache<T>,
    out: Tensor<T>,
}

/// Saved activations of one forward pass.
pub struct BackboneCache<T> {
    stages: Vec<StageCache<T>>,
    laterals: Vec<ConvCache<T>>,
    heads: [ConvCache<T>; 3],
    heat_prob: Vec<f64>,
}

pub struct BackboneOutput<T> {
    pub pyramid: FeaturePyramid<T>,
    pub maps: DetectionMaps,
    pub cache: BackboneCache<T>,
}

/// Gradients of a scalar objective with respect to the decoded maps.
#[derive(Clone, Debug, Default)]
pub struct MapGrads {
    pub heatmap: Vec<f64>,
    pub radius: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &BackboneConfig,
        num_classes: usize,
        detection_stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(detection_stride)?;
        if num_classes == 0 {
            return Err(Error::InvalidConfig("at least one anatomy class".into()));
        }
        let mut stages = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            let conv = Conv3d::new(store, &format!("backbone.stage{i}.conv"), cin, c, 3, 2, 1, 1.0, rng);
            let norm = GroupNorm::new(store, &format!("backbone.stage{i}.norm"), c, config.norm_groups);
            stages.push(Stage { conv, norm });
            cin = c;
        }
        let w = config.fpn_width;
        let laterals = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv3d::new(store, &format!("fpn.lateral{i}"), c, w, 1, 1, 0, 1.0, rng))
            .collect();
        let heat = Conv3d::new(store, "head.heatmap", w, num_classes, 1, 1, 0, 0.1, rng);
        let prior = config.heatmap_prior;
        store
            .get_mut(heat.bias)
            .iter_mut()
            .for_each(|b| *b = T::lit((prior / (1.0 - prior)).ln()));
        let radius = Conv3d::new(store, "head.radius", w, 3, 1, 1, 0, 0.1, rng);
        let r0 = config.radius_prior / config.radius_scale;
        store.get_mut(radius.bias).iter_mut().for_each(|b| *b = T::lit(r0));
        let offset = Conv3d::new(store, "head.offset", w, 3, 1, 1, 0, 0.1, rng);
        store.get_mut(offset.bias).iter_mut().for_each(|b| *b = T::lit(0.5));
        Ok(Self {
            config: config.clone(),
            num_classes,
            detection_stride,
            stages,
            laterals,
            heat,
            radius,
            offset,
        })
    }

    pub fn head_level(&self) -> usize {
        self.detection_stride.trailing_zeros() as usize - 1
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let s = self.config.deepest_stride();
        if dims.iter().any(|&d| d == 0 || d % s != 0) {
            return Err(Error::BadDims {
                dims,
                reason: format!("each dimension must be a positive multiple of the deepest stride {s}"),
            });
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, volume: &ScalarVolume) -> Result<BackboneOutput<T>> {
        let input = Tensor {
            channels: 1,
            dims: volume.dims,
            data: volume.data.iter().map(|&v| T::lit(v as f64)).collect(),
        };
        self.forward_tensor(store, &input)
    }

    pub fn forward_tensor<T: Scalar>(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<BackboneOutput<T>> {
        self.check_dims(input.dims)?;
        let mut stage_caches: Vec<StageCache<T>> = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let x = stage_caches.last().map_or(input, |c| &c.out);
            let (h, conv) = st.conv.forward(store, x);
            let (mut out, norm) = st.norm.forward(store, &h);
            relu_inplace(&mut out);
            stage_caches.push(StageCache { conv, norm, out });
        }

        let n = self.stages.len();
        let mut levels: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut lat_caches: Vec<Option<ConvCache<T>>> = (0..n).map(|_| None).collect();
        for i in (0..n).rev() {
            let (mut p, cache) = self.laterals[i].forward(store, &stage_caches[i].out);
            if let Some(coarser) = &levels[i + 1..].first().and_then(|l| l.as_ref()) {
                p.add_assign(&upsample2(coarser));
            }
            levels[i] = Some(p);
            lat_caches[i] = Some(cache);
        }
        let levels: Vec<Tensor<T>> = levels.into_iter().map(Option::unwrap).collect();
        let laterals = lat_caches.into_iter().map(Option::unwrap).collect();

        let feat = &levels[self.head_level()];
        let (h, hc) = self.heat.forward(store, feat);
        let (r, rc) = self.radius.forward(store, feat);
        let (o, oc) = self.offset.forward(store, feat);
        let mut maps = DetectionMaps::zeros(self.num_classes, input.dims, self.detection_stride)?;
        debug_assert_eq!(strided_dims(input.dims, self.detection_stride)?, feat.dims);
        maps.heatmap = h
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v.as_f64()).exp()))
            .collect();
        let rs = self.config.radius_scale;
        maps.radius = r.data.iter().map(|v| rs * v.as_f64()).collect();
        let os = self.detection_stride as f64;
        maps.offset = o.data.iter().map(|v| os * v.as_f64()).collect();
        let heat_prob = maps.heatmap.clone();

        Ok(BackboneOutput {
            pyramid: FeaturePyramid {
                levels,
                strides: self.config.strides(),
            },
            maps,
            cache: BackboneCache {
                stages: stage_caches,
                laterals,
                heads: [hc, rc, oc],
                heat_prob,
            },
        })
    }

    /// Back-propagates map gradients and per-level pyramid gradients into
    /// `grads`. Returns the input gradient when `need_input` is set.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &BackboneCache<T>,
        map_grads: Option<&MapGrads>,
        mut level_grads: Vec<Option<Tensor<T>>>,
        grads: &mut Gradients<T>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let n = self.stages.len();
        level_grads.resize_with(n, || None);
        let hl = self.head_level();

        if let Some(mg) = map_grads {
            let feat_dims = cache.heads[0].out_dims();
            let to_tensor = |ch: usize, vals: Vec<T>| Tensor {
                channels: ch,
                dims: feat_dims,
                data: vals,
            };
            let dh: Vec<T> = mg
                .heatmap
                .iter()
                .zip(&cache.heat_prob)
                .map(|(&g, &p)| T::lit(g * p * (1.0 - p)))
                .collect();
            let rs = self.config.radius_scale;
            let dr: Vec<T> = mg.radius.iter().map(|&g| T::lit(g * rs)).collect();
            let os = self.detection_stride as f64;
            let dof: Vec<T> = mg.offset.iter().map(|&g| T::lit(g * os)).collect();
            for (conv, c, d) in [
                (&self.heat, &cache.heads[0], to_tensor(self.num_classes, dh)),
                (&self.radius, &cache.heads[1], to_tensor(3, dr)),
                (&self.offset, &cache.heads[2], to_tensor(3, dof)),
            ] {
                if let Some(dx) = conv.backward(store, c, &d, grads, true) {
                    accumulate(&mut level_grads[hl], dx);
                }
            }
        }

        let mut stage_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for i in 0..n {
            let Some(dp) = level_grads[i].take() else { continue };
            if i + 1 < n {
                accumulate(&mut level_grads[i + 1], upsample2_backward(&dp));
            }
            let dc = self.laterals[i]
                .backward(store, &cache.laterals[i], &dp, grads, true)
                .expect("input gradient requested");
            accumulate(&mut stage_grads[i], dc);
        }

        let mut input_grad = None;
        for i in (0..n).rev() {
            let Some(dout) = stage_grads[i].take() else { continue };
            let sc = &cache.stages[i];
            let dnorm = relu_backward(&sc.out, dout);
            let dconv = self.stages[i].norm.backward(store, &sc.norm, &dnorm, grads);
            let want_input = i > 0 || need_input;
            let dx = self.stages[i]
                .conv
                .backward(store, &sc.conv, &dconv, grads, want_input);
            match (i, dx) {
                (0, dx) => input_grad = dx,
                (_, Some(dx)) => accumulate(&mut stage_grads[i - 1], dx),
                _ => {}
            }
        }
        input_grad
    }
}
