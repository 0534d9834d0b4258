//! The full network: backbone with detection heads, ROI pooling, local head
//! and, for the direct-regression ablation, a world head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, FeaturePyramid};
use crate::detection::{extract_class, BoundingBox};
use crate::error::{Error, Result};
use crate::geometry::CorrespondenceSet;
use crate::heads::{predict_world, LocalHead};
use crate::nn::{ParamStore, Scalar};
use crate::roi::{roi_feature_len, roi_pool, RoiCache, RoiFeature};
use crate::template::TemplateShape;
use crate::volume::ScalarVolume;

/// How world correspondences are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldMode {
    /// Rigid alignment of the predicted locals onto the world template.
    Procrustes,
    /// A second head regresses world correspondences from ROI features.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub num_points: usize,
    pub stride: usize,
    pub pool_grid: usize,
    pub backbone: BackboneConfig,
    pub mlp_hidden: Vec<usize>,
    /// Scale of the correspondence heads' output-layer initialization.
    pub head_output_gain: f64,
    pub world_mode: WorldMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            num_points: 128,
            stride: 4,
            pool_grid: 2,
            backbone: BackboneConfig::default(),
            mlp_hidden: vec![512, 512],
            head_output_gain: 0.01,
            world_mode: WorldMode::Procrustes,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_points < 3 || self.pool_grid == 0 {
            return Err(Error::InvalidConfig(
                "num_classes and pool_grid must be positive, num_points at least 3".into(),
            ));
        }
        self.backbone.validate(self.stride)
    }

    pub fn roi_len(&self) -> usize {
        roi_feature_len(
            &vec![self.backbone.fpn_width; self.backbone.channels.len()],
            self.pool_grid,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub local_head: LocalHead,
    pub world_head: Option<LocalHead>,
}

/// One detected anatomy with its correspondences.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomyPrediction {
    pub bbox: BoundingBox,
    pub local: CorrespondenceSet,
    pub world: CorrespondenceSet,
}

impl Model {
    /// Builds the model and its He-initialized parameters from `seed`.
    pub fn new<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(
            &mut store,
            &config.backbone,
            config.num_classes,
            config.stride,
            &mut rng,
        )?;
        let roi = config.roi_len();
        let local_head = LocalHead::new(
            &mut store,
            "local_head",
            roi,
            config.num_classes,
            config.num_points,
            &config.mlp_hidden,
            config.head_output_gain,
            &mut rng,
        );
        let world_head = (config.world_mode == WorldMode::Direct).then(|| {
            LocalHead::new(
                &mut store,
                "world_head",
                roi,
                config.num_classes,
                config.num_points,
                &config.mlp_hidden,
                config.head_output_gain,
                &mut rng,
            )
        });
        Ok((
            Self {
                config: config.clone(),
                backbone,
                local_head,
                world_head,
            },
            store,
        ))
    }

    pub fn check_templates(&self, templates: &[TemplateShape]) -> Result<()> {
        if templates.len() != self.config.num_classes {
            return Err(Error::ConfigMismatch(format!(
                "model has {} anatomy classes, {} templates given",
                self.config.num_classes,
                templates.len()
            )));
        }
        for (k, t) in templates.iter().enumerate() {
            if t.anatomy() != k || t.num_points() != self.config.num_points {
                return Err(Error::ConfigMismatch(format!(
                    "template {k} has anatomy {} and {} points, model expects anatomy {k} with {}",
                    t.anatomy(),
                    t.num_points(),
                    self.config.num_points
                )));
            }
        }
        Ok(())
    }

    pub fn roi_feature<T: Scalar>(
        &self,
        pyramid: &FeaturePyramid<T>,
        bx: &BoundingBox,
        dims: [usize; 3],
    ) -> Result<(RoiFeature<T>, RoiCache)> {
        let (vector, cache) = roi_pool(pyramid, bx, dims, self.config.pool_grid)?;
        Ok((RoiFeature::new(vector, bx.anatomy, self.config.num_classes)?, cache))
    }

    /// Local and world correspondences for a given box.
    pub fn predict_for_box<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid<T>,
        bx: &BoundingBox,
        dims: [usize; 3],
        template: &TemplateShape,
    ) -> Result<AnatomyPrediction> {
        let (roi, _) = self.roi_feature(pyramid, bx, dims)?;
        let local = self.local_head.predict_local(store, &roi, bx, template)?.points;
        let world = match &self.world_head {
            None => predict_world(&local, template)?.0,
            Some(head) => head.predict_world_direct(store, &roi, bx, template)?.points,
        };
        Ok(AnatomyPrediction {
            bbox: *bx,
            local,
            world,
        })
    }

    /// Decodes every class from an existing backbone output; classes below
    /// `presence_threshold` are `None`.
    pub fn predict_from_output<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        out: &BackboneOutput<T>,
        templates: &[TemplateShape],
        presence_threshold: f64,
    ) -> Result<Vec<Option<AnatomyPrediction>>> {
        self.check_templates(templates)?;
        let dims = out.maps.dims;
        (0..self.config.num_classes)
            .map(|k| {
                extract_class(&out.maps, k, presence_threshold)
                    .map(|bx| self.predict_for_box(store, &out.pyramid, &bx, dims, &templates[k]))
                    .transpose()
            })
            .collect()
    }

    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        volume: &ScalarVolume,
        templates: &[TemplateShape],
        presence_threshold: f64,
    ) -> Result<Vec<Option<AnatomyPrediction>>> {
        let out = self.backbone.forward(store, volume)?;
        self.predict_from_output(store, &out, templates, presence_threshold)
    }
}
