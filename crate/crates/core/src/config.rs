//! Training configuration, read from and written to JSON.
//!
//! Every key is optional; missing keys take the defaults below.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `epochs` | 300 | training epochs |
//! | `learning_rate` | 1e-4 | initial Adam step size |
//! | `lr_step`, `lr_gamma` | 20, 0.9 | step decay |
//! | `batch_size` | 2 | samples per optimizer update |
//! | `seed` | 0 | initialization and sampling seed |
//! | `model` | see [`ModelConfig`] | `num_classes`, `num_points`, `stride`, `pool_grid`, `backbone`, `mlp_hidden`, `head_output_gain`, `world_mode` |
//! | `loss` | α=3, β=4, a=10, c=0.2 | detection and correspondence loss parameters |
//! | `presence_threshold` | 0.3 | heatmap peak needed for a detection |
//! | `splat_sigma_scale` | 3 | ground-truth Gaussian width divisor |
//! | `weights` | see [`LossWeightSchedule`] | λ phases and ramps |
//! | `teacher_forcing` | see [`TeacherForcingSchedule`] | ground-truth sampling windows |
//! | `detach_world_gradient` | false | stop the world loss at the Procrustes stage |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{DetectionLossParams, DEFAULT_PRESENCE_THRESHOLD, DEFAULT_SPLAT_SIGMA_SCALE};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::model::ModelConfig;
use crate::schedule::{LossWeightSchedule, TeacherForcingSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: DetectionLossParams,
    pub presence_threshold: f64,
    pub splat_sigma_scale: f64,
    pub weights: LossWeightSchedule,
    pub teacher_forcing: TeacherForcingSchedule,
    pub detach_world_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-4,
            lr_step: 20,
            lr_gamma: 0.9,
            batch_size: 2,
            seed: 0,
            model: ModelConfig::default(),
            loss: DetectionLossParams::default(),
            presence_threshold: DEFAULT_PRESENCE_THRESHOLD,
            splat_sigma_scale: DEFAULT_SPLAT_SIGMA_SCALE,
            weights: LossWeightSchedule::default(),
            teacher_forcing: TeacherForcingSchedule::default(),
            detach_world_gradient: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let positive = self.learning_rate > 0.0
            && self.lr_gamma > 0.0
            && self.lr_step > 0
            && self.batch_size > 0
            && self.splat_sigma_scale > 0.0;
        if !positive {
            return Err(Error::InvalidConfig(
                "learning_rate, lr_gamma, lr_step, batch_size and splat_sigma_scale must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.presence_threshold) {
            return Err(Error::InvalidConfig("presence_threshold must be in [0, 1]".into()));
        }
        let tf = &self.teacher_forcing;
        if tf.box_end <= tf.box_start || tf.local_end <= tf.local_start {
            return Err(Error::InvalidConfig("teacher-forcing windows must have end > start".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Config identity for checkpoints; the epoch budget is excluded so a
    /// run can be extended on resume.
    pub fn identity(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.epochs = 0;
        serde_json::to_value(c).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_defaults() {
        let c = TrainConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 5, "model": {"num_classes": 1}}"#).unwrap();
        assert_eq!(partial.epochs, 5);
        assert_eq!(partial.model.num_classes, 1);
        assert_eq!(partial.model.num_points, 128);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 5}"#).is_err());
    }
}
