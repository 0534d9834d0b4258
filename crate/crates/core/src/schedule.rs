//! Epoch-indexed loss weights and teacher-forcing probabilities.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeightSchedule {
    pub lambda_h: f64,
    pub lambda_r: f64,
    pub lambda_o: f64,
    /// Heatmap weight from `local_start` on.
    pub lambda_h_late: f64,
    pub ramp_step: f64,
    pub local_start: usize,
    pub world_start: usize,
    pub lambda_l_max: f64,
    pub lambda_w_max: f64,
}

impl Default for LossWeightSchedule {
    fn default() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_r: 0.01,
            lambda_o: 1.0,
            lambda_h_late: 40.0,
            ramp_step: 0.2,
            local_start: 20,
            world_start: 40,
            lambda_l_max: 2.0,
            lambda_w_max: 2.0,
        }
    }
}

/// Linear decay windows `[start, end]` from 1 to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherForcingSchedule {
    pub box_start: usize,
    pub box_end: usize,
    pub local_start: usize,
    pub local_end: usize,
}

impl Default for TeacherForcingSchedule {
    fn default() -> Self {
        Self {
            box_start: 20,
            box_end: 120,
            local_start: 40,
            local_end: 140,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValues {
    pub lambda_h: f64,
    pub lambda_r: f64,
    pub lambda_o: f64,
    pub lambda_l: f64,
    pub lambda_w: f64,
    pub p_gt_box: f64,
    pub p_gt_local: f64,
}

impl ScheduleValues {
    pub fn weights(&self) -> [f64; 5] {
        [self.lambda_h, self.lambda_r, self.lambda_o, self.lambda_l, self.lambda_w]
    }
}

fn ramp(epoch: usize, start: usize, step: f64, max: f64) -> f64 {
    if epoch < start {
        0.0
    } else {
        (step * (epoch - start) as f64).min(max)
    }
}

fn decay(epoch: usize, start: usize, end: usize) -> f64 {
    if epoch <= start {
        1.0
    } else if epoch >= end {
        0.0
    } else {
        1.0 - (epoch - start) as f64 / (end - start) as f64
    }
}

pub fn schedule_at(epoch: usize, w: &LossWeightSchedule, tf: &TeacherForcingSchedule) -> ScheduleValues {
    ScheduleValues {
        lambda_h: if epoch >= w.local_start { w.lambda_h_late } else { w.lambda_h },
        lambda_r: w.lambda_r,
        lambda_o: w.lambda_o,
        lambda_l: ramp(epoch, w.local_start, w.ramp_step, w.lambda_l_max),
        lambda_w: ramp(epoch, w.world_start, w.ramp_step, w.lambda_w_max),
        p_gt_box: decay(epoch, tf.box_start, tf.box_end),
        p_gt_local: decay(epoch, tf.local_start, tf.local_end),
    }
}

/// Step decay: `lr0 · gamma^floor(epoch / step)`.
pub fn learning_rate(epoch: usize, lr0: f64, step: usize, gamma: f64) -> f64 {
    lr0 * gamma.powi((epoch / step.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(e: usize) -> ScheduleValues {
        schedule_at(e, &LossWeightSchedule::default(), &TeacherForcingSchedule::default())
    }

    #[test]
    fn phase_values() {
        assert_eq!(at(0).weights(), [1.0, 0.01, 1.0, 0.0, 0.0]);
        let e25 = at(25);
        assert_eq!(e25.lambda_h, 40.0);
        assert!((e25.lambda_l - 1.0).abs() < 1e-12);
        assert_eq!(at(30).lambda_l, 2.0);
        assert_eq!(at(30).lambda_w, 0.0);
        assert_eq!(at(50).lambda_w, 2.0);
    }

    #[test]
    fn teacher_forcing_decays() {
        assert_eq!(at(0).p_gt_box, 1.0);
        assert_eq!(at(20).p_gt_box, 1.0);
        assert!((at(70).p_gt_box - 0.5).abs() < 1e-12);
        assert_eq!(at(120).p_gt_box, 0.0);
        assert_eq!(at(40).p_gt_local, 1.0);
        assert_eq!(at(140).p_gt_local, 0.0);
        let mut prev = (1.0, 1.0);
        for e in 0..=300 {
            let s = at(e);
            assert!(s.p_gt_box <= prev.0 && s.p_gt_local <= prev.1);
            prev = (s.p_gt_box, s.p_gt_local);
        }
    }

    #[test]
    fn step_decay() {
        assert_eq!(learning_rate(0, 1e-4, 20, 0.9), 1e-4);
        assert!((learning_rate(20, 1e-4, 20, 0.9) - 9e-5).abs() < 1e-18);
        assert!((learning_rate(40, 1e-4, 20, 0.9) - 8.1e-5).abs() < 1e-18);
        assert_eq!(learning_rate(19, 1e-4, 20, 0.9), 1e-4);
    }
}
