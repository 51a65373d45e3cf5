//! Per-stage learning-rate schedules: linear warmup followed by
//! inverse-square-root decay for stage 1, a flat rate for stage 2.

use super::adam::OptimizerConfig;
use crate::model::TrainingStage;

/// Learning rate at a 1-based step. Stage 1 warms up linearly to
/// `lr_stage1` over `warmup_steps` and then decays as
/// `lr * sqrt(warmup / step)`; stage 2 is constant with no warmup.
pub fn lr_at(step: usize, stage: TrainingStage, cfg: &OptimizerConfig) -> f64 {
    debug_assert!(step >= 1);
    if stage.is_first() {
        warmup_inv_sqrt(step, cfg.lr_stage1, cfg.warmup_steps)
    } else {
        cfg.lr_stage2
    }
}

/// The stage-1 shape as a free function (also used by pretraining).
pub fn warmup_inv_sqrt(step: usize, peak_lr: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        return peak_lr;
    }
    if step <= warmup {
        peak_lr * step as f64 / warmup as f64
    } else {
        peak_lr * (warmup as f64 / step as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_reference_points() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_at(4000, TrainingStage::Stage1, &cfg), 5e-4);
        assert!((lr_at(16_000, TrainingStage::Stage1, &cfg) - 2.5e-4).abs() < 1e-18);
        for step in [1, 100, 4000, 123_456] {
            assert_eq!(lr_at(step, TrainingStage::Stage2, &cfg), 1e-4);
            assert_eq!(lr_at(step, TrainingStage::ReverseStage2, &cfg), 1e-4);
        }
    }

    #[test]
    fn warmup_is_linear_and_continuous_at_the_boundary() {
        let cfg = OptimizerConfig::default();
        let w = cfg.warmup_steps;
        assert!((lr_at(w / 2, TrainingStage::Stage1, &cfg) - 2.5e-4).abs() < 1e-18);
        let before = lr_at(w, TrainingStage::Stage1, &cfg);
        let after = lr_at(w + 1, TrainingStage::Stage1, &cfg);
        assert!((before - cfg.lr_stage1).abs() < 1e-18);
        assert!(
            (after - before).abs() < cfg.lr_stage1 / w as f64,
            "no jump at the warmup boundary"
        );
        // Monotone decay afterwards.
        let mut prev = after;
        for step in (w + 2)..(w + 50) {
            let lr = lr_at(step, TrainingStage::ReverseStage1, &cfg);
            assert!(lr < prev);
            prev = lr;
        }
    }
}
