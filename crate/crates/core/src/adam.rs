//! Adam applied independently to the rotation and translation parts of a
//! camera pose.
//!
//! Translation moves additively in T(3). The rotation moment is a plain
//! so(3) vector and each update turns the camera about its own origin:
//! `R ← exp(-Δ) R`, a world-frame rotation that leaves the position alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{exp_so3, AxisAngle, Pose, Vec3, RENORMALIZE_EVERY};
use crate::render::PoseGradient;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr_translation: f64,
    pub lr_rotation: f64,
    pub decay_base: f64,
    pub decay_step: f64,
    /// Decay in whole `decay_step` blocks instead of continuously.
    pub staircase: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_translation: 3e-3,
            lr_rotation: 5e-3,
            decay_base: 0.33,
            decay_step: 256.0,
            staircase: false,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-15,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lr_translation,
            self.lr_rotation,
            self.decay_base,
            self.decay_step,
            self.epsilon,
        ];
        let ok = positive.iter().all(|v| *v > 0.0 && v.is_finite())
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// Learning rates `(translation, rotation)` at a global step:
/// `lr₀ · base^(step / decay_step)`.
pub fn lr_at(config: &OptimizerConfig, step: u64) -> (f64, f64) {
    let mut exponent = step as f64 / config.decay_step;
    if config.staircase {
        exponent = exponent.floor();
    }
    let factor = config.decay_base.powf(exponent);
    (config.lr_translation * factor, config.lr_rotation * factor)
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct AdamState {
    pub m_translation: Vec3,
    pub v_translation: Vec3,
    pub m_rotation: Vec3,
    pub v_rotation: Vec3,
    pub step_count: u64,
    /// Nonzero rotation updates applied since the state was created; the
    /// rotation is re-orthonormalized every `RENORMALIZE_EVERY` of them.
    pub rotation_updates: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn moment_step(m: &mut Vec3, v: &mut Vec3, g: &Vec3, cfg: &OptimizerConfig, t: u64) -> Vec3 {
    *m = *m * cfg.beta1 + g * (1.0 - cfg.beta1);
    *v = *v * cfg.beta2 + g.component_mul(g) * (1.0 - cfg.beta2);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    Vec3::from_fn(|i, _| {
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        m_hat / (v_hat.sqrt() + cfg.epsilon)
    })
}

/// One Adam update of `pose`. `step` is the global step that selects the
/// learning rate; bias correction uses the state's own step count.
pub fn adam_step(
    state: &AdamState,
    pose: &Pose,
    grad: &PoseGradient,
    config: &OptimizerConfig,
    step: u64,
) -> (Pose, AdamState) {
    let mut s = *state;
    s.step_count += 1;
    let (lr_t, lr_r) = lr_at(config, step);

    let dir_t = moment_step(&mut s.m_translation, &mut s.v_translation, &grad.d_translation, config, s.step_count);
    let dir_r = moment_step(&mut s.m_rotation, &mut s.v_rotation, &grad.d_rotation, config, s.step_count);

    let mut next = *pose;
    if dir_t != Vec3::zeros() {
        next.translation -= dir_t * lr_t;
    }
    if dir_r != Vec3::zeros() {
        let delta = AxisAngle(-dir_r * lr_r);
        next.rotation = exp_so3(&delta).compose(&pose.rotation);
        s.rotation_updates += 1;
        if s.rotation_updates % RENORMALIZE_EVERY == 0 {
            next.rotation = next.rotation.renormalized();
        }
    }
    (next, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{geodesic_rotation_error, log_so3, Rotation3};
    use approx::assert_relative_eq;

    fn grad(t: Vec3, r: Vec3) -> PoseGradient {
        PoseGradient {
            d_translation: t,
            d_rotation: r,
            ray_count: 1,
        }
    }

    fn start_pose() -> Pose {
        Pose::look_at(&Vec3::new(0.5, -4.0, 1.0), &Vec3::zeros(), &Vec3::z())
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_at(&cfg, 0), (3e-3, 5e-3));
        let (t, r) = lr_at(&cfg, 256);
        assert_relative_eq!(t, 9.9e-4, epsilon = 1e-15);
        assert_relative_eq!(r, 1.65e-3, epsilon = 1e-15);
        let (t, r) = lr_at(&cfg, 512);
        assert_relative_eq!(t, 3e-3 * 0.1089, epsilon = 1e-15);
        assert_relative_eq!(r, 5e-3 * 0.1089, epsilon = 1e-15);

        let stair = OptimizerConfig {
            staircase: true,
            ..cfg
        };
        assert_eq!(lr_at(&stair, 255), (3e-3, 5e-3));
        assert_relative_eq!(lr_at(&stair, 300).0, 9.9e-4, epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_pose_unchanged() {
        let pose = start_pose();
        let (next, state) = adam_step(&AdamState::new(), &pose, &grad(Vec3::zeros(), Vec3::zeros()), &OptimizerConfig::default(), 0);
        assert_eq!(next, pose);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate_against_the_gradient() {
        let pose = start_pose();
        let cfg = OptimizerConfig::default();
        let g = grad(Vec3::new(0.7, -2.0, 1e-3), Vec3::zeros());
        let (next, _) = adam_step(&AdamState::new(), &pose, &g, &cfg, 0);
        let moved = next.translation - pose.translation;
        let expected = Vec3::new(-1.0, 1.0, -1.0) * cfg.lr_translation;
        assert_relative_eq!(moved, expected, epsilon = 1e-12);
    }

    #[test]
    fn constant_gradient_keeps_moving_along_a_line() {
        let cfg = OptimizerConfig::default();
        let g = grad(Vec3::new(0.3, -1.2, 0.5), Vec3::zeros());
        let mut pose = start_pose();
        let mut state = AdamState::new();
        let origin = pose.translation;
        let mut points = Vec::new();
        for step in 0..300 {
            (pose, state) = adam_step(&state, &pose, &g, &cfg, step);
            points.push(pose.translation);
        }
        let dir = (points[points.len() - 1] - origin).normalize();
        for p in &points {
            let off = p - origin;
            let perp = off - dir * off.dot(&dir);
            assert!(perp.norm() < 1e-9);
        }
    }

    #[test]
    fn subspaces_are_decoupled_exactly() {
        let cfg = OptimizerConfig::default();
        let start = start_pose();

        let mut pose = start;
        let mut state = AdamState::new();
        for step in 0..2560 {
            let g = grad(Vec3::zeros(), Vec3::new((step as f64).sin(), 0.3, -0.8));
            (pose, state) = adam_step(&state, &pose, &g, &cfg, step);
        }
        assert_eq!(pose.translation, start.translation);
        assert!(pose.rotation.orthonormality_error() < 1e-9);

        let mut pose = start;
        let mut state = AdamState::new();
        for step in 0..2560 {
            let g = grad(Vec3::new(0.2, (step as f64).cos(), -1.0), Vec3::zeros());
            (pose, state) = adam_step(&state, &pose, &g, &cfg, step);
        }
        assert_eq!(pose.rotation, start.rotation);
    }

    #[test]
    fn pure_z_torque_rotates_about_z_only() {
        let cfg = OptimizerConfig::default();
        let mut pose = Pose::identity();
        let mut state = AdamState::new();
        for step in 0..2560 {
            (pose, state) = adam_step(&state, &pose, &grad(Vec3::zeros(), Vec3::z()), &cfg, step);
            assert!(pose.rotation.orthonormality_error() < 1e-9);
            assert!((pose.rotation.determinant() - 1.0).abs() < 1e-9);
        }
        let w = log_so3(&pose.rotation);
        assert!(w.0.x.abs() < 1e-12 && w.0.y.abs() < 1e-12);
        assert!(w.0.z < 0.0, "descent turns against the torque");
        assert!(geodesic_rotation_error(&Rotation3::identity(), &pose.rotation) > 1.0);
    }
}
