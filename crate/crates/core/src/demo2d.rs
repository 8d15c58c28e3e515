//! Planar comparison of two ways to move a pose by gradient descent with
//! momentum: coupled SE(2) twists against separate SO(2) and T(2) updates.
//!
//! Both minimize `MSE(T) = ‖T - T*‖²_F / 9` over homogeneous 3×3 matrices
//! with Adam. Each block (translation, rotation) keeps a vector first moment
//! and a scalar second moment, so a block always steps along its momentum.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{Mat3, Pose2, Vec2, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Se2,
    So2xT2,
}

impl Parameterization {
    pub fn name(&self) -> &'static str {
        match self {
            Parameterization::Se2 => "se2",
            Parameterization::So2xT2 => "so2xt2",
        }
    }

    fn mark(&self) -> char {
        match self {
            Parameterization::Se2 => 'x',
            Parameterization::So2xT2 => 'o',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub theta: f64,
    pub x: f64,
    pub y: f64,
}

impl From<PlanarPose> for Pose2 {
    fn from(p: PlanarPose) -> Self {
        Pose2::new(p.theta, p.x, p.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Demo2dConfig {
    pub start: PlanarPose,
    pub target: PlanarPose,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Converged once the pose-matrix MSE drops below this.
    pub tolerance: f64,
    pub max_steps: usize,
}

impl Default for Demo2dConfig {
    fn default() -> Self {
        Self {
            start: PlanarPose {
                theta: 0.0,
                x: 0.0,
                y: 0.0,
            },
            target: PlanarPose {
                theta: std::f64::consts::FRAC_PI_2,
                x: 1.0,
                y: 0.5,
            },
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            tolerance: 1e-4,
            max_steps: 2000,
        }
    }
}

impl Demo2dConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tolerance > 0.0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid demo2d config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRun {
    pub parameterization: Parameterization,
    /// Starts with the initial pose at step 0.
    pub trajectory: Vec<TrajectoryPoint>,
    /// First step whose pose has MSE below tolerance; `None` if never.
    pub steps_to_converge: Option<usize>,
    /// Descent direction of the first update: `(translation, rotation)`.
    pub first_direction: [f64; 3],
}

pub fn pose_mse(a: &Pose2, b: &Pose2) -> f64 {
    (a.to_matrix() - b.to_matrix()).norm_squared() / 9.0
}

/// Gradient in (x, y, θ) of the MSE for independent angle and translation.
fn so2xt2_gradient(p: &Pose2, target: &Pose2) -> Vec3 {
    let dt = (p.translation - target.translation) * (2.0 / 9.0);
    // ‖R(θ) - R*‖² = 4 - 4 cos(θ - θ*)
    let dtheta = (4.0 / 9.0) * (p.rotation.angle - target.rotation.angle).sin();
    Vec3::new(dt.x, dt.y, dtheta)
}

/// Gradient of the MSE under the left perturbation `exp(ξ) T`, with
/// `ξ = (vx, vy, ω)`.
#[rustfmt::skip]
fn se2_gradient(p: &Pose2, target: &Pose2) -> Vec3 {
    let t = p.to_matrix();
    let diff = t - target.to_matrix();
    let generators = [
        Mat3::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0),
        Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    ];
    Vec3::from_fn(|k, _| 2.0 / 9.0 * (generators[k] * t).component_mul(&diff).sum())
}

#[derive(Default)]
struct BlockAdam {
    m_t: Vec2,
    v_t: f64,
    m_r: f64,
    v_r: f64,
    t: i32,
}

impl BlockAdam {
    /// Update direction (already scaled by the learning rate) for a
    /// gradient laid out as (translation x, translation y, rotation).
    fn step(&mut self, g: &Vec3, cfg: &Demo2dConfig) -> Vec3 {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let gt = Vec2::new(g.x, g.y);
        self.m_t = self.m_t * b1 + gt * (1.0 - b1);
        self.v_t = self.v_t * b2 + gt.norm_squared() * (1.0 - b2);
        self.m_r = self.m_r * b1 + g.z * (1.0 - b1);
        self.v_r = self.v_r * b2 + g.z * g.z * (1.0 - b2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let dt = self.m_t / bc1 / ((self.v_t / bc2).sqrt() + cfg.epsilon);
        let dr = self.m_r / bc1 / ((self.v_r / bc2).sqrt() + cfg.epsilon);
        Vec3::new(dt.x, dt.y, dr) * cfg.learning_rate
    }
}

fn point(step: usize, p: &Pose2, target: &Pose2) -> TrajectoryPoint {
    TrajectoryPoint {
        step,
        x: p.translation.x,
        y: p.translation.y,
        theta: p.rotation.angle,
        mse: pose_mse(p, target),
    }
}

pub fn run_demo(config: &Demo2dConfig, parameterization: Parameterization) -> Result<DemoRun> {
    config.validate()?;
    let target: Pose2 = config.target.into();
    let mut pose: Pose2 = config.start.into();
    let mut adam = BlockAdam::default();
    let mut trajectory = vec![point(0, &pose, &target)];
    let mut converged = (trajectory[0].mse < config.tolerance).then_some(0);
    let mut first_direction = [0.0; 3];
    let mut step = 0;
    while converged.is_none() && step < config.max_steps {
        step += 1;
        let grad = match parameterization {
            Parameterization::So2xT2 => so2xt2_gradient(&pose, &target),
            Parameterization::Se2 => se2_gradient(&pose, &target),
        };
        let delta = adam.step(&grad, config);
        if step == 1 {
            first_direction = [-delta.x, -delta.y, -delta.z];
        }
        pose = match parameterization {
            Parameterization::So2xT2 => Pose2::new(
                pose.rotation.angle - delta.z,
                pose.translation.x - delta.x,
                pose.translation.y - delta.y,
            ),
            Parameterization::Se2 => Pose2::exp_se2(&-delta).compose(&pose),
        };
        let p = point(step, &pose, &target);
        if p.mse < config.tolerance {
            converged = Some(step);
        }
        trajectory.push(p);
    }
    Ok(DemoRun {
        parameterization,
        trajectory,
        steps_to_converge: converged,
        first_direction,
    })
}

impl DemoRun {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,x,y,theta,mse\n");
        for p in &self.trajectory {
            writeln!(out, "{},{:?},{:?},{:?},{:?}", p.step, p.x, p.y, p.theta, p.mse).unwrap();
        }
        out
    }

    /// Largest distance of a trajectory point from the line through
    /// `from` and `to`, divided by the segment length.
    pub fn max_line_deviation(&self, from: Vec2, to: Vec2) -> f64 {
        let seg = to - from;
        let len = seg.norm();
        let dir = seg / len;
        self.trajectory
            .iter()
            .map(|p| {
                let d = Vec2::new(p.x, p.y) - from;
                (d.x * dir.y - d.y * dir.x).abs() / len
            })
            .fold(0.0, f64::max)
    }
}

fn bounds(runs: &[&DemoRun]) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in runs.iter().flat_map(|r| &r.trajectory) {
        b = (b.0.min(p.x), b.1.max(p.x), b.2.min(p.y), b.3.max(p.y));
    }
    let pad = 0.05 * (b.1 - b.0).max(b.3 - b.2).max(1e-9);
    (b.0 - pad, b.1 + pad, b.2 - pad, b.3 + pad)
}

/// Character plot of the translation paths, SE(2) as `x` and SO(2)×T(2)
/// as `o`, overlaps as `*`, followed by a legend line.
pub fn ascii_plot(runs: &[&DemoRun], width: usize, height: usize) -> String {
    let (x0, x1, y0, y1) = bounds(runs);
    let mut grid = vec![vec![' '; width]; height];
    for run in runs {
        let mark = run.parameterization.mark();
        for p in &run.trajectory {
            let c = ((p.x - x0) / (x1 - x0) * (width - 1) as f64).round() as usize;
            let r = ((y1 - p.y) / (y1 - y0) * (height - 1) as f64).round() as usize;
            let cell = &mut grid[r.min(height - 1)][c.min(width - 1)];
            *cell = if *cell == ' ' || *cell == mark { mark } else { '*' };
        }
    }
    let mut out = String::new();
    for row in grid {
        out.push('|');
        out.extend(row);
        out.push_str("|\n");
    }
    let legend: Vec<String> = runs
        .iter()
        .map(|r| format!("{} {}", r.parameterization.mark(), r.parameterization.name()))
        .collect();
    out.push_str(&legend.join("  "));
    out.push('\n');
    out
}

pub fn svg_plot(runs: &[&DemoRun]) -> String {
    let (x0, x1, y0, y1) = bounds(runs);
    let size = 400.0;
    let scale = size / (x1 - x0).max(y1 - y0);
    let colors = ["#d62728", "#1f77b4", "#2ca02c"];
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    );
    for (i, run) in runs.iter().enumerate() {
        let pts: Vec<String> = run
            .trajectory
            .iter()
            .map(|p| format!("{:.2},{:.2}", (p.x - x0) * scale, (y1 - p.y) * scale))
            .collect();
        writeln!(
            out,
            "  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"><title>{}</title></polyline>",
            colors[i % colors.len()],
            pts.join(" "),
            run.parameterization.name()
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_at_target_takes_zero_steps() {
        let cfg = Demo2dConfig {
            start: Demo2dConfig::default().target,
            ..Demo2dConfig::default()
        };
        for p in [Parameterization::Se2, Parameterization::So2xT2] {
            let run = run_demo(&cfg, p).unwrap();
            assert_eq!(run.steps_to_converge, Some(0));
            assert_eq!(run.trajectory.len(), 1);
        }
    }

    #[test]
    fn decoupled_updates_converge_first_on_the_default_setup() {
        let cfg = Demo2dConfig::default();
        let se2 = run_demo(&cfg, Parameterization::Se2).unwrap();
        let split = run_demo(&cfg, Parameterization::So2xT2).unwrap();
        let (a, b) = (split.steps_to_converge.unwrap(), se2.steps_to_converge.unwrap());
        assert!(a < b, "so2xt2 {a} vs se2 {b}");
    }

    #[test]
    fn decoupled_translation_path_is_straight() {
        let cfg = Demo2dConfig::default();
        let run = run_demo(&cfg, Parameterization::So2xT2).unwrap();
        let dev = run.max_line_deviation(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.5));
        assert!(dev < 1e-6, "{dev}");
        let se2 = run_demo(&cfg, Parameterization::Se2).unwrap();
        assert!(se2.max_line_deviation(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.5)) > 1e-2);
    }

    #[test]
    fn pure_translation_target_is_straight() {
        let cfg = Demo2dConfig {
            target: PlanarPose {
                theta: 0.0,
                x: -0.7,
                y: 1.3,
            },
            ..Demo2dConfig::default()
        };
        let run = run_demo(&cfg, Parameterization::So2xT2).unwrap();
        assert!(run.steps_to_converge.is_some());
        assert!(run.max_line_deviation(Vec2::zeros(), Vec2::new(-0.7, 1.3)) < 1e-6);
    }

    #[test]
    fn first_steps_agree() {
        let cfg = Demo2dConfig::default();
        let a = run_demo(&cfg, Parameterization::Se2).unwrap().first_direction;
        let b = run_demo(&cfg, Parameterization::So2xT2).unwrap().first_direction;
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-6);
        }
        // Straight at the target in translation.
        let cross = a[0] * 0.5 - a[1] * 1.0;
        assert!(cross.abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = Pose2::new(0.4, 0.3, -0.2);
        let target = Pose2::new(1.2, 1.0, 0.5);
        let h = 1e-6;
        let g = so2xt2_gradient(&p, &target);
        let g_se2 = se2_gradient(&p, &target);
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let shift = |s: f64| {
                Pose2::new(p.rotation.angle + s * e.z, p.translation.x + s * e.x, p.translation.y + s * e.y)
            };
            let fd = (pose_mse(&shift(1.0), &target) - pose_mse(&shift(-1.0), &target)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
            let left = |s: f64| Pose2::exp_se2(&(e * s)).compose(&p);
            let fd = (pose_mse(&left(1.0), &target) - pose_mse(&left(-1.0), &target)) / (2.0 * h);
            assert!((fd - g_se2[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn exports() {
        let cfg = Demo2dConfig::default();
        let a = run_demo(&cfg, Parameterization::Se2).unwrap();
        let b = run_demo(&cfg, Parameterization::So2xT2).unwrap();
        let csv = b.to_csv();
        assert_eq!(csv.lines().count(), b.trajectory.len() + 1);
        assert!(csv.starts_with("step,x,y,theta,mse\n0,0.0,0.0,0.0,"));
        let plot = ascii_plot(&[&a, &b], 40, 12);
        assert_eq!(plot.lines().count(), 13);
        assert!(plot.contains('x') && plot.contains('o'));
        assert!(svg_plot(&[&a, &b]).contains("<polyline"));
    }
}
