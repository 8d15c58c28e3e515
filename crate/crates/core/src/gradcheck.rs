//! Finite-difference checks of the pose gradient over a whole image.
//!
//! Translation is perturbed along the world axes; rotation by `exp(δ e_k) R`,
//! a world-frame rotation about the camera origin, which is the perturbation
//! the analytic rotation gradient refers to. Relative losses detach their
//! denominators, so the differenced loss keeps them at the unperturbed
//! render.

use crate::camera::{Intrinsics, RaySampleBatch, SampleSettings};
use crate::error::Result;
use crate::field::RadianceField;
use crate::image::Image;
use crate::lie::{exp_so3, AxisAngle, Pose, Vec3};
use crate::loss::{loss_value_and_grad, PixelLoss};
use crate::render::{render_colors, render_with_pose_gradient, PoseGradient, RayScratch};

/// Mean loss over every pixel and its analytic pose gradient.
pub fn full_image_gradient<F: RadianceField + ?Sized>(
    field: &F,
    intrinsics: &Intrinsics,
    settings: &SampleSettings,
    observed: &Image,
    loss: &PixelLoss,
    pose: &Pose,
) -> Result<(f64, PoseGradient)> {
    let batch = RaySampleBatch::full_image(intrinsics, pose, settings)?;
    let mut scratch = RayScratch::default();
    let mut total = 0.0;
    let grad = render_with_pose_gradient(field, &batch, &mut scratch, |r, pred| {
        let (v, g) = loss_value_and_grad(loss, pred, &observed.pixel(batch.pixels[r]));
        total += v;
        g
    });
    Ok((total / batch.ray_count() as f64, grad))
}

/// Renders at a pose and at its twelve one-sided offsets, reusable for any
/// number of losses.
pub struct FdProbe {
    h: f64,
    base: Vec<Vec3>,
    /// Translation x, y, z then rotation x, y, z; each `[+h, -h]`.
    shifted: Vec<[Vec<Vec3>; 2]>,
}

impl FdProbe {
    pub fn new<F: RadianceField + ?Sized>(
        field: &F,
        intrinsics: &Intrinsics,
        settings: &SampleSettings,
        pose: &Pose,
        h: f64,
    ) -> Result<Self> {
        let render = |p: &Pose| -> Result<Vec<Vec3>> {
            let batch = RaySampleBatch::full_image(intrinsics, p, settings)?;
            Ok(render_colors(field, &batch))
        };
        let mut shifted = Vec::with_capacity(6);
        for k in 0..6 {
            let mut pair = [Vec::new(), Vec::new()];
            for (slot, sign) in pair.iter_mut().zip([1.0, -1.0]) {
                let mut e = Vec3::zeros();
                e[k % 3] = sign * h;
                let moved = if k < 3 {
                    Pose::new(pose.rotation, pose.translation + e)
                } else {
                    Pose::new(exp_so3(&AxisAngle(e)).compose(&pose.rotation), pose.translation)
                };
                *slot = render(&moved)?;
            }
            shifted.push(pair);
        }
        Ok(Self {
            h,
            base: render(pose)?,
            shifted,
        })
    }

    /// Central-difference gradient of the mean loss against `observed`.
    pub fn gradient(&self, loss: &PixelLoss, observed: &Image) -> PoseGradient {
        let mean = |colors: &[Vec3]| -> f64 {
            let total: f64 = colors
                .iter()
                .zip(&self.base)
                .enumerate()
                .map(|(i, (c, anchor))| loss.value_with_anchor(c, &observed.pixels[i], anchor))
                .sum();
            total / colors.len() as f64
        };
        let d: Vec<f64> = self
            .shifted
            .iter()
            .map(|[plus, minus]| (mean(plus) - mean(minus)) / (2.0 * self.h))
            .collect();
        PoseGradient {
            d_translation: Vec3::new(d[0], d[1], d[2]),
            d_rotation: Vec3::new(d[3], d[4], d[5]),
            ray_count: self.base.len(),
        }
    }
}

/// Relative errors `‖a - b‖ / ‖b‖` of the translation and rotation blocks,
/// `b` being the reference.
pub fn relative_errors(a: &PoseGradient, b: &PoseGradient) -> (f64, f64) {
    let rel = |x: &Vec3, y: &Vec3| {
        let scale = y.norm();
        if scale == 0.0 {
            x.norm()
        } else {
            (x - y).norm() / scale
        }
    };
    (
        rel(&a.d_translation, &b.d_translation),
        rel(&a.d_rotation, &b.d_rotation),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::SampleBounds;
    use crate::field::AnalyticScene;
    use crate::loss::LossKind;
    use crate::render::render_image;

    #[test]
    fn l2_gradient_matches_on_a_small_image() {
        let scene = AnalyticScene::reference();
        let intr = Intrinsics::from_fov(16, 16, 40.0).unwrap();
        let settings = SampleSettings {
            samples_per_ray: 32,
            bounds: SampleBounds::Fixed { near: 1.0, far: 5.0 },
        };
        let truth = Pose::look_at(&Vec3::new(2.5, 1.0, 1.2), &Vec3::zeros(), &Vec3::z());
        let observed = render_image(&scene, &intr, &truth, &settings).unwrap();
        let pose = Pose::new(
            exp_so3(&AxisAngle::new(0.05, -0.03, 0.02)).compose(&truth.rotation),
            truth.translation + Vec3::new(0.05, -0.1, 0.04),
        );
        let loss = PixelLoss::new(LossKind::L2);
        let (_, analytic) = full_image_gradient(&scene, &intr, &settings, &observed, &loss, &pose).unwrap();
        let fd = FdProbe::new(&scene, &intr, &settings, &pose, 1e-5).unwrap().gradient(&loss, &observed);
        let (et, er) = relative_errors(&analytic, &fd);
        assert!(et < 1e-5 && er < 1e-5, "{et} {er}");
    }
}
