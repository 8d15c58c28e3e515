//! Volume rendering of ray batches and the backward pass to pose gradients.
//!
//! Forward, per ray with samples `i = 1..K`:
//!
//! ```text
//! δ_i = t_{i+1} - t_i        (δ_K = far - t_K)
//! α_i = 1 - exp(-σ_i δ_i)
//! T_1 = 1,  T_{i+1} = T_i (1 - α_i)
//! C   = Σ T_i α_i c_i        (black background)
//! ```
//!
//! Backward, in one reverse sweep carrying `S_i = Σ_{j>i} T_j α_j c_j`:
//!
//! ```text
//! ∂C/∂c_i = T_i α_i
//! ∂C/∂σ_i = δ_i (T_{i+1} c_i - S_i)
//! ```
//!
//! Sample distances are constants of the backward pass; only the sample
//! points `p_i = o + t_i d` carry the pose dependence.

use rayon::prelude::*;

use crate::camera::{Intrinsics, RaySampleBatch, SampleSettings};
use crate::error::Result;
use crate::field::{FieldSample, RadianceField};
use crate::image::Image;
use crate::lie::{Mat3, Pose, Vec3};

/// Forward results for a batch, stored flat like [`RaySampleBatch`].
#[derive(Clone, Debug, Default)]
pub struct RenderedBatch {
    pub samples_per_ray: usize,
    pub colors: Vec<Vec3>,
    pub hit: Vec<bool>,
    pub transmittance: Vec<f64>,
    pub alpha: Vec<f64>,
    pub delta: Vec<f64>,
    pub samples: Vec<FieldSample>,
}

/// Borrowed view of one rendered ray.
#[derive(Clone, Copy, Debug)]
pub struct RenderedRay<'a> {
    pub color: Vec3,
    pub transmittance: &'a [f64],
    pub alpha: &'a [f64],
    pub delta: &'a [f64],
    pub samples: &'a [FieldSample],
}

impl RenderedBatch {
    pub fn ray_count(&self) -> usize {
        self.colors.len()
    }

    pub fn ray(&self, r: usize) -> RenderedRay<'_> {
        let k = self.samples_per_ray;
        let range = r * k..(r + 1) * k;
        RenderedRay {
            color: self.colors[r],
            transmittance: &self.transmittance[range.clone()],
            alpha: &self.alpha[range.clone()],
            delta: &self.delta[range.clone()],
            samples: &self.samples[range],
        }
    }
}

/// Per-sample loss gradients with respect to the field outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleGradient {
    pub d_density: f64,
    pub d_color: Vec3,
}

/// Translation gradient `∂L/∂o` and rotation gradient `τ`, both averaged
/// over the rays of the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseGradient {
    pub d_translation: Vec3,
    pub d_rotation: Vec3,
    pub ray_count: usize,
}

impl PoseGradient {
    pub fn is_finite(&self) -> bool {
        self.d_translation.iter().chain(self.d_rotation.iter()).all(|v| v.is_finite())
    }
}

fn composite_ray<F: RadianceField + ?Sized>(
    field: &F,
    points: &[Vec3],
    t: &[f64],
    far: f64,
    transmittance: &mut [f64],
    alpha: &mut [f64],
    delta: &mut [f64],
    samples: &mut [FieldSample],
) -> Vec3 {
    let k = t.len();
    let mut trans = 1.0;
    let mut color = Vec3::zeros();
    for i in 0..k {
        let s = field.query(&points[i]);
        let d = if i + 1 < k { t[i + 1] - t[i] } else { far - t[i] };
        let a = -(-s.density * d).exp_m1();
        transmittance[i] = trans;
        alpha[i] = a;
        delta[i] = d;
        samples[i] = s;
        color += s.color * (trans * a);
        trans *= 1.0 - a;
    }
    color
}

/// Renders every ray of the batch, reusing `out`'s allocations.
pub fn render_rays_into<F: RadianceField + ?Sized>(
    field: &F,
    batch: &RaySampleBatch,
    out: &mut RenderedBatch,
) {
    let k = batch.samples_per_ray;
    let n = batch.ray_count();
    out.samples_per_ray = k;
    out.colors.clear();
    out.colors.resize(n, Vec3::zeros());
    out.hit.clear();
    out.hit.extend_from_slice(&batch.hit);
    for buf in [&mut out.transmittance, &mut out.alpha, &mut out.delta] {
        buf.clear();
        buf.resize(n * k, 0.0);
    }
    out.samples.clear();
    out.samples.resize(n * k, FieldSample::EMPTY);
    for r in 0..n {
        if !batch.hit[r] {
            continue;
        }
        let range = r * k..(r + 1) * k;
        out.colors[r] = composite_ray(
            field,
            &batch.points[range.clone()],
            &batch.t[range.clone()],
            batch.far[r],
            &mut out.transmittance[range.clone()],
            &mut out.alpha[range.clone()],
            &mut out.delta[range.clone()],
            &mut out.samples[range],
        );
    }
}

pub fn render_rays<F: RadianceField + ?Sized>(field: &F, batch: &RaySampleBatch) -> RenderedBatch {
    let mut out = RenderedBatch::default();
    render_rays_into(field, batch, &mut out);
    out
}

/// Composited colors only, rays processed in parallel; identical to the
/// colors of [`render_rays`] for any worker count.
pub fn render_colors<F: RadianceField + ?Sized>(field: &F, batch: &RaySampleBatch) -> Vec<Vec3> {
    let k = batch.samples_per_ray;
    (0..batch.ray_count())
        .into_par_iter()
        .map(|r| {
            if !batch.hit[r] {
                return Vec3::zeros();
            }
            let mut tr = vec![0.0; k];
            let mut al = vec![0.0; k];
            let mut de = vec![0.0; k];
            let mut sa = vec![FieldSample::EMPTY; k];
            composite_ray(
                field,
                batch.ray_points(r),
                batch.ray_t(r),
                batch.far[r],
                &mut tr,
                &mut al,
                &mut de,
                &mut sa,
            )
        })
        .collect()
}

/// Full-image render with deterministic sample placement.
pub fn render_image<F: RadianceField + ?Sized>(
    field: &F,
    intr: &Intrinsics,
    pose: &Pose,
    settings: &SampleSettings,
) -> Result<Image> {
    let batch = RaySampleBatch::full_image(intr, pose, settings)?;
    let colors = render_colors(field, &batch);
    Ok(Image::from_pixels(intr.width, intr.height, colors))
}

/// Gradients with respect to each sample's density and color, given the
/// loss gradient with respect to each ray's composited color.
pub fn backprop_sample_gradients_into(
    rendered: &RenderedBatch,
    dl_dc: &[Vec3],
    out: &mut Vec<SampleGradient>,
) {
    let k = rendered.samples_per_ray;
    let n = rendered.ray_count();
    assert_eq!(dl_dc.len(), n, "one color gradient per ray");
    out.clear();
    out.resize(n * k, SampleGradient::default());
    for r in 0..n {
        let g = dl_dc[r];
        if !rendered.hit[r] || g == Vec3::zeros() {
            continue;
        }
        let ray = rendered.ray(r);
        let grads = &mut out[r * k..(r + 1) * k];
        let mut suffix = Vec3::zeros();
        for i in (0..k).rev() {
            let t_i = ray.transmittance[i];
            let a_i = ray.alpha[i];
            let c_i = ray.samples[i].color;
            let weight = t_i * a_i;
            let t_next = t_i * (1.0 - a_i);
            let dc_dsigma = (c_i * t_next - suffix) * ray.delta[i];
            grads[i] = SampleGradient {
                d_density: g.dot(&dc_dsigma),
                d_color: g * weight,
            };
            suffix += c_i * weight;
        }
    }
}

pub fn backprop_sample_gradients(rendered: &RenderedBatch, dl_dc: &[Vec3]) -> Vec<SampleGradient> {
    let mut out = Vec::new();
    backprop_sample_gradients_into(rendered, dl_dc, &mut out);
    out
}

/// Chains sample gradients through the field's spatial derivatives.
pub fn point_gradients_into(
    rendered: &RenderedBatch,
    sample_grads: &[SampleGradient],
    out: &mut Vec<Vec3>,
) {
    out.clear();
    out.extend(rendered.samples.iter().zip(sample_grads).map(|(s, g)| {
        s.d_color.transpose() * g.d_color + s.d_density * g.d_density
    }));
}

/// `∂L/∂p_i` for every sample of every ray.
pub fn backprop_point_gradients(rendered: &RenderedBatch, dl_dc: &[Vec3]) -> Vec<Vec3> {
    let sample_grads = backprop_sample_gradients(rendered, dl_dc);
    let mut out = Vec::new();
    point_gradients_into(rendered, &sample_grads, &mut out);
    out
}

/// Sums the per-point gradients into the force on the camera origin and the
/// torque about it, averaged over the rays of the batch:
///
/// `∂L/∂o = mean_r Σ_i ∂L/∂p_i`, `τ = mean_r Σ_i t_i (d × ∂L/∂p_i)`.
pub fn aggregate_pose_gradient(batch: &RaySampleBatch, point_grads: &[Vec3]) -> PoseGradient {
    let k = batch.samples_per_ray;
    let n = batch.ray_count();
    assert_eq!(point_grads.len(), n * k, "one gradient per sample");
    let mut force = Vec3::zeros();
    let mut torque = Vec3::zeros();
    for r in 0..n {
        if !batch.hit[r] {
            continue;
        }
        let d = batch.directions[r];
        let mut ray_force = Vec3::zeros();
        let mut moment = Vec3::zeros();
        for (t, g) in batch.ray_t(r).iter().zip(&point_grads[r * k..(r + 1) * k]) {
            ray_force += g;
            moment += g * *t;
        }
        force += ray_force;
        torque += d.cross(&moment);
    }
    let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    PoseGradient {
        d_translation: force * scale,
        d_rotation: torque * scale,
        ray_count: n,
    }
}

/// Per-ray buffers reused by [`render_with_pose_gradient`].
#[derive(Clone, Debug, Default)]
pub struct RayScratch {
    transmittance: Vec<f64>,
    alpha: Vec<f64>,
    delta: Vec<f64>,
    samples: Vec<FieldSample>,
}

/// Forward and backward pass fused ray by ray. `color_grad(r, color)`
/// returns `∂L/∂C` for ray `r`; the per-point gradients are folded straight
/// into the pose gradient, so nothing per sample outlives its ray. Returns
/// the same gradient as [`backprop_point_gradients`] followed by
/// [`aggregate_pose_gradient`], up to summation order.
pub fn render_with_pose_gradient<F, G>(
    field: &F,
    batch: &RaySampleBatch,
    scratch: &mut RayScratch,
    mut color_grad: G,
) -> PoseGradient
where
    F: RadianceField + ?Sized,
    G: FnMut(usize, &Vec3) -> Vec3,
{
    let k = batch.samples_per_ray;
    let n = batch.ray_count();
    scratch.transmittance.resize(k, 0.0);
    scratch.alpha.resize(k, 0.0);
    scratch.delta.resize(k, 0.0);
    scratch.samples.resize(k, FieldSample::EMPTY);
    let mut force = Vec3::zeros();
    let mut torque = Vec3::zeros();
    for r in 0..n {
        if !batch.hit[r] {
            color_grad(r, &Vec3::zeros());
            continue;
        }
        let t = batch.ray_t(r);
        let color = composite_ray(
            field,
            batch.ray_points(r),
            t,
            batch.far[r],
            &mut scratch.transmittance,
            &mut scratch.alpha,
            &mut scratch.delta,
            &mut scratch.samples,
        );
        let g = color_grad(r, &color);
        if g == Vec3::zeros() {
            continue;
        }
        let mut suffix = Vec3::zeros();
        let mut ray_force = Vec3::zeros();
        let mut moment = Vec3::zeros();
        for i in (0..k).rev() {
            let s = &scratch.samples[i];
            let a_i = scratch.alpha[i];
            let weight = scratch.transmittance[i] * a_i;
            if s.d_density != Vec3::zeros() || s.d_color != Mat3::zeros() {
                let t_next = scratch.transmittance[i] * (1.0 - a_i);
                let dc_dsigma = (s.color * t_next - suffix) * scratch.delta[i];
                let p_grad =
                    s.d_color.transpose() * (g * weight) + s.d_density * g.dot(&dc_dsigma);
                ray_force += p_grad;
                moment += p_grad * t[i];
            }
            suffix += s.color * weight;
        }
        force += ray_force;
        torque += batch.directions[r].cross(&moment);
    }
    let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    PoseGradient {
        d_translation: force * scale,
        d_rotation: torque * scale,
        ray_count: n,
    }
}
