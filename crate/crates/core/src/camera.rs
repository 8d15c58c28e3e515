//! Pinhole camera model, ray generation and per-ray sample placement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::lie::{Pose, Vec3};

/// Pinhole intrinsics in pixels. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`
/// with row `j = 0` at the top of the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square image with the principal point at its center and the given
    /// horizontal field of view.
    pub fn from_fov(width: u32, height: u32, fov_x_deg: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel_center(&self, index: u32) -> (f64, f64) {
        let x = index % self.width;
        let y = index / self.width;
        (x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Camera-frame direction (unnormalized, z = -1) through pixel `(u, v)`.
    pub fn camera_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0)
    }

    /// Projects a world point to continuous pixel coordinates; `None` when
    /// the point is not in front of the camera.
    pub fn project(&self, pose: &Pose, p: &Vec3) -> Option<(f64, f64)> {
        let pc = pose.inverse_transform_point(p);
        if pc.z >= 0.0 {
            return None;
        }
        let depth = -pc.z;
        Some((
            self.cx + self.fx * pc.x / depth,
            self.cy - self.fy * pc.y / depth,
        ))
    }
}

/// World-space ray through continuous pixel coordinates `(u, v)`. The origin
/// is the camera center; the direction has unit length.
pub fn pixel_to_ray(intr: &Intrinsics, pose: &Pose, u: f64, v: f64) -> Result<(Vec3, Vec3)> {
    if !(0.0..=intr.width as f64).contains(&u) || !(0.0..=intr.height as f64).contains(&v) {
        return Err(Error::PixelOutOfBounds {
            x: u,
            y: v,
            width: intr.width,
            height: intr.height,
        });
    }
    let d = pose.rotation.apply(&intr.camera_direction(u, v)).normalize();
    Ok((pose.translation, d))
}

/// Fills `out` with one sample per equal-width bin of `[near, far]`:
/// a uniform draw when `rng` is given, the bin midpoint otherwise.
pub fn stratified_samples_into<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    out: &mut [f64],
    rng: Option<&mut R>,
) {
    let k = out.len();
    let width = (far - near) / k as f64;
    match rng {
        Some(rng) => {
            for (i, t) in out.iter_mut().enumerate() {
                let lo = near + width * i as f64;
                let hi = near + width * (i + 1) as f64;
                let u: f64 = rng.random();
                let s = lo + width * u;
                *t = if s >= hi { hi.next_down() } else { s };
            }
        }
        None => {
            for (i, t) in out.iter_mut().enumerate() {
                *t = near + width * (i as f64 + 0.5);
            }
        }
    }
}

pub fn stratified_samples<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    k: usize,
    rng: Option<&mut R>,
) -> Vec<f64> {
    let mut out = vec![0.0; k];
    stratified_samples_into(near, far, &mut out, rng);
    out
}

/// `batch_size` distinct pixel indices drawn uniformly without replacement.
pub fn sample_pixel_batch<R: Rng + ?Sized>(
    intr: &Intrinsics,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let n = intr.pixel_count();
    if batch_size > n {
        return Err(Error::InvalidConfig(format!(
            "batch of {batch_size} rays exceeds the {n} pixels of the image"
        )));
    }
    Ok(rand::seq::index::sample(rng, n, batch_size)
        .into_iter()
        .map(|i| i as u32)
        .collect())
}

/// How the sampling interval of each ray is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleBounds {
    /// The same `[near, far]` for every ray.
    Fixed { near: f64, far: f64 },
    /// The ray's intersection with `aabb`, widened by `margin` times the
    /// chord length on both ends. Rays missing the box get no samples.
    Box { aabb: Aabb, margin: f64 },
}

impl SampleBounds {
    pub fn scene_box(aabb: Aabb) -> Self {
        SampleBounds::Box { aabb, margin: 0.05 }
    }

    pub fn interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        match *self {
            SampleBounds::Fixed { near, far } => Some((near, far)),
            SampleBounds::Box { aabb, margin } => {
                let (enter, exit) = aabb.intersect_ray(origin, dir)?;
                let len = exit - enter;
                let near = (enter - margin * len).max(0.0);
                let far = exit + margin * len;
                (far > near).then_some((near, far))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSettings {
    pub samples_per_ray: usize,
    pub bounds: SampleBounds,
}

/// Rays for a set of pixels with `samples_per_ray` samples each, stored
/// flat: sample `i` of ray `r` lives at index `r * samples_per_ray + i`.
#[derive(Clone, Debug, Default)]
pub struct RaySampleBatch {
    pub samples_per_ray: usize,
    pub pixels: Vec<u32>,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    /// End of each ray's sampling interval; closes the last segment.
    pub far: Vec<f64>,
    /// `false` for rays whose interval is empty; they carry no samples and
    /// render as background.
    pub hit: Vec<bool>,
    pub t: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl RaySampleBatch {
    pub fn build<R: Rng + ?Sized>(
        intr: &Intrinsics,
        pose: &Pose,
        pixels: &[u32],
        settings: &SampleSettings,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        let mut batch = RaySampleBatch::default();
        batch.rebuild(intr, pose, pixels, settings, rng)?;
        Ok(batch)
    }

    /// [`RaySampleBatch::build`] into existing allocations.
    pub fn rebuild<R: Rng + ?Sized>(
        &mut self,
        intr: &Intrinsics,
        pose: &Pose,
        pixels: &[u32],
        settings: &SampleSettings,
        mut rng: Option<&mut R>,
    ) -> Result<()> {
        let k = settings.samples_per_ray;
        if k == 0 {
            return Err(Error::InvalidConfig("samples_per_ray must be >= 1".into()));
        }
        let n = pixels.len();
        self.samples_per_ray = k;
        self.pixels.clear();
        self.pixels.extend_from_slice(pixels);
        self.origins.clear();
        self.directions.clear();
        self.far.clear();
        self.hit.clear();
        self.t.clear();
        self.t.resize(n * k, 0.0);
        self.points.clear();
        self.points.resize(n * k, Vec3::zeros());
        for (r, &pixel) in pixels.iter().enumerate() {
            if pixel as usize >= intr.pixel_count() {
                let (x, y) = intr.pixel_center(pixel);
                return Err(Error::PixelOutOfBounds {
                    x,
                    y,
                    width: intr.width,
                    height: intr.height,
                });
            }
            let (u, v) = intr.pixel_center(pixel);
            let (o, d) = pixel_to_ray(intr, pose, u, v)?;
            self.origins.push(o);
            self.directions.push(d);
            let ts = &mut self.t[r * k..(r + 1) * k];
            match settings.bounds.interval(&o, &d) {
                Some((near, far)) => {
                    stratified_samples_into(near, far, ts, rng.as_deref_mut());
                    for (i, &t) in ts.iter().enumerate() {
                        self.points[r * k + i] = o + d * t;
                    }
                    self.far.push(far);
                    self.hit.push(true);
                }
                None => {
                    self.far.push(0.0);
                    self.hit.push(false);
                }
            }
        }
        Ok(())
    }

    /// Every pixel of the image in raster order, deterministic midpoints.
    pub fn full_image(intr: &Intrinsics, pose: &Pose, settings: &SampleSettings) -> Result<Self> {
        let pixels: Vec<u32> = (0..intr.pixel_count() as u32).collect();
        Self::build::<rand::rngs::ThreadRng>(intr, pose, &pixels, settings, None)
    }

    pub fn ray_count(&self) -> usize {
        self.pixels.len()
    }

    pub fn ray_t(&self, r: usize) -> &[f64] {
        &self.t[r * self.samples_per_ray..(r + 1) * self.samples_per_ray]
    }

    pub fn ray_points(&self, r: usize) -> &[Vec3] {
        &self.points[r * self.samples_per_ray..(r + 1) * self.samples_per_ray]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Rotation3;
    use crate::rng::RngStream;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn intr() -> Intrinsics {
        Intrinsics::from_fov(64, 48, 40.0).unwrap()
    }

    #[test]
    fn principal_ray_looks_down_minus_z() {
        let i = intr();
        let (o, d) = pixel_to_ray(&i, &Pose::identity(), i.cx, i.cy).unwrap();
        assert_eq!(o, Vec3::zeros());
        assert_relative_eq!(d, -Vec3::z(), epsilon = 1e-15);
    }

    #[test]
    fn rotated_pose_rotates_principal_ray() {
        let i = intr();
        let rot = Rotation3::about_y(FRAC_PI_2);
        let pose = Pose::new(rot, Vec3::new(1.0, 2.0, 3.0));
        let (o, d) = pixel_to_ray(&i, &pose, i.cx, i.cy).unwrap();
        assert_eq!(o, pose.translation);
        assert_relative_eq!(d, rot.apply(&-Vec3::z()), epsilon = 1e-15);
        assert_relative_eq!(d, -Vec3::x(), epsilon = 1e-15);
    }

    #[test]
    fn directions_are_unit_length() {
        let i = intr();
        let pose = Pose::look_at(&Vec3::new(1.0, -2.0, 0.5), &Vec3::zeros(), &Vec3::z());
        for idx in 0..i.pixel_count() as u32 {
            let (u, v) = i.pixel_center(idx);
            let (_, d) = pixel_to_ray(&i, &pose, u, v).unwrap();
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_an_error() {
        let i = intr();
        assert!(matches!(
            pixel_to_ray(&i, &Pose::identity(), -0.5, 3.0),
            Err(Error::PixelOutOfBounds { .. })
        ));
        assert!(pixel_to_ray(&i, &Pose::identity(), 3.0, 48.5).is_err());
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn stratified_examples() {
        let mut rng = RngStream::new(0, 0);
        let one = stratified_samples(0.0, 1.0, 1, Some(&mut rng));
        assert!(one[0] >= 0.0 && one[0] < 1.0);
        let mid = stratified_samples::<RngStream>(0.0, 1.0, 4, None);
        assert_eq!(mid, vec![0.125, 0.375, 0.625, 0.875]);
        let a = stratified_samples(2.0, 5.0, 64, Some(&mut RngStream::new(4, 1)));
        let b = stratified_samples(2.0, 5.0, 64, Some(&mut RngStream::new(4, 1)));
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&t| (2.0..=5.0).contains(&t)));
    }

    #[test]
    fn pixel_batch_examples() {
        let i = Intrinsics::from_fov(64, 64, 40.0).unwrap();
        let mut rng = RngStream::new(3, 0);
        let mut all = sample_pixel_batch(&i, 4096, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..4096).collect::<Vec<u32>>());

        let b = sample_pixel_batch(&i, 1024, &mut RngStream::new(8, 2)).unwrap();
        let mut s = b.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 1024);
        assert!(b.iter().all(|&p| p < 4096));
        assert_eq!(b, sample_pixel_batch(&i, 1024, &mut RngStream::new(8, 2)).unwrap());
        assert!(sample_pixel_batch(&i, 4097, &mut rng).is_err());
    }

    #[test]
    fn batch_points_lie_on_rays_and_project_back() {
        let i = intr();
        let pose = Pose::look_at(&Vec3::new(0.0, -4.0, 1.0), &Vec3::zeros(), &Vec3::z());
        let settings = SampleSettings {
            samples_per_ray: 16,
            bounds: SampleBounds::Fixed { near: 1.0, far: 7.0 },
        };
        let pixels: Vec<u32> = (0..i.pixel_count() as u32).step_by(7).collect();
        let mut rng = RngStream::new(1, 1);
        let batch = RaySampleBatch::build(&i, &pose, &pixels, &settings, Some(&mut rng)).unwrap();
        for r in 0..batch.ray_count() {
            let (u0, v0) = i.pixel_center(batch.pixels[r]);
            let ts = batch.ray_t(r);
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
            for (t, p) in ts.iter().zip(batch.ray_points(r)) {
                assert_eq!(*p, batch.origins[r] + batch.directions[r] * *t);
                let (u, v) = i.project(&pose, p).unwrap();
                assert!((u - u0).abs() < 1e-6 && (v - v0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn box_bounds_widen_the_chord_and_skip_misses() {
        let aabb = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0));
        let bounds = SampleBounds::scene_box(aabb);
        let (near, far) = bounds
            .interval(&Vec3::new(0.0, 0.0, 5.0), &-Vec3::z())
            .unwrap();
        assert_relative_eq!(near, 4.0 - 0.1, epsilon = 1e-12);
        assert_relative_eq!(far, 6.0 + 0.1, epsilon = 1e-12);
        assert!(bounds
            .interval(&Vec3::new(3.0, 0.0, 5.0), &-Vec3::z())
            .is_none());
    }
}
