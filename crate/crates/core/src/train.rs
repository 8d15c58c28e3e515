//! Posed datasets and fitting a voxel grid to them.
//!
//! Training minimizes the mean per-ray L2 photometric error plus a total
//! variation penalty on raw density with Adam over every raw grid value.
//! Gradients reach the raw values through the same reverse compositing
//! sweep used for poses, then through the activations and the trilinear
//! weights.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_to_ray, stratified_samples_into, Intrinsics, SampleBounds, SampleSettings};
use crate::error::{Error, Result};
use crate::field::{sigmoid, softplus, Aabb, AnalyticScene, RadianceField, VoxelGridField};
use crate::image::Image;
use crate::lie::{Pose, Vec3};
use crate::render::render_image;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub file: String,
    pub pose: Pose,
    pub split: Split,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosedDataset {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
struct TransformsFile {
    intrinsics: Intrinsics,
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    file: String,
    split: Split,
    pose: Vec<f64>,
}

pub const TRANSFORMS_FILE: &str = "transforms.json";

impl PosedDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        for f in &self.frames {
            if f.image.width != w || f.image.height != h {
                return Err(Error::DimensionMismatch {
                    width: w,
                    height: h,
                    found_width: f.image.width,
                    found_height: f.image.height,
                });
            }
            if !f.pose.is_finite() {
                return Err(Error::MalformedPose(format!("frame {}", f.file)));
            }
        }
        Ok(())
    }

    /// Writes `transforms.json` and one PPM per frame into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let record = TransformsFile {
            intrinsics: self.intrinsics,
            frames: self
                .frames
                .iter()
                .map(|f| FrameRecord {
                    file: f.file.clone(),
                    split: f.split,
                    pose: f.pose.to_array().to_vec(),
                })
                .collect(),
        };
        for f in &self.frames {
            f.image.save_ppm(dir.join(&f.file))?;
        }
        let path = dir.join(TRANSFORMS_FILE);
        let text = serde_json::to_string_pretty(&record)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(TRANSFORMS_FILE);
        if !path.is_file() {
            return Err(Error::DatasetNotFound(dir.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: TransformsFile = serde_json::from_str(&text)?;
        let mut frames = Vec::with_capacity(record.frames.len());
        for f in record.frames {
            let values: [f64; 12] = f.pose.as_slice().try_into().map_err(|_| {
                Error::MalformedPose(format!("{}: expected 12 numbers, got {}", f.file, f.pose.len()))
            })?;
            let pose = Pose::from_array(&values)?;
            let image = Image::load_ppm(dir.join(&f.file))?;
            frames.push(Frame {
                file: f.file,
                pose,
                split: f.split,
                image,
            });
        }
        let ds = PosedDataset {
            intrinsics: record.intrinsics,
            frames,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Every image as it reads back from disk.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.image = f.image.quantized();
        }
        out
    }
}

/// `n` cameras at distance `radius` looking at the origin with +z up,
/// spread on a golden-angle spiral over elevations in `[-0.3, 0.8]` rad.
/// `seed` rotates the spiral in azimuth.
pub fn orbit_poses(n: usize, radius: f64, seed: u64) -> Vec<Pose> {
    let mut rng = RngStream::new(seed, 0);
    let offset: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let (lo, hi) = (-0.3f64, 0.8f64);
    (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) / n as f64;
            let z = lo.sin() + (hi.sin() - lo.sin()) * s;
            let el = z.asin();
            let az = offset + golden * i as f64;
            let eye = Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin()) * radius;
            Pose::look_at(&eye, &Vec3::zeros(), &Vec3::z())
        })
        .collect()
}

/// Test-frame indices: `⌊n · fraction⌋` of them, evenly spread.
pub fn test_indices(n: usize, fraction: f64) -> Vec<usize> {
    let m = (n as f64 * fraction).floor() as usize;
    (0..n).filter(|&i| (i + 1) * m / n > i * m / n).collect()
}

/// Renders `scene` from every pose with midpoint sampling over the scene's
/// bounding box. All frames are tagged [`Split::Train`].
pub fn render_dataset(
    scene: &AnalyticScene,
    intrinsics: Intrinsics,
    poses: &[Pose],
    samples_per_ray: usize,
) -> Result<PosedDataset> {
    let settings = SampleSettings {
        samples_per_ray,
        bounds: SampleBounds::scene_box(scene.bounds()),
    };
    let frames = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            Ok(Frame {
                file: format!("frame_{i:03}.ppm"),
                pose: *pose,
                split: Split::Train,
                image: render_image(scene, &intrinsics, pose, &settings)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosedDataset { intrinsics, frames })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub rays_per_iteration: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    /// The learning rate decays exponentially to this fraction of its
    /// initial value over the run.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the total-variation penalty on raw density.
    pub tv_weight: f64,
    pub init_raw_density: f32,
    /// Stratified jitter of sample distances.
    pub jitter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            rays_per_iteration: 1024,
            samples_per_ray: 64,
            learning_rate: 0.1,
            final_lr_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            tv_weight: 1e-4,
            init_raw_density: -4.0,
            jitter: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.iterations > 0
            && self.rays_per_iteration > 0
            && self.samples_per_ray > 0
            && self.learning_rate > 0.0
            && self.final_lr_fraction > 0.0
            && self.final_lr_fraction <= 1.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.tv_weight >= 0.0
            && self.init_raw_density.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }
}

/// One training ray: where it starts, where it points, its sample
/// distances and the color it should render.
#[derive(Clone, Debug)]
pub struct TrainRay {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t: Vec<f64>,
    pub far: f64,
    pub target: Vec3,
}

/// Gradients with respect to every raw grid value.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGradient {
    pub density: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl GridGradient {
    pub fn zeros(n: usize) -> Self {
        Self {
            density: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }
}

/// `(voxel, ∂L/∂raw density, ∂L/∂raw color)` contributions of one ray.
type Contribution = (usize, f64, [f64; 3]);

struct GridSample {
    stencil: Option<crate::field::TrilinearStencil>,
    raw_density: f64,
    color: Vec3,
    transmittance: f64,
    alpha: f64,
    delta: f64,
}

/// L2 error of one ray and its contributions to the raw-value gradient.
fn ray_backward(field: &VoxelGridField, ray: &TrainRay, out: &mut Vec<Contribution>) -> f64 {
    let k = ray.t.len();
    let mut samples = Vec::with_capacity(k);
    let mut trans = 1.0;
    let mut color = Vec3::zeros();
    for i in 0..k {
        let p = ray.origin + ray.direction * ray.t[i];
        let delta = if i + 1 < k { ray.t[i + 1] - ray.t[i] } else { ray.far - ray.t[i] };
        let stencil = field.stencil(&p);
        let (raw_density, sigma, c) = match &stencil {
            Some(st) => {
                let mut rd = 0.0;
                let mut rc = Vec3::zeros();
                for j in 0..8 {
                    let w = st.weight[j];
                    rd += w * field.raw_density[st.index[j]] as f64;
                    rc += Vec3::from(field.raw_color[st.index[j]].map(f64::from)) * w;
                }
                (rd, softplus(rd), rc.map(sigmoid))
            }
            None => (0.0, 0.0, Vec3::zeros()),
        };
        let alpha = -(-sigma * delta).exp_m1();
        color += c * (trans * alpha);
        samples.push(GridSample {
            stencil,
            raw_density,
            color: c,
            transmittance: trans,
            alpha,
            delta,
        });
        trans *= 1.0 - alpha;
    }
    let err = color - ray.target;
    let g = err * 2.0;
    let mut suffix = Vec3::zeros();
    for s in samples.iter().rev() {
        let weight = s.transmittance * s.alpha;
        let t_next = s.transmittance * (1.0 - s.alpha);
        let d_sigma = g.dot(&((s.color * t_next - suffix) * s.delta));
        let d_color = g * weight;
        suffix += s.color * weight;
        let Some(st) = &s.stencil else { continue };
        let d_raw_density = d_sigma * sigmoid(s.raw_density);
        let d_raw_color = d_color.component_mul(&s.color.component_mul(&(Vec3::repeat(1.0) - s.color)));
        for j in 0..8 {
            let w = st.weight[j];
            if w == 0.0 {
                continue;
            }
            out.push((
                st.index[j],
                w * d_raw_density,
                [w * d_raw_color.x, w * d_raw_color.y, w * d_raw_color.z],
            ));
        }
    }
    err.norm_squared()
}

/// Mean L2 ray error and its gradient; rays are processed in parallel and
/// their contributions summed in ray order.
pub fn photometric_loss_and_gradient(field: &VoxelGridField, rays: &[TrainRay]) -> (f64, GridGradient) {
    let per_ray: Vec<(f64, Vec<Contribution>)> = rays
        .par_iter()
        .map(|ray| {
            let mut out = Vec::new();
            let loss = ray_backward(field, ray, &mut out);
            (loss, out)
        })
        .collect();
    let n = rays.len().max(1) as f64;
    let mut grad = GridGradient::zeros(field.voxel_count());
    let mut loss = 0.0;
    for (l, contributions) in per_ray {
        loss += l;
        for (i, d, c) in contributions {
            grad.density[i] += d / n;
            for ch in 0..3 {
                grad.color[i][ch] += c[ch] / n;
            }
        }
    }
    (loss / n, grad)
}

/// `Σ (d_a - d_b)² / voxels` over face-adjacent voxel pairs of raw density;
/// adds `weight` times its gradient into `grad`.
pub fn total_variation(field: &VoxelGridField, weight: f64, grad: &mut [f64]) -> f64 {
    let [nx, ny, nz] = field.resolution.map(|v| v as usize);
    let n = field.voxel_count() as f64;
    let d = &field.raw_density;
    let mut tv = 0.0;
    let strides = [(1, nx), (nx, ny), (nx * ny, nz)];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = field.index(x, y, z);
                let coord = [x, y, z];
                for (axis, &(stride, len)) in strides.iter().enumerate() {
                    if coord[axis] + 1 >= len {
                        continue;
                    }
                    let j = i + stride;
                    let diff = d[i] as f64 - d[j] as f64;
                    tv += diff * diff;
                    let g = weight * 2.0 * diff / n;
                    grad[i] += g;
                    grad[j] -= g;
                }
            }
        }
    }
    tv / n
}

/// Full objective: photometric loss plus `tv_weight` times total variation.
pub fn training_loss_and_gradient(
    field: &VoxelGridField,
    rays: &[TrainRay],
    tv_weight: f64,
) -> (f64, GridGradient) {
    let (loss, mut grad) = photometric_loss_and_gradient(field, rays);
    let tv = if tv_weight > 0.0 {
        total_variation(field, tv_weight, &mut grad.density)
    } else {
        0.0
    };
    (loss + tv_weight * tv, grad)
}

/// Random training rays over all training frames.
pub fn sample_train_rays<R: Rng + ?Sized>(
    dataset: &PosedDataset,
    train: &[usize],
    bounds: &SampleBounds,
    count: usize,
    samples_per_ray: usize,
    jitter: bool,
    rng: &mut R,
) -> Result<Vec<TrainRay>> {
    let intr = &dataset.intrinsics;
    let mut rays = Vec::with_capacity(count);
    while rays.len() < count {
        let frame = &dataset.frames[train[rng.random_range(0..train.len())]];
        let pixel = rng.random_range(0..intr.pixel_count() as u32);
        let (u, v) = intr.pixel_center(pixel);
        let (origin, direction) = pixel_to_ray(intr, &frame.pose, u, v)?;
        let Some((near, far)) = bounds.interval(&origin, &direction) else {
            // Misses render black whatever the grid holds.
            continue;
        };
        let mut t = vec![0.0; samples_per_ray];
        stratified_samples_into(near, far, &mut t, jitter.then_some(&mut *rng));
        rays.push(TrainRay {
            origin,
            direction,
            t,
            far,
            target: frame.image.pixel(pixel),
        });
    }
    Ok(rays)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: u64,
    pub final_loss: f64,
    /// `(iteration, batch loss)` every 100 iterations and at the end.
    pub loss_log: Vec<(u64, f64)>,
    pub train_psnr: f64,
    pub test_psnr: Option<f64>,
}

/// Fits a `resolution` grid spanning `bounds` to the training frames.
pub fn train_field(
    dataset: &PosedDataset,
    resolution: [u32; 3],
    bounds: Aabb,
    config: &TrainConfig,
    seed: u64,
) -> Result<(VoxelGridField, TrainReport)> {
    config.validate()?;
    dataset.validate()?;
    let train: Vec<usize> = (0..dataset.frames.len())
        .filter(|&i| dataset.frames[i].split == Split::Train)
        .collect();
    if train.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "training needs at least 2 training frames, found {}",
            train.len()
        )));
    }
    let mut field = VoxelGridField::filled(resolution, bounds, config.init_raw_density, [0.0; 3])?;
    let sample_bounds = SampleBounds::scene_box(bounds);
    let n = field.voxel_count();
    let mut m = vec![0.0f64; 4 * n];
    let mut v = vec![0.0f64; 4 * n];
    let mut log = Vec::new();
    let mut last = f64::NAN;
    for it in 0..config.iterations {
        let mut rng = RngStream::derive(seed, &[it]);
        let rays = sample_train_rays(
            dataset,
            &train,
            &sample_bounds,
            config.rays_per_iteration,
            config.samples_per_ray,
            config.jitter,
            &mut rng,
        )?;
        let (loss, grad) = training_loss_and_gradient(&field, &rays, config.tv_weight);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { iteration: it });
        }
        last = loss;
        if it % 100 == 0 {
            log.push((it, loss));
        }
        let t = (it + 1) as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let progress = it as f64 / config.iterations as f64;
        let lr = config.learning_rate * config.final_lr_fraction.powf(progress);
        let update = |p: &mut f32, g: f64, m: &mut f64, v: &mut f64| {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + config.epsilon);
            *p = (*p as f64 - step) as f32;
        };
        for i in 0..n {
            update(&mut field.raw_density[i], grad.density[i], &mut m[i], &mut v[i]);
            for ch in 0..3 {
                let k = n + 3 * i + ch;
                update(&mut field.raw_color[i][ch], grad.color[i][ch], &mut m[k], &mut v[k]);
            }
        }
    }
    log.push((config.iterations, last));
    let settings = SampleSettings {
        samples_per_ray: config.samples_per_ray,
        bounds: sample_bounds,
    };
    let train_psnr = mean_psnr(&field, dataset, Split::Train, &settings)?.unwrap_or(f64::NAN);
    let test_psnr = mean_psnr(&field, dataset, Split::Test, &settings)?;
    let report = TrainReport {
        iterations: config.iterations,
        final_loss: last,
        loss_log: log,
        train_psnr,
        test_psnr,
    };
    Ok((field, report))
}

/// Mean PSNR of `field` renders against the frames of one split; `None`
/// when the split is empty.
pub fn mean_psnr<F: RadianceField + ?Sized>(
    field: &F,
    dataset: &PosedDataset,
    split: Split,
    settings: &SampleSettings,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0;
    for f in dataset.split(split) {
        let img = render_image(field, &dataset.intrinsics, &f.pose, settings)?;
        total += img.psnr(&f.image);
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Default grid bounds for a scene: its bounding box grown by 5%.
pub fn grid_bounds(scene: &AnalyticScene) -> Aabb {
    let b = scene.bounds();
    let pad = 0.05 * (b.max() - b.min()).max();
    b.expanded(pad)
}

pub fn checkpoint_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join("field.nrfgrid")
}

/// Central differences of [`training_loss_and_gradient`]'s loss in every raw
/// value with step `h`. Use a power of two so `f32` perturbations are exact.
pub fn finite_difference_gradient(
    field: &VoxelGridField,
    rays: &[TrainRay],
    tv_weight: f64,
    h: f32,
) -> GridGradient {
    let mut probe = field.clone();
    let n = field.voxel_count();
    let mut out = GridGradient::zeros(n);
    let eval = |probe: &VoxelGridField| training_loss_and_gradient(probe, rays, tv_weight).0;
    for i in 0..n {
        let base = probe.raw_density[i];
        probe.raw_density[i] = base + h;
        let plus = eval(&probe);
        probe.raw_density[i] = base - h;
        let minus = eval(&probe);
        probe.raw_density[i] = base;
        out.density[i] = (plus - minus) / (2.0 * h as f64);
        for ch in 0..3 {
            let base = probe.raw_color[i][ch];
            probe.raw_color[i][ch] = base + h;
            let plus = eval(&probe);
            probe.raw_color[i][ch] = base - h;
            let minus = eval(&probe);
            probe.raw_color[i][ch] = base;
            out.color[i][ch] = (plus - minus) / (2.0 * h as f64);
        }
    }
    out
}

/// `‖a - b‖ / ‖b‖` over all raw values.
pub fn relative_gradient_error(a: &GridGradient, b: &GridGradient) -> f64 {
    let flat = |g: &GridGradient| -> Vec<f64> {
        g.density
            .iter()
            .copied()
            .chain(g.color.iter().flat_map(|c| c.iter().copied()))
            .collect()
    };
    let (fa, fb) = (flat(a), flat(b));
    let diff: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = fb.iter().map(|y| y * y).sum();
    (diff / norm).sqrt()
}
