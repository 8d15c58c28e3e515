//! Fits a voxel grid to renders of the single-sphere scene, reports held-out
//! PSNR, and round-trips the checkpoint.
//!
//! cargo run --release --example train_field [resolution] [iterations]

use nerfpose::camera::{Intrinsics, SampleBounds, SampleSettings};
use nerfpose::field::{load_checkpoint, save_checkpoint, AnalyticScene};
use nerfpose::train::{grid_bounds, mean_psnr, orbit_poses, render_dataset, test_indices, train_field, Split, TrainConfig};

fn main() -> nerfpose::Result<()> {
    let mut args = std::env::args().skip(1);
    let res: u32 = args.next().and_then(|s| s.parse().ok()).unwrap_or(32);
    let iterations: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);

    let scene = AnalyticScene::single_sphere();
    let intr = Intrinsics::from_fov(64, 64, 40.0)?;
    let mut dataset = render_dataset(&scene, intr, &orbit_poses(30, 3.0, 1), 64)?;
    for i in test_indices(30, 0.2) {
        dataset.frames[i].split = Split::Test;
    }
    let bounds = grid_bounds(&scene);
    let cfg = TrainConfig {
        iterations,
        ..TrainConfig::default()
    };
    let (field, report) = train_field(&dataset, [res; 3], bounds, &cfg, 0)?;
    for (it, loss) in &report.loss_log {
        println!("iteration {it:>5}  batch loss {loss:.3e}");
    }
    println!(
        "{res}^3 grid: train PSNR {:.2} dB, test PSNR {:.2} dB",
        report.train_psnr,
        report.test_psnr.unwrap_or(f64::NAN)
    );

    let dir = std::env::temp_dir().join("nerfpose_train_example");
    std::fs::create_dir_all(&dir).ok();
    let path = dir.join("field.nrfgrid");
    save_checkpoint(&field, &path)?;
    let back = load_checkpoint(&path)?;
    let settings = SampleSettings {
        samples_per_ray: cfg.samples_per_ray,
        bounds: SampleBounds::scene_box(bounds),
    };
    let psnr = mean_psnr(&back, &dataset, Split::Test, &settings)?.unwrap_or(f64::NAN);
    println!("reloaded {}: test PSNR {psnr:.2} dB", path.display());
    Ok(())
}
