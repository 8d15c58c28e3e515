//! Recovers a perturbed camera pose from one rendered image, with a single
//! hypothesis and with the full hypothesis pool.
//!
//! cargo run --release --example invert

use nerfpose::camera::{Intrinsics, SampleBounds, SampleSettings};
use nerfpose::field::{AnalyticScene, RadianceField};
use nerfpose::lie::{geodesic_rotation_error, perturb_pose, translation_error, Pose, Vec3};
use nerfpose::loss::{LossKind, PixelLoss};
use nerfpose::render::render_image;
use nerfpose::rng::RngStream;
use nerfpose::search::{run_search, Objective, SearchConfig};

fn main() -> nerfpose::Result<()> {
    let scene = AnalyticScene::reference();
    let intr = Intrinsics::from_fov(64, 64, 40.0)?;
    let cfg = SearchConfig {
        trace_stride: 256,
        ..SearchConfig::default()
    };
    let settings = SampleSettings {
        samples_per_ray: cfg.samples_per_ray,
        bounds: SampleBounds::scene_box(scene.bounds()),
    };

    let truth = Pose::look_at(&Vec3::new(2.2, -1.6, 1.2), &Vec3::zeros(), &Vec3::z());
    let observed = render_image(&scene, &intr, &truth, &settings)?;
    let mut rng = RngStream::new(3, 0);
    let start = perturb_pose(&truth, 15.0, 0.25, &mut rng);
    let report = |name: &str, p: &Pose| {
        println!(
            "{name:>9}: rotation error {:6.3} deg, translation error {:.4}",
            geodesic_rotation_error(&p.rotation, &truth.rotation),
            translation_error(p, &truth)
        )
    };
    report("start", &start);

    let objective = Objective::new(&scene, intr, &observed, PixelLoss::new(LossKind::L2), &cfg)?;
    let single = run_search(&objective, &start, &cfg.single(), 3)?;
    report("single", &single.best);
    let multi = run_search(&objective, &start, &cfg, 3)?;
    report("multiple", &multi.best);
    println!("estimate: {}", multi.best);
    Ok(())
}
