//! Compares the analytic pose gradient of every pixel loss against central
//! differences of the full-image loss at a few perturbed poses.
//!
//! cargo run --release --example gradient_check

use nerfpose::bench::{trial_setup, BenchmarkConfig, CameraConfig};
use nerfpose::camera::{SampleBounds, SampleSettings};
use nerfpose::field::AnalyticScene;
use nerfpose::gradcheck::{full_image_gradient, relative_errors, FdProbe};
use nerfpose::loss::{LossKind, PixelLoss};
use nerfpose::render::render_image;

fn main() -> nerfpose::Result<()> {
    let scene = AnalyticScene::reference();
    let camera = CameraConfig {
        width: 32,
        height: 32,
        ..CameraConfig::default()
    };
    let intr = camera.intrinsics()?;
    // Fixed near/far so sample distances do not move with the pose.
    let settings = SampleSettings {
        samples_per_ray: 32,
        bounds: SampleBounds::Fixed { near: 1.0, far: 5.0 },
    };
    let bench = BenchmarkConfig::default();

    println!("{:>4} {:>12} {:>12} {:>12} {:>12}", "pose", "loss", "value", "rel trans", "rel rot");
    for i in 0..3 {
        let (truth, pose, _) = trial_setup(&camera, &bench, 42, i);
        let observed = render_image(&scene, &intr, &truth, &settings)?;
        let probe = FdProbe::new(&scene, &intr, &settings, &pose, 1e-7)?;
        for kind in LossKind::ALL {
            let loss = PixelLoss::new(kind);
            let (value, analytic) = full_image_gradient(&scene, &intr, &settings, &observed, &loss, &pose)?;
            let (et, er) = relative_errors(&analytic, &probe.gradient(&loss, &observed));
            println!("{i:>4} {kind:>12} {value:>12.4e} {et:>12.2e} {er:>12.2e}");
        }
    }
    Ok(())
}
