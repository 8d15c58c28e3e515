use nerfpose::camera::Intrinsics;
use nerfpose::field::AnalyticScene;
use nerfpose::train::{grid_bounds, orbit_poses, render_dataset, test_indices, train_field, Split, TrainConfig};

#[test]
fn more_iterations_do_not_hurt_train_psnr() {
    let scene = AnalyticScene::single_sphere();
    let intr = Intrinsics::from_fov(48, 48, 40.0).unwrap();
    let mut ds = render_dataset(&scene, intr, &orbit_poses(16, 3.0, 1), 64).unwrap();
    for i in test_indices(16, 0.25) {
        ds.frames[i].split = Split::Test;
    }
    let bounds = grid_bounds(&scene);
    for seed in 0..3 {
        let psnr = |iterations| {
            let cfg = TrainConfig {
                iterations,
                ..TrainConfig::default()
            };
            train_field(&ds, [32; 3], bounds, &cfg, seed).unwrap().1.train_psnr
        };
        let (short, long) = (psnr(250), psnr(500));
        assert!(long >= short - 0.5, "seed {seed}: {short:.2} dB at 250, {long:.2} dB at 500");
    }
}
