//! Walks through the phases of the hypothesis search by hand: free
//! exploration of the whole pool, then rounds of resampling around the
//! lowest-loss survivors.
//!
//! cargo run --release --example monte_carlo_search

use nerfpose::camera::{Intrinsics, SampleBounds, SampleSettings};
use nerfpose::field::{AnalyticScene, RadianceField};
use nerfpose::lie::{geodesic_rotation_error, perturb_pose, translation_error, Pose, Vec3};
use nerfpose::loss::{LossKind, PixelLoss};
use nerfpose::render::render_image;
use nerfpose::rng::RngStream;
use nerfpose::search::{eval_pixels, init_pool, optimize_round, resample, HypothesisPool, Objective, SearchConfig};

fn describe(pool: &HypothesisPool, truth: &Pose) {
    let best = pool.best().unwrap();
    println!(
        "  best #{:<2} loss {:.3e}  rotation error {:.2} deg  translation error {:.4}",
        best.id,
        best.loss_estimate,
        geodesic_rotation_error(&best.pose.rotation, &truth.rotation),
        translation_error(&best.pose, truth)
    );
}

fn main() -> nerfpose::Result<()> {
    let scene = AnalyticScene::reference();
    let intr = Intrinsics::from_fov(64, 64, 40.0)?;
    let cfg = SearchConfig::default();
    let settings = SampleSettings {
        samples_per_ray: cfg.samples_per_ray,
        bounds: SampleBounds::scene_box(scene.bounds()),
    };
    let truth = Pose::look_at(&Vec3::new(-1.5, 2.4, 0.9), &Vec3::zeros(), &Vec3::z());
    let observed = render_image(&scene, &intr, &truth, &settings)?;
    let start = perturb_pose(&truth, 15.0, 0.25, &mut RngStream::new(11, 0));
    let objective = Objective::new(&scene, intr, &observed, PixelLoss::new(LossKind::L2), &cfg)?;
    let seed = 11;

    let mut pool = init_pool(&start, &cfg, seed);
    let eval = eval_pixels(&intr, &cfg, seed, 0)?;
    optimize_round(&mut pool, &objective, cfg.explore_steps, &cfg, &eval, None)?;
    println!("exploration: {} hypotheses, {} steps", pool.len(), cfg.explore_steps);
    describe(&pool, &truth);

    for round in 0..cfg.rounds {
        let res = resample(&mut pool, &cfg, round, seed)?;
        let eval = eval_pixels(&intr, &cfg, seed, round + 1)?;
        optimize_round(&mut pool, &objective, cfg.resample_steps, &cfg, &eval, None)?;
        println!(
            "round {round}: {} survivors {:?}, {} re-seeded",
            res.survivors.len(),
            res.survivors,
            res.reseeded.len()
        );
        describe(&pool, &truth);
    }
    Ok(())
}
