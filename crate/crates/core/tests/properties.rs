use proptest::prelude::*;

use nerfpose::demo2d::{run_demo, Demo2dConfig, Parameterization, PlanarPose};
use nerfpose::lie::{geodesic_rotation_error, jitter_pose, perturb_pose, Pose, Vec2, Vec3};
use nerfpose::rng::RngStream;
use nerfpose::search::{init_pool, resample, SearchConfig};
use nerfpose::train::test_indices;

fn base_pose() -> Pose {
    Pose::look_at(&Vec3::new(1.0, -2.5, 1.2), &Vec3::zeros(), &Vec3::z())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jitter_stays_within_its_radii(seed in any::<u64>(), rot in 0.0f64..30.0, trans in 0.0f64..1.0) {
        let p = base_pose();
        let q = jitter_pose(&p, rot, trans, &mut RngStream::new(seed, 0));
        prop_assert!(geodesic_rotation_error(&p.rotation, &q.rotation) <= rot + 1e-9);
        prop_assert!((q.translation - p.translation).amax() <= trans);
    }

    #[test]
    fn perturbation_translation_is_bounded(seed in any::<u64>(), rot in 0.0f64..30.0, trans in 0.0f64..1.0) {
        let p = base_pose();
        let q = perturb_pose(&p, rot, trans, &mut RngStream::new(seed, 0));
        prop_assert!((q.translation - p.translation).amax() <= trans);
        // Three sequential rotations of at most `rot` each.
        prop_assert!(geodesic_rotation_error(&p.rotation, &q.rotation) <= 3.0 * rot + 1e-9);
    }

    #[test]
    fn survivor_counts_shrink_and_stay_in_range(pool in 1usize..200, ratio in 0.01f64..1.0, round in 0u32..6) {
        let cfg = SearchConfig { pool_size: pool, keep_ratio: ratio, ..SearchConfig::default() };
        let now = cfg.survivor_count(round);
        prop_assert!(now >= 1 && now <= pool);
        prop_assert!(cfg.survivor_count(round + 1) <= now);
    }

    #[test]
    fn resampling_keeps_the_best_and_reseeds_the_rest(
        losses in proptest::collection::vec(0.0f64..10.0, 64),
        seed in any::<u64>(),
        round in 0u32..4,
    ) {
        let cfg = SearchConfig::default();
        let mut pool = init_pool(&base_pose(), &cfg, seed);
        for (h, l) in pool.hypotheses.iter_mut().zip(&losses) {
            h.loss_estimate = *l;
        }
        let best = pool.ranking()[0];
        let before: Vec<Pose> = pool.hypotheses.iter().map(|h| h.pose).collect();
        let res = resample(&mut pool, &cfg, round, seed).unwrap();
        prop_assert_eq!(res.survivors.len(), cfg.survivor_count(round));
        prop_assert!(res.survivors.contains(&best));
        prop_assert_eq!(res.survivors.len() + res.reseeded.len(), cfg.pool_size);
        for &s in &res.survivors {
            prop_assert_eq!(pool.hypotheses[s].pose, before[s]);
        }
        for &(id, src) in &res.reseeded {
            prop_assert!(res.survivors.contains(&src));
            let q = &pool.hypotheses[id].pose;
            prop_assert!(geodesic_rotation_error(&q.rotation, &before[src].rotation) <= cfg.resample_rot_deg + 1e-9);
            prop_assert!((q.translation - before[src].translation).amax() <= cfg.resample_trans);
        }
    }

    #[test]
    fn decoupled_translation_paths_are_straight(x in -2.0f64..2.0, y in -2.0f64..2.0, theta in -3.0f64..3.0) {
        prop_assume!(x.hypot(y) > 0.1);
        let cfg = Demo2dConfig {
            target: PlanarPose { theta, x, y },
            max_steps: 400,
            ..Demo2dConfig::default()
        };
        let run = run_demo(&cfg, Parameterization::So2xT2).unwrap();
        prop_assert!(run.max_line_deviation(Vec2::zeros(), Vec2::new(x, y)) < 1e-6);
    }

    #[test]
    fn test_split_size_is_the_floor(n in 1usize..200, fraction in 0.0f64..1.0) {
        let idx = test_indices(n, fraction);
        prop_assert_eq!(idx.len(), (n as f64 * fraction).floor() as usize);
        prop_assert!(idx.iter().all(|&i| i < n));
    }
}
