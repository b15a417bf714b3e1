//! Procedural multi-environment traverses with exact ground-truth poses.
//!
//! A [`Scene`] is a soup of simple primitives (ground plane, box buildings,
//! poles, spherical clutter) along a route. Frames are area-weighted surface
//! samples around a sensor driving the route, corrupted per
//! [`EnvironmentPreset`]. Frames at the same route position share their pose
//! across environments, which is what makes them same-place positives.

mod frame;
mod scene;
mod traverse;

pub use frame::{resample, sample_frame, sample_surface_points, EnvironmentPreset, BASE_RANGE};
pub use scene::{build_scene, Primitive, Route, Scene, SceneSpec, ROAD_HALF_WIDTH, SENSOR_HEIGHT};
pub use traverse::{
    frame_positions, frame_rng, generate_frames, generate_traverse, make_registration_pair, write_traverse,
    EulerRanges, Interval, RegistrationPair, TraverseConfig, DEFAULT_TRANSLATION_RANGE,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Environment;
    use crate::io;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_scene(seed: u64) -> Scene {
        build_scene(&SceneSpec::with_route_length(seed, 400.0)).unwrap()
    }

    #[test]
    fn scene_is_deterministic() {
        let a = small_scene(7);
        let b = small_scene(7);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), small_scene(8).fingerprint());
    }

    #[test]
    fn empty_scene_is_ground_only() {
        let mut spec = SceneSpec::with_route_length(1, 200.0);
        spec.building_count = 0;
        spec.pole_count = 0;
        spec.clutter_count = 0;
        let scene = build_scene(&spec).unwrap();
        assert_eq!(scene.primitives.len(), 1);
        assert!(matches!(scene.primitives[0], Primitive::Ground { .. }));
    }

    #[test]
    fn primitive_count_is_requested_plus_ground() {
        let spec = SceneSpec::with_route_length(7, 2500.0);
        let scene = build_scene(&spec).unwrap();
        assert_eq!(
            scene.primitives.len(),
            spec.building_count + spec.pole_count + spec.clutter_count + 1
        );
    }

    #[test]
    fn degenerate_route_is_rejected() {
        let mut spec = SceneSpec::with_route_length(1, 200.0);
        spec.route.truncate(1);
        assert!(build_scene(&spec).is_err());
        let short = SceneSpec::with_route_length(1, 30.0);
        assert!(build_scene(&short).is_err());
    }

    #[test]
    fn buildings_keep_clear_of_the_road() {
        let scene = small_scene(3);
        let route = scene.route();
        for p in &scene.primitives {
            if let Primitive::Building { min, max } = p {
                let c = route.clearance_to_box(&min.xy(), &max.xy());
                assert!(c > ROAD_HALF_WIDTH, "building intrudes on road: {c}");
            }
        }
    }

    #[test]
    fn clean_frame_lies_on_surfaces() {
        let scene = small_scene(5);
        let pose = scene.sensor_pose(120.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let preset = EnvironmentPreset::clean(Environment::Sunny);
        let cloud = sample_frame(&scene, &pose, &preset, 2048, &mut rng).unwrap();
        assert_eq!(cloud.len(), 2048);
        assert_eq!(cloud.pose, Some(pose));
        for p in &cloud.points {
            let w = pose.apply(p);
            assert!(scene.distance_to_surface(&w) < 1e-9);
            assert!(p.norm() <= preset.max_range + 1e-9);
        }
    }

    fn off_surface(scene: &Scene, preset: EnvironmentPreset) -> usize {
        let pose = scene.sensor_pose(200.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cloud = sample_frame(scene, &pose, &preset, 4096, &mut rng).unwrap();
        cloud
            .points
            .iter()
            .filter(|p| scene.distance_to_surface(&pose.apply(p)) > 0.5)
            .count()
    }

    #[test]
    fn rain_has_speckle_and_sunny_does_not() {
        let scene = small_scene(5);
        assert_eq!(off_surface(&scene, EnvironmentPreset::default_for(Environment::Sunny)), 0);
        let rain = off_surface(&scene, EnvironmentPreset::default_for(Environment::Rain));
        // 3% speckle of 4096 is ~123 points, most of them away from surfaces
        assert!(rain > 60, "rain off-surface count {rain}");
    }

    #[test]
    fn every_preset_emits_exact_count() {
        let scene = small_scene(5);
        let pose = scene.sensor_pose(50.0);
        for preset in EnvironmentPreset::all_defaults() {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            assert_eq!(sample_frame(&scene, &pose, &preset, 300, &mut rng).unwrap().len(), 300);
        }
    }

    #[test]
    fn sensor_outside_scene_is_rejected() {
        let scene = small_scene(5);
        let mut pose = scene.sensor_pose(0.0);
        pose.translation += Vector3::new(1e5, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let preset = EnvironmentPreset::default_for(Environment::Sunny);
        assert!(sample_frame(&scene, &pose, &preset, 128, &mut rng).is_err());
        assert!(sample_frame(&scene, &scene.sensor_pose(0.0), &preset, 10, &mut rng).is_err());
    }

    #[test]
    fn frame_count_follows_spacing() {
        assert_eq!(frame_positions(2500.0, 20.0).len(), 125);
        let s = frame_positions(2500.0, 20.0);
        assert!(s.windows(2).all(|w| (w[1] - w[0] - 20.0).abs() < 1e-9));
    }

    #[test]
    fn traverse_shares_poses_and_is_deterministic() {
        let scene = small_scene(9);
        let presets = vec![
            EnvironmentPreset::default_for(Environment::Sunny),
            EnvironmentPreset::default_for(Environment::Night),
        ];
        let cfg = TraverseConfig {
            n_points: 128,
            seed: 4,
            ..TraverseConfig::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = generate_traverse(&scene, &presets, &cfg, dir_a.path()).unwrap();
        let b = generate_traverse(&scene, &presets, &cfg, dir_b.path()).unwrap();
        let n_pos = frame_positions(scene.route().length, 20.0).len();
        assert_eq!(a.rows.len(), 2 * n_pos);
        assert_eq!(
            std::fs::read(dir_a.path().join("manifest.csv")).unwrap(),
            std::fs::read(dir_b.path().join("manifest.csv")).unwrap()
        );
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(
                std::fs::read(a.cloud_path(ra)).unwrap(),
                std::fs::read(b.cloud_path(rb)).unwrap()
            );
        }
        for i in 0..n_pos {
            let (x, y) = (&a.rows[i], &a.rows[n_pos + i]);
            assert_eq!(x.route_s, y.route_s);
            assert_eq!((x.x, x.y, x.z), (y.x, y.y, y.z));
            assert_eq!(
                io::read_pose(&a.resolve(&x.pose_path)).unwrap(),
                io::read_pose(&a.resolve(&y.pose_path)).unwrap()
            );
        }
        let reread = io::read_manifest(&dir_a.path().join("manifest.csv")).unwrap();
        assert_eq!(reread.rows, a.rows);
        let cloud = reread.load_cloud(&reread.rows[0]).unwrap();
        assert!(cloud.is_normalized());
        assert_eq!(cloud.len(), 128);
    }

    #[test]
    fn registration_pair_contracts() {
        let scene = small_scene(5);
        let cfg = TraverseConfig {
            n_points: 256,
            ..TraverseConfig::default()
        };
        let frame = generate_frames(&scene, &[EnvironmentPreset::default_for(Environment::Sunny)], &cfg)
            .unwrap()
            .remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zero = make_registration_pair(&frame, &EulerRanges::zero(), (0.0, 0.0), &mut rng).unwrap();
        assert_eq!(zero.truth, crate::geometry::RigidTransform::identity());
        assert_eq!(zero.source.points, zero.target.points);

        let pair = make_registration_pair(&frame, &EulerRanges::evaluation(), DEFAULT_TRANSLATION_RANGE, &mut rng).unwrap();
        for (s, t) in pair.source.points.iter().zip(&pair.target.points) {
            assert!((pair.truth.apply(s) - t).norm() < 1e-12);
        }
        for _ in 0..10_000 {
            let p = make_registration_pair(&frame, &EulerRanges::evaluation(), (0.0, 0.0), &mut rng).unwrap();
            let e = p.truth.euler();
            assert!(e.yaw.abs() <= 35.0 + 1e-9 && e.pitch.abs() <= 5.0 + 1e-9 && e.roll.abs() <= 5.0 + 1e-9);
        }
        let bad = EulerRanges {
            yaw: (1.0, -1.0),
            ..EulerRanges::zero()
        };
        assert!(make_registration_pair(&frame, &bad, (0.0, 0.0), &mut rng).is_err());
    }
}
