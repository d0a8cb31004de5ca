use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vats_core::constraints::{
    camera_placement_rules, check_trajectory, crowding_rule, evaluate_plan, manipulation_angle, AnatomicalScene,
    PlanParams, Role,
};
use vats_core::geometry::{angle_between, dof_cone_of, CameraPose, Cone, Hand, TrocarTrajectory};
use vats_core::mesh::box_mesh;
use vats_core::phantom::{nominal_plan, synthetic_thorax};
use vats_core::{Isometry3, Point3, Vector3};

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_isometry(rng: &mut impl Rng, reach: f64) -> Isometry3<f64> {
    let t = Vector3::new(
        rng.gen_range(-reach..reach),
        rng.gen_range(-reach..reach),
        rng.gen_range(-reach..reach),
    );
    Isometry3::new(t, random_unit(rng) * rng.gen_range(0.0..std::f64::consts::PI))
}

/// Skin box reaching 281 mm toward −x and 280 mm toward +x from the target.
fn box_scene() -> AnatomicalScene {
    let skin = box_mesh(
        "skin",
        Point3::new(-281.0, -200.0, -200.0),
        Point3::new(280.0, 200.0, 200.0),
    );
    let n = skin.triangle_count();
    AnatomicalScene::new(vec![(Role::Skin, skin)], Point3::origin(), 0..n, 0..n).unwrap()
}

#[test]
fn trajectory_length_boundary() {
    let scene = box_scene();
    let params = PlanParams::default();
    let length_rule = |x: f64| {
        let t = TrocarTrajectory::new(Point3::new(x, 0.0, 0.0), Point3::origin(), Hand::Left).unwrap();
        let rules = check_trajectory(&t, &scene, &params).unwrap();
        rules.into_iter().find(|r| r.id == "left.length").unwrap()
    };
    let at = length_rule(280.0);
    assert_eq!(at.value, Some(280.0));
    assert!(at.pass);
    let over = length_rule(-281.0);
    assert_eq!(over.value, Some(281.0));
    assert!(!over.pass);
}

fn angle_at(deg: f64) -> (f64, bool) {
    let params = PlanParams::default();
    let r = 120.0;
    let a = deg.to_radians();
    let left = TrocarTrajectory::new(Point3::new(r, 0.0, 0.0), Point3::origin(), Hand::Left).unwrap();
    let right = TrocarTrajectory::new(
        Point3::new(r * a.cos(), r * a.sin(), 0.0),
        Point3::origin(),
        Hand::Right,
    )
    .unwrap();
    let rule = manipulation_angle(&left, &right, &params).unwrap();
    (rule.value.unwrap(), rule.pass)
}

#[test]
fn manipulation_angle_band_boundaries() {
    for (deg, in_band) in [(44.9, false), (45.0, true), (60.0, true), (75.0, true), (75.1, false)] {
        let (value, pass) = angle_at(deg);
        assert!((value - deg).abs() < 1e-9, "{deg}: {value}");
        assert_eq!(pass, in_band, "{deg}");
    }
}

#[test]
fn aim_error_boundary() {
    let scene = box_scene();
    let params = PlanParams::default();
    let aim = |offset: f64| {
        // Straight scope looking down at the target from 100 mm, shifted sideways.
        let cam = CameraPose::new(Point3::new(offset, 0.0, 100.0), Vector3::z(), 300.0)
            .unwrap()
            .with_tilt(0.0)
            .unwrap();
        let rules = camera_placement_rules(&cam, &scene, &params).unwrap();
        rules.into_iter().find(|r| r.id == "camera.aim").unwrap()
    };
    let at = aim(5.0);
    assert!((at.value.unwrap() - 5.0).abs() < 1e-12);
    assert!(at.pass);
    let over = aim(6.0);
    assert!((over.value.unwrap() - 6.0).abs() < 1e-12);
    assert!(!over.pass);
}

proptest! {
    #[test]
    fn angle_is_symmetric_bounded_and_rotation_invariant(seed in any::<u64>(), s in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_unit(&mut rng) * rng.gen_range(0.1..300.0);
        let b = random_unit(&mut rng) * rng.gen_range(0.1..300.0);
        let ab = angle_between(&a, &b).unwrap();
        prop_assert!((0.0..=180.0).contains(&ab));
        prop_assert!((ab - angle_between(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ab - angle_between(&(a * s), &b).unwrap()).abs() < 1e-9);
        prop_assert!((angle_between(&-a, &b).unwrap() - (180.0 - ab)).abs() < 1e-9);
        let iso = random_isometry(&mut rng, 1.0);
        prop_assert!((ab - angle_between(&(iso * a), &(iso * b)).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn angle_of_parallel_and_zero_vectors() {
    let v = Vector3::new(1.0, 2.0, 3.0);
    assert_eq!(angle_between(&v, &(v * 7.0)).unwrap(), 0.0);
    assert!((angle_between(&v, &-v).unwrap() - 180.0).abs() < 1e-12);
    assert!(angle_between(&v, &Vector3::zeros()).is_err());
}

#[test]
fn rigid_motion_preserves_rules_and_volume() {
    let phantom = synthetic_thorax();
    let scene = phantom.scene().unwrap();
    let plan = nominal_plan(&phantom).unwrap();
    let params = PlanParams::default();
    let base = evaluate_plan(&plan.left, &plan.right, &plan.camera, &scene, &params).unwrap();
    let voxel = params.spacing_mm.powi(3) * 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..8 {
        let iso = random_isometry(&mut rng, 500.0);
        let moved = scene.transformed(&iso);
        let report = evaluate_plan(
            &plan.left.transformed(&iso),
            &plan.right.transformed(&iso),
            &plan.camera.transformed(&iso),
            &moved,
            &params,
        )
        .unwrap();
        let outcomes =
            |r: &vats_core::constraints::PlanReport| r.rules.iter().map(|x| (x.id.clone(), x.pass)).collect::<Vec<_>>();
        assert_eq!(outcomes(&report), outcomes(&base));
        assert_eq!(report.in_band, base.in_band);
        assert!((report.operable_volume_l - base.operable_volume_l).abs() <= 2.0 * voxel + 1e-12);
        assert!((report.manipulation_angle_deg - base.manipulation_angle_deg).abs() < 1e-9);
    }
}

/// Whether any point sampled every `step` mm along the tube lies in a cone.
fn dense_crowded(cam: &CameraPose, cones: &[Cone], step: f64) -> bool {
    let (a, b) = (cam.tip(), cam.handle());
    let n = ((b - a).norm() / step).ceil() as usize;
    (0..=n).any(|i| {
        let p = a + (b - a) * (i as f64 / n as f64);
        cones.iter().any(|c| c.contains(&p))
    })
}

#[test]
fn crowding_at_5mm_matches_dense_sampling() {
    let params = PlanParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut crowded = 0;
    for _ in 0..100 {
        let target = Point3::origin();
        let entry = Point3::origin() + random_unit(&mut rng) * rng.gen_range(100.0..250.0);
        let traj = TrocarTrajectory::new(entry, target, Hand::Left).unwrap();
        let cone = dof_cone_of(&traj, params.half_angle_deg, params.reach_mm).unwrap();
        // Tubes pass near the cone: tip within 120 mm of the pivot-side half.
        let tip =
            entry + (target - entry) * rng.gen_range(-0.5..0.5) + random_unit(&mut rng) * rng.gen_range(0.0..120.0);
        let cam = CameraPose::new(tip, random_unit(&mut rng), 300.0).unwrap();
        let rule = crowding_rule(&cam, std::slice::from_ref(&cone), &params);
        let dense = dense_crowded(&cam, std::slice::from_ref(&cone), 0.5);
        assert_eq!(!rule.pass, dense, "tip {tip} clearance {:?}", rule.value);
        crowded += dense as usize;
    }
    assert!((10..=90).contains(&crowded), "unbalanced sample: {crowded} crowded");
}
