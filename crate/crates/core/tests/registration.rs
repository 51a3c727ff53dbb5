use gsmap::camera::{Calibration, ProjectionLut};
use gsmap::features::FrameFeatures;
use gsmap::geometry::angle_between;
use gsmap::pipeline::World;
use gsmap::registration::{associate, overlap_ratio, register, MatchConfig, MergeThresholds};
use gsmap::sim::{aisle_center_y, generate_lot, Scene};
use gsmap::{Execution, Pose2};
use proptest::prelude::*;
use std::sync::OnceLock;

fn fixture() -> &'static (Scene, ProjectionLut) {
    static F: OnceLock<(Scene, ProjectionLut)> = OnceLock::new();
    F.get_or_init(|| {
        (
            generate_lot(2, 8, 7),
            Calibration::default()
                .build_lut(Execution::Parallel)
                .unwrap(),
        )
    })
}

fn observe(pose: &Pose2, index: usize) -> FrameFeatures {
    let (scene, lut) = fixture();
    World::new(scene, lut).observe(pose, index, 0.0, 0).unwrap()
}

fn scaled(f: &FrameFeatures, k: f64) -> FrameFeatures {
    let mut f = f.clone();
    f.points.iter_mut().for_each(|p| p.confidence *= k);
    f.lines.iter_mut().for_each(|l| l.confidence *= k);
    f
}

fn base_pose() -> impl Strategy<Value = Pose2> {
    (3.0..15.0f64, prop::bool::ANY, -0.2..0.2f64).prop_map(|(x, back, dt)| {
        Pose2::new(
            x,
            aisle_center_y(0),
            if back { std::f64::consts::PI } else { 0.0 } + dt,
        )
    })
}

fn offset() -> impl Strategy<Value = Pose2> {
    (-0.3..0.3f64, -0.3..0.3f64, -0.17..0.17f64).prop_map(|(x, y, t)| Pose2::new(x, y, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn association_respects_the_normal_gate(base in base_pose(), delta in offset()) {
        let dst = observe(&base, 0);
        let src = observe(&base.compose(&delta), 1);
        let cfg = MatchConfig::default();
        for c in associate(&src, &dst, &delta, &cfg) {
            let n = delta.apply_vector(src.points[c.point_index].normal.expect("matched points have normals"));
            let m = dst.lines[c.target_line_index].geometry.normal;
            prop_assert!(angle_between(n, m) <= cfg.normal_angle_max + 1e-12);
            prop_assert_eq!(src.points[c.point_index].label, dst.lines[c.target_line_index].label);
        }
    }

    #[test]
    fn inverse_registrations_compose_to_identity(base in base_pose(), delta in offset()) {
        let a = observe(&base, 0);
        let b = observe(&base.compose(&delta), 1);
        let cfg = MatchConfig::default();
        let ab = register(&b, &a, &Pose2::identity(), &cfg);
        let ba = register(&a, &b, &Pose2::identity(), &cfg);
        prop_assume!(ab.converged && ba.converged);
        let loop_ = ab.transform.compose(&ba.transform);
        prop_assert!(loop_.translation().norm() <= 0.02, "{loop_:?}");
        prop_assert!(loop_.theta.abs() <= 0.4f64.to_radians(), "{loop_:?}");
    }

    #[test]
    fn confidence_scale_leaves_ratios_unchanged(base in base_pose(), delta in offset(), k in 0.05..20.0f64) {
        let dst = observe(&base, 0);
        let src = observe(&base.compose(&delta), 1);
        let cfg = MatchConfig::default();
        let r = register(&src, &dst, &Pose2::identity(), &cfg);
        let rk = register(&scaled(&src, k), &scaled(&dst, k), &Pose2::identity(), &cfg);
        prop_assert!((r.inlier_ratio - rk.inlier_ratio).abs() <= 1e-9);
        let th = MergeThresholds::default();
        let p = overlap_ratio(&src.lines, &dst.lines, &r.transform, &th);
        let pk = overlap_ratio(&scaled(&src, k).lines, &dst.lines, &r.transform, &th);
        prop_assert!((p - pk).abs() <= 1e-12);
    }

    #[test]
    fn residual_never_grows_across_accepted_steps(base in base_pose(), delta in offset()) {
        let dst = observe(&base, 0);
        let src = observe(&base.compose(&delta), 1);
        let r = register(&src, &dst, &Pose2::identity(), &MatchConfig::default());
        for (before, after) in &r.residual_trace {
            prop_assert!(after <= before, "{after} > {before}");
        }
    }
}

#[test]
fn recovers_offset_between_real_frames() {
    let base = Pose2::new(8.0, aisle_center_y(0), 0.1);
    let delta = Pose2::new(0.2, -0.15, 6f64.to_radians());
    let r = register(
        &observe(&base.compose(&delta), 1),
        &observe(&base, 0),
        &Pose2::identity(),
        &MatchConfig::default(),
    );
    assert!(r.converged);
    assert!(r.transform.distance_to(&delta) < 0.01, "{:?}", r.transform);
    assert!((r.transform.theta - delta.theta).abs() < 0.2f64.to_radians());
}
