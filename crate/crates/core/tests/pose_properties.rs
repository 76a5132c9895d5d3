use proptest::prelude::*;
use relgeo::{angular_error_deg, position_error_m, relative_pose, Pose, Position, Quaternion};

fn quaternion() -> impl Strategy<Value = Quaternion> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|a| Quaternion::from_array(a).normalize().unwrap())
}

fn position() -> impl Strategy<Value = Position> {
    prop::array::uniform3(-50.0f64..50.0).prop_map(Position::from_array)
}

fn pose() -> impl Strategy<Value = Pose> {
    (position(), quaternion()).prop_map(|(p, q)| Pose::new(p, q).unwrap())
}

fn close(a: Quaternion, b: Quaternion, tol: f64) -> bool {
    a.to_array().iter().zip(b.to_array()).all(|(u, v)| (u - v).abs() <= tol)
}

proptest! {
    #[test]
    fn normalized_quaternions_are_unit(q in quaternion()) {
        prop_assert!(q.is_unit(1e-12));
    }

    #[test]
    fn product_with_conjugate_is_identity(q in quaternion()) {
        prop_assert!(close((q * q.conjugate()).canonicalize(), Quaternion::IDENTITY, 1e-12));
    }

    #[test]
    fn canonical_form_is_idempotent_and_same_rotation(q in quaternion()) {
        let c = q.canonicalize();
        prop_assert!(c.w >= 0.0);
        prop_assert_eq!(c.canonicalize(), c);
        prop_assert_eq!(angular_error_deg(q, c), 0.0);
    }

    #[test]
    fn double_cover(q in quaternion()) {
        prop_assert_eq!(angular_error_deg(q, -q), 0.0);
        prop_assert_eq!((-q).canonicalize(), q.canonicalize());
    }

    #[test]
    fn angular_error_is_a_symmetric_bounded_metric(a in quaternion(), b in quaternion(), c in quaternion()) {
        let ab = angular_error_deg(a, b);
        prop_assert!((0.0..=180.0).contains(&ab));
        prop_assert!((ab - angular_error_deg(b, a)).abs() < 1e-9);
        prop_assert!(angular_error_deg(a, c) <= ab + angular_error_deg(b, c) + 1e-9);
    }

    #[test]
    fn angular_error_matches_relative_rotation_angle(a in quaternion(), b in quaternion()) {
        let rel = (a.conjugate() * b).canonicalize();
        let expected = 2.0 * rel.w.min(1.0).acos().to_degrees();
        prop_assert!((angular_error_deg(a, b) - expected).abs() < 1e-6);
    }

    #[test]
    fn rotation_matrix_round_trip(q in quaternion()) {
        let back = Quaternion::from_rotation_matrix(&q.to_rotation_matrix());
        prop_assert!(close(back.canonicalize(), q.canonicalize(), 1e-12));
    }

    #[test]
    fn relative_pose_recomposes(p in pose(), r in pose()) {
        let rel = relative_pose(&p, &r);
        prop_assert!(rel.orientation.w >= 0.0);
        prop_assert!(close((r.orientation * rel.orientation).canonicalize(), p.orientation.canonicalize(), 1e-12));
        prop_assert!(position_error_m(r.position + rel.position, p.position) <= 1e-12);
    }

    #[test]
    fn relative_pose_to_itself_is_identity(p in pose()) {
        let rel = relative_pose(&p, &p);
        prop_assert_eq!(rel.position.to_array(), [0.0; 3]);
        prop_assert!(close(rel.orientation, Quaternion::IDENTITY, 1e-12));
    }
}
