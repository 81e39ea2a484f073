//! Rigid-motion algebra, Euler conversions, random pose sampling and pose
//! error metrics. All geometry is `f64`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Tolerance for the orthonormality / determinant checks on rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// Ordered 3D points, optionally carrying the index of each point's true
/// partner in a paired cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub gt_partner: Option<Vec<Option<usize>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        let cloud = PointCloud {
            points,
            gt_partner: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    /// Builds a cloud without validation. Callers guarantee finiteness.
    pub fn from_points(points: Vec<Point3>) -> Self {
        PointCloud {
            points,
            gt_partner: None,
        }
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Point3::new(r[0], r[1], r[2])).collect())
    }

    pub fn with_partners(mut self, partners: Vec<Option<usize>>) -> Result<Self> {
        if partners.len() != self.points.len() {
            return Err(Error::InvalidInput(format!(
                "{} partner entries for {} points",
                partners.len(),
                self.points.len()
            )));
        }
        self.gt_partner = Some(partners);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidInput("empty point cloud".into()));
        }
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite coordinate at point {i}")));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Point3 {
        let sum = self.points.iter().fold(Point3::zeros(), |acc, p| acc + p);
        sum / self.points.len() as f64
    }

    /// Row-major `N x 3` coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        PointCloud::from_points(
            flat.chunks_exact(3)
                .map(|c| Point3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    /// Returns the points at `indices`, in that order. Partner indices are
    /// dropped because they refer to the full cloud.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::from_points(indices.iter().map(|&i| self.points[i]).collect())
    }

    /// Per-axis (min, max) bounds.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = Point3::repeat(f64::INFINITY);
        let mut hi = Point3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }
}

/// Rotation in SO(3) plus translation. Serialized with a row-major rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransformRepr", try_from = "TransformRepr")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validating constructor.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if !r.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite transform".into()));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        let det = r.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "not a rotation: |RtR - I| = {ortho:.3e}, det = {det}"
            )));
        }
        Ok(())
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `R p_i + t` for every point. Partner indices are preserved.
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        cloud.validate()?;
        Ok(PointCloud {
            points: cloud.points.iter().map(|p| self.apply_point(p)).collect(),
            gt_partner: cloud.gt_partner.clone(),
        })
    }

    /// `self ∘ first`: applying the result equals applying `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major rotation entries.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ]
    }

    pub fn from_row_major(rot: &[f64; 9], translation: [f64; 3]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(rot), Vector3::from(translation))
    }
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let r = t.rotation;
        TransformRepr {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = Error;

    fn try_from(t: TransformRepr) -> Result<Self> {
        RigidTransform::from_row_major(&t.rotation.concat().try_into().expect("9 entries"), t.translation)
    }
}

/// `compose(t2, t1)`: apply `t1` first, then `t2`.
pub fn compose(t2: &RigidTransform, t1: &RigidTransform) -> RigidTransform {
    t2.compose(t1)
}

pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> Result<PointCloud> {
    t.apply(cloud)
}

/// Fixed-axis X-Y-Z Euler angles in degrees: `R = Rz(z) * Ry(y) * Rx(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAnglesDeg {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EulerAnglesDeg {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        EulerAnglesDeg { x, y, z }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

pub fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rotation_from_euler(e: &EulerAnglesDeg) -> Matrix3<f64> {
    rot_z(e.z) * rot_y(e.y) * rot_x(e.x)
}

const GIMBAL_TOL_DEG: f64 = 1e-6;

/// Inverse of [`rotation_from_euler`]. Near gimbal lock the z angle is pinned
/// to zero.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> EulerAnglesDeg {
    let cy = r[(0, 0)].hypot(r[(1, 0)]);
    let y = (-r[(2, 0)]).atan2(cy).to_degrees();
    if 90.0 - y.abs() < GIMBAL_TOL_DEG {
        let x = if y > 0.0 {
            r[(0, 1)].atan2(r[(1, 1)])
        } else {
            (-r[(0, 1)]).atan2(r[(1, 1)])
        };
        return EulerAnglesDeg::new(x.to_degrees(), y, 0.0);
    }
    let x = r[(2, 1)].atan2(r[(2, 2)]).to_degrees();
    let z = r[(1, 0)].atan2(r[(0, 0)]).to_degrees();
    EulerAnglesDeg::new(x, y, z)
}

/// Samples per-axis Euler angles uniformly in `[0, rot_range_deg]` and
/// per-axis translation uniformly in `[-trans_range, trans_range]`.
pub fn random_rigid<R: Rng + ?Sized>(rng: &mut R, rot_range_deg: f64, trans_range: f64) -> RigidTransform {
    let mut angle = || rot_range_deg * rng.random::<f64>();
    let e = EulerAnglesDeg::new(angle(), angle(), angle());
    let mut offset = || trans_range * (2.0 * rng.random::<f64>() - 1.0);
    let t = Vector3::new(offset(), offset(), offset());
    RigidTransform {
        rotation: rotation_from_euler(&e),
        translation: t,
    }
}

/// Geodesic angle between two rotations, in degrees, in `[0, 180]`.
///
/// Evaluated as `atan2(sin θ, cos θ)` of the relative rotation, which equals
/// `arccos((tr(R_pred^T R_gt) - 1) / 2)` but keeps full precision near zero.
pub fn rotation_error_deg(r_pred: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let rel = r_pred.transpose() * r_gt;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (axis.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

/// Euclidean distance between translations.
pub fn translation_error(t_pred: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    (t_pred - t_gt).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rows: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_leaves_points() {
        let p = cloud(&[[1.0, -2.0, 3.5], [0.0, 0.1, 0.2]]);
        assert_eq!(RigidTransform::identity().apply(&p).unwrap(), p);
    }

    #[test]
    fn pure_translation() {
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let out = t.apply(&cloud(&[[0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(out.points[0], Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_rotation(rot_z(90.0));
        let out = t.apply(&cloud(&[[1.0, 0.0, 0.0]])).unwrap();
        assert!((out.points[0] - Vector3::new(0.0, 1.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn apply_rejects_non_finite() {
        let p = PointCloud::from_points(vec![Vector3::new(f64::NAN, 0.0, 0.0)]);
        assert!(matches!(
            RigidTransform::identity().apply(&p),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn apply_keeps_partners() {
        let p = cloud(&[[0.0; 3], [1.0; 3]]).with_partners(vec![Some(1), None]).unwrap();
        let out = RigidTransform::identity().apply(&p).unwrap();
        assert_eq!(out.gt_partner, Some(vec![Some(1), None]));
    }

    #[test]
    fn compose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_rigid(&mut rng, 45.0, 0.5);
        let c = compose(&t, &RigidTransform::identity());
        assert_eq!(c, t);
        let id = compose(&t.inverse(), &t);
        assert!((id.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(id.translation.amax() < 1e-12);

        let q = RigidTransform::from_rotation(rot_z(45.0));
        let h = compose(&q, &q);
        assert!((h.rotation - rot_z(90.0)).amax() < 1e-12);
    }

    #[test]
    fn random_rigid_zero_range_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = random_rigid(&mut rng, 0.0, 0.0);
        assert_eq!(t, RigidTransform::identity());
    }

    #[test]
    fn random_rigid_bounds_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let t = random_rigid(&mut rng, 45.0, 0.5);
            t.validate().unwrap();
            let e = euler_from_rotation(&t.rotation).as_array();
            for (s, a) in sums.iter_mut().zip(e) {
                assert!((-1e-9..=45.0 + 1e-9).contains(&a), "angle {a}");
                *s += a;
            }
            assert!(t.translation.iter().all(|c| c.abs() <= 0.5));
        }
        for s in sums {
            assert!((s / n as f64 - 22.5).abs() < 0.5, "mean {}", s / n as f64);
        }
    }

    #[test]
    fn random_rigid_is_deterministic() {
        let a = random_rigid(&mut ChaCha8Rng::seed_from_u64(5), 45.0, 0.5);
        let b = random_rigid(&mut ChaCha8Rng::seed_from_u64(5), 45.0, 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_error_cases() {
        let r = rot_x(17.0) * rot_z(-40.0);
        assert_eq!(rotation_error_deg(&r, &r), 0.0);
        assert!((rotation_error_deg(&Matrix3::identity(), &rot_z(180.0)) - 180.0).abs() < 1e-9);
        for axis in [rot_x(90.0), rot_y(90.0), rot_z(90.0)] {
            assert!((rotation_error_deg(&Matrix3::identity(), &axis) - 90.0).abs() < 1e-9);
        }
        // tiny angles keep precision
        let e = rotation_error_deg(&Matrix3::identity(), &rot_y(1e-7));
        assert!((e - 1e-7).abs() < 1e-12, "{e}");
    }

    #[test]
    fn translation_error_cases() {
        let a = Vector3::new(1.0, 1.0, 1.0);
        assert_eq!(translation_error(&a, &a), 0.0);
        assert_eq!(translation_error(&Vector3::new(3.0, 4.0, 0.0), &Vector3::zeros()), 5.0);
        assert_eq!(translation_error(&Vector3::new(0.0, 0.0, 1.0), &Vector3::zeros()), 1.0);
    }

    #[test]
    fn euler_cases() {
        let e = euler_from_rotation(&Matrix3::identity());
        assert_eq!(e.as_array(), [0.0, 0.0, 0.0]);
        let e = euler_from_rotation(&rot_x(30.0));
        assert!((e.x - 30.0).abs() < 1e-9 && e.y.abs() < 1e-9 && e.z.abs() < 1e-9);
    }

    #[test]
    fn euler_gimbal_lock_pins_z() {
        for y in [90.0, -90.0] {
            let r = rotation_from_euler(&EulerAnglesDeg::new(25.0, y, 10.0));
            let e = euler_from_rotation(&r);
            assert_eq!(e.z, 0.0);
            assert!((rotation_from_euler(&e) - r).amax() < 1e-9);
        }
    }

    #[test]
    fn invalid_rotation_rejected() {
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(refl, Vector3::zeros()).is_err());
        assert!(RigidTransform::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (any::<u64>()).prop_map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = random_rigid(&mut rng, 180.0, 2.0);
            // spread over the whole group, not just the positive octant
            t.rotation = rot_x(-90.0) * t.rotation * rot_z(-120.0);
            t
        })
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let l = compose(&compose(&a, &b), &c);
            let r = compose(&a, &compose(&b, &c));
            prop_assert!((l.rotation - r.rotation).amax() < 1e-12);
            prop_assert!((l.translation - r.translation).amax() < 1e-12);
        }

        #[test]
        fn compose_matches_sequential_application(a in arb_transform(), b in arb_transform(),
                                                  p in prop::array::uniform3(-2.0f64..2.0)) {
            let p = Vector3::from(p);
            let direct = compose(&a, &b).apply_point(&p);
            let seq = a.apply_point(&b.apply_point(&p));
            prop_assert!((direct - seq).amax() < 1e-12);
        }

        #[test]
        fn rotation_error_symmetric_and_bi_invariant(a in arb_transform(), b in arb_transform(), q in arb_transform()) {
            let e = rotation_error_deg(&a.rotation, &b.rotation);
            prop_assert!((0.0..=180.0).contains(&e));
            prop_assert!((e - rotation_error_deg(&b.rotation, &a.rotation)).abs() < 1e-9);
            let eq = rotation_error_deg(&(q.rotation * a.rotation), &(q.rotation * b.rotation));
            prop_assert!((e - eq).abs() < 1e-9);
        }

        #[test]
        fn rigid_motion_preserves_distances(t in arb_transform(),
                                            pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 2..20)) {
            let c = PointCloud::from_rows(&pts).unwrap();
            let m = t.apply(&c).unwrap();
            for i in 0..c.len() {
                for j in 0..c.len() {
                    let d0 = (c.points[i] - c.points[j]).norm();
                    let d1 = (m.points[i] - m.points[j]).norm();
                    prop_assert!((d0 - d1).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn euler_round_trip(t in arb_transform()) {
            let e = euler_from_rotation(&t.rotation);
            prop_assume!(90.0 - e.y.abs() > 1e-3);
            prop_assert!((rotation_from_euler(&e) - t.rotation).amax() < 1e-9);
        }
    }
}
