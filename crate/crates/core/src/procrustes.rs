//! Closed-form rigid alignment of matched point sets and its reverse-mode
//! derivative.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, RigidTransform};

/// Singular values closer than this are treated as degenerate by
/// [`solve_rigid_vjp`].
pub const SV_GAP_TOL: f64 = 1e-8;

/// Step used by the finite-difference fallback of [`solve_rigid_vjp`].
pub const FD_STEP: f64 = 1e-5;

/// `H = U diag(S) V^T`, singular values descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&self.s) * self.v.transpose()
    }

    /// Smallest pairwise gap between singular values.
    pub fn min_gap(&self) -> f64 {
        let s = &self.s;
        (s[0] - s[1]).abs().min((s[1] - s[2]).abs()).min((s[0] - s[2]).abs())
    }
}

/// SVD of a 3x3 matrix by one-sided (Hestenes) Jacobi rotations, i.e. the
/// cyclic Jacobi eigen-iteration of `H^T H` carried out on the columns of `H`
/// so that the small singular values are not squared away.
///
/// Each column of `U` has its largest-magnitude entry made nonnegative (the
/// matching column of `V` flips with it). The zero matrix yields `S = 0`,
/// `U = V = I`.
pub fn svd3(h: &Matrix3<f64>) -> Svd3 {
    let mut w = *h;
    let mut v = Matrix3::<f64>::identity();

    for _sweep in 0..60 {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let alpha = w.column(p).norm_squared();
            let beta = w.column(q).norm_squared();
            let gamma = w.column(p).dot(&w.column(q));
            if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut w, &mut v] {
                for r in 0..3 {
                    let a = m[(r, p)];
                    let b = m[(r, q)];
                    m[(r, p)] = c * a - s * b;
                    m[(r, q)] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    let norms: Vec<f64> = (0..3).map(|i| w.column(i).norm()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut s = Vector3::zeros();
    let mut u = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    for (k, &i) in order.iter().enumerate() {
        s[k] = norms[i];
        vs.set_column(k, &v.column(i));
    }

    if s[0] == 0.0 {
        return Svd3 {
            u: Matrix3::identity(),
            s: Vector3::zeros(),
            v: Matrix3::identity(),
        };
    }

    let tiny = s[0] * 1e-15;
    for (k, &i) in order.iter().enumerate() {
        if s[k] > tiny {
            u.set_column(k, &(w.column(i) / s[k]));
        } else {
            let col = match k {
                1 => any_orthogonal(&u.column(0).into_owned()),
                _ => u.column(0).cross(&u.column(1)),
            };
            u.set_column(k, &col);
        }
    }

    for k in 0..3 {
        let col = u.column(k);
        let imax = col.iamax();
        if col[imax] < 0.0 {
            u.set_column(k, &(-u.column(k)));
            vs.set_column(k, &(-vs.column(k)));
        }
    }

    Svd3 { u, s, v: vs }
}

fn any_orthogonal(a: &Vector3<f64>) -> Vector3<f64> {
    let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    a.cross(&helper).normalize()
}

/// Centroids and cross-covariance `H = Σ (x_i - x̄)(y_i - ȳ)^T`.
pub fn cross_covariance(x: &[Point3], y: &[Point3]) -> (Matrix3<f64>, Point3, Point3) {
    let n = x.len() as f64;
    let xm = x.iter().fold(Point3::zeros(), |a, p| a + p) / n;
    let ym = y.iter().fold(Point3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (xi, yi) in x.iter().zip(y) {
        h += (xi - xm) * (yi - ym).transpose();
    }
    (h, xm, ym)
}

fn check_inputs(x: &[Point3], y: &[Point3]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "correspondence sets differ in size: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Arity {
            op: "solve_rigid",
            expected: 3,
            got: x.len(),
        });
    }
    let xm = x.iter().fold(Point3::zeros(), |a, p| a + p) / x.len() as f64;
    let scale = 1.0 + xm.amax();
    if x.iter().all(|p| (p - xm).amax() <= 1e-12 * scale) {
        return Err(Error::DegenerateConfiguration(
            "all source points coincide".into(),
        ));
    }
    Ok(())
}

/// Rotation `V D U^T` with `D = diag(1, 1, det(V U^T))`.
fn rotation_from_svd(svd: &Svd3) -> (Matrix3<f64>, f64) {
    let d = if (svd.v * svd.u.transpose()).determinant() < 0.0 { -1.0 } else { 1.0 };
    let dm = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    (svd.v * dm * svd.u.transpose(), d)
}

/// Least-squares rigid motion mapping `x[i]` onto `y[i]`.
pub fn solve_rigid_points(x: &[Point3], y: &[Point3]) -> Result<RigidTransform> {
    check_inputs(x, y)?;
    let (h, xm, ym) = cross_covariance(x, y);
    let (r, _) = rotation_from_svd(&svd3(&h));
    Ok(RigidTransform {
        rotation: r,
        translation: ym - r * xm,
    })
}

pub fn solve_rigid(x: &PointCloud, y: &PointCloud) -> Result<RigidTransform> {
    solve_rigid_points(&x.points, &y.points)
}

/// Sum of squared residuals `Σ ||R x_i + t - y_i||²`.
pub fn residual(t: &RigidTransform, x: &[Point3], y: &[Point3]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(xi, yi)| (t.apply_point(xi) - yi).norm_squared())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VjpOptions {
    /// Fall back to central differences when singular values nearly coincide.
    pub fd_fallback: bool,
}

impl Default for VjpOptions {
    fn default() -> Self {
        VjpOptions { fd_fallback: true }
    }
}

/// Vector-Jacobian product of `(R, t) = solve_rigid(x, y)` with respect to
/// every `y_i`, given upstream gradients `grad_r = ∂L/∂R` and `grad_t = ∂L/∂t`.
pub fn solve_rigid_vjp(
    x: &[Point3],
    y: &[Point3],
    grad_r: &Matrix3<f64>,
    grad_t: &Vector3<f64>,
    opts: VjpOptions,
) -> Result<Vec<Vector3<f64>>> {
    check_inputs(x, y)?;
    let n = x.len();
    if grad_r.iter().all(|g| *g == 0.0) && grad_t.iter().all(|g| *g == 0.0) {
        return Ok(vec![Vector3::zeros(); n]);
    }

    let (h, xm, _) = cross_covariance(x, y);
    let svd = svd3(&h);
    let gap = svd.min_gap();
    if gap < SV_GAP_TOL {
        if !opts.fd_fallback {
            return Err(Error::DegenerateGradient(gap));
        }
        return Ok(vjp_finite_difference(x, y, grad_r, grad_t));
    }

    let (_, d) = rotation_from_svd(&svd);
    let dm = Vector3::new(1.0, 1.0, d);
    // t = ȳ - R x̄ feeds an extra term into ∂L/∂R.
    let g_total = grad_r - grad_t * xm.transpose();
    let g_hat = svd.v.transpose() * g_total * svd.u;
    let s = &svd.s;
    let mut dk = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let a_ij = g_hat[(i, j)] * dm[j];
            let a_ji = g_hat[(j, i)] * dm[i];
            let b_ij = dm[i] * g_hat[(i, j)];
            let b_ji = dm[j] * g_hat[(j, i)];
            dk[(i, j)] = (s[i] * (a_ij - a_ji) - s[j] * (b_ij - b_ji)) / (s[j] * s[j] - s[i] * s[i]);
        }
    }
    let dh = svd.u * dk * svd.v.transpose();
    let dht = dh.transpose();
    let mean_term = grad_t / n as f64;
    Ok(x.iter().map(|xi| dht * (xi - xm) + mean_term).collect())
}

fn vjp_finite_difference(
    x: &[Point3],
    y: &[Point3],
    grad_r: &Matrix3<f64>,
    grad_t: &Vector3<f64>,
) -> Vec<Vector3<f64>> {
    let objective = |yy: &[Point3]| -> f64 {
        let (h, xm, ym) = cross_covariance(x, yy);
        let (r, _) = rotation_from_svd(&svd3(&h));
        let t = ym - r * xm;
        grad_r.component_mul(&r).sum() + grad_t.dot(&t)
    };
    let mut work = y.to_vec();
    let mut out = vec![Vector3::zeros(); y.len()];
    for i in 0..y.len() {
        for c in 0..3 {
            let orig = work[i][c];
            work[i][c] = orig + FD_STEP;
            let fp = objective(&work);
            work[i][c] = orig - FD_STEP;
            let fm = objective(&work);
            work[i][c] = orig;
            out[i][c] = (fp - fm) / (2.0 * FD_STEP);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{random_rigid, rot_x, rot_y, rot_z, rotation_error_deg, translation_error};
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_matrix(rng: &mut impl Rng) -> Matrix3<f64> {
        Matrix3::from_fn(|_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let s = svd3(&Matrix3::identity());
        assert_eq!(s.s, Vector3::new(1.0, 1.0, 1.0));
        let d = Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 1.0));
        let s = svd3(&d);
        assert_eq!(s.s, Vector3::new(3.0, 2.0, 1.0));
        assert!((s.u - Matrix3::identity()).amax() < 1e-15);
        assert!((s.v - Matrix3::identity()).amax() < 1e-15);
    }

    #[test]
    fn svd_zero_matrix() {
        let s = svd3(&Matrix3::zeros());
        assert_eq!(s.s, Vector3::zeros());
        assert_eq!(s.u, Matrix3::identity());
        assert_eq!(s.v, Matrix3::identity());
    }

    #[test]
    fn svd_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let h = random_matrix(&mut rng);
            let svd = svd3(&h);
            assert!((svd.reconstruct() - h).amax() < 1e-10 * h.norm());
            assert!((svd.u.transpose() * svd.u - Matrix3::identity()).amax() < 1e-10);
            assert!((svd.v.transpose() * svd.v - Matrix3::identity()).amax() < 1e-10);
            let eig = SymmetricEigen::new(h.transpose() * h);
            let mut oracle: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
            oracle.sort_by(|a, b| b.total_cmp(a));
            for (s, o) in svd.s.iter().zip(&oracle) {
                assert!((s - o).abs() < 1e-7, "{s} vs {o}");
            }
            assert!(svd.s[0] >= svd.s[1] && svd.s[1] >= svd.s[2] && svd.s[2] >= 0.0);
            for k in 0..3 {
                let col = svd.u.column(k);
                assert!(col[col.iamax()] >= 0.0);
            }
        }
    }

    #[test]
    fn svd_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Vector3::new(1.0, 2.0, -0.5);
        let b = Vector3::new(0.3, -1.0, 2.0);
        let h = a * random_matrix(&mut rng).row(0) + b * random_matrix(&mut rng).row(1);
        let svd = svd3(&h);
        assert!(svd.s[2] < 1e-12);
        assert!((svd.reconstruct() - h).amax() < 1e-10 * h.norm());
        assert!((svd.u.transpose() * svd.u - Matrix3::identity()).amax() < 1e-10);
    }

    #[test]
    fn solve_identity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_points(&mut rng, 10);
        let t = solve_rigid_points(&x, &x).unwrap();
        assert!((t.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(t.translation.amax() < 1e-12);

        let shift = Vector3::new(1.0, 2.0, 3.0);
        let y: Vec<_> = x.iter().map(|p| p + shift).collect();
        let t = solve_rigid_points(&x, &y).unwrap();
        assert!((t.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!((t.translation - shift).amax() < 1e-12);
    }

    #[test]
    fn solve_recovers_transform_on_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tri = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
        for _ in 0..100 {
            let gt = random_rigid(&mut rng, 180.0, 1.0);
            let y: Vec<_> = tri.iter().map(|p| gt.apply_point(p)).collect();
            let t = solve_rigid_points(&tri, &y).unwrap();
            assert!(rotation_error_deg(&t.rotation, &gt.rotation) < 1e-6);
            assert!(translation_error(&t.translation, &gt.translation) < 1e-9);
        }
    }

    #[test]
    fn solve_errors() {
        let p = vec![Point3::zeros(), Point3::x()];
        assert!(matches!(solve_rigid_points(&p, &p), Err(Error::Arity { .. })));
        let c = vec![Point3::new(1.0, 1.0, 1.0); 5];
        let y = vec![Point3::zeros(), Point3::x(), Point3::y(), Point3::z(), Point3::zeros()];
        assert!(matches!(solve_rigid_points(&c, &y), Err(Error::DegenerateConfiguration(_))));
    }

    /// Residual of the best rotation as a function of R: `c - 2 tr(R H)`.
    fn grid_search_best(h: &Matrix3<f64>, c: f64) -> f64 {
        let mut best = f64::INFINITY;
        let rys: Vec<Matrix3<f64>> = (-90..=90).map(|d| rot_y(d as f64)).collect();
        let rxs: Vec<Matrix3<f64>> = (-180..180).map(|d| rot_x(d as f64)).collect();
        for z in -180..180 {
            let rz = rot_z(z as f64);
            for ry in &rys {
                let rzy = rz * ry;
                for rx in &rxs {
                    let r = rzy * rx;
                    let val = c - 2.0 * (r * h).trace();
                    if val < best {
                        best = val;
                    }
                }
            }
        }
        best
    }

    #[test]
    fn mirrored_planar_input_returns_proper_rotation_at_optimum() {
        let x = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.2, 0.0),
            Point3::new(0.3, 0.9, 0.0),
            Point3::new(-0.5, 0.4, 0.0),
        ];
        // mirror through the x = 0 plane
        let y: Vec<_> = x.iter().map(|p| Point3::new(-p.x, p.y, p.z) + Vector3::new(0.2, -0.1, 0.4)).collect();
        let t = solve_rigid_points(&x, &y).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-12);
        let ours = residual(&t, &x, &y);

        let (h, xm, ym) = cross_covariance(&x, &y);
        let c: f64 = x.iter().map(|p| (p - xm).norm_squared()).sum::<f64>()
            + y.iter().map(|p| (p - ym).norm_squared()).sum::<f64>();
        let grid = grid_search_best(&h, c);
        assert!(ours <= grid + 1e-12, "ours {ours} grid {grid}");
        assert!(grid - ours < 1e-3, "ours {ours} grid {grid}");
    }

    #[test]
    fn mirrored_general_input_returns_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let x = random_points(&mut rng, 12);
            let y: Vec<_> = x.iter().map(|p| Point3::new(p.x, -p.y, p.z)).collect();
            let t = solve_rigid_points(&x, &y).unwrap();
            assert!((t.rotation.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vjp_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_points(&mut rng, 6);
        let y = random_points(&mut rng, 6);
        let g = solve_rigid_vjp(&x, &y, &Matrix3::zeros(), &Vector3::zeros(), VjpOptions::default()).unwrap();
        assert!(g.iter().all(|v| *v == Vector3::zeros()));
    }

    fn max_rel_err(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(u, v)| u.iter().zip(v.iter()).map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(1e-8)))
            .fold(0.0, f64::max)
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..50 {
            let x = random_points(&mut rng, 8);
            let gt = random_rigid(&mut rng, 90.0, 0.5);
            // noisy rigid image keeps singular values apart and sometimes
            // triggers the reflection branch when noise dominates
            let noise = if trial % 5 == 0 { 2.0 } else { 0.1 };
            let y: Vec<_> = x
                .iter()
                .map(|p| gt.apply_point(p) + noise * Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let gr = random_matrix(&mut rng);
            let gtv = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (h, _, _) = cross_covariance(&x, &y);
            if svd3(&h).min_gap() < 1e-3 {
                continue;
            }
            let analytic = solve_rigid_vjp(&x, &y, &gr, &gtv, VjpOptions::default()).unwrap();
            let fd = vjp_finite_difference(&x, &y, &gr, &gtv);
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn vjp_translation_path_on_pure_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_points(&mut rng, 7);
        let shift = Vector3::new(0.3, -0.2, 0.9);
        let y: Vec<_> = x.iter().map(|p| p + shift).collect();
        let gt = Vector3::new(1.0, -2.0, 0.5);
        // only the translation is observed: ∂t/∂ȳ = I, so every y_i gets gt/N
        // plus the rotation coupling through -R x̄
        let g = solve_rigid_vjp(&x, &y, &Matrix3::zeros(), &gt, VjpOptions::default()).unwrap();
        let total: Vector3<f64> = g.iter().sum();
        assert!((total - gt).amax() < 1e-9, "{total:?}");
        let fd = vjp_finite_difference(&x, &y, &Matrix3::zeros(), &gt);
        assert!(max_rel_err(&g, &fd) < 1e-4);
    }

    #[test]
    fn vjp_degenerate_without_fallback_errors() {
        // regular configuration with equal singular values
        let x = vec![Point3::x(), -Point3::x(), Point3::y(), -Point3::y(), Point3::z(), -Point3::z()];
        let r = Matrix3::identity();
        let e = solve_rigid_vjp(&x, &x, &r, &Vector3::zeros(), VjpOptions { fd_fallback: false });
        assert!(matches!(e, Err(Error::DegenerateGradient(_))));
        let g = solve_rigid_vjp(&x, &x, &r, &Vector3::zeros(), VjpOptions::default()).unwrap();
        assert!(g.iter().all(|v| v.iter().all(|c| c.is_finite())));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn left_equivariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_points(&mut rng, 10);
            let y = random_points(&mut rng, 10);
            let q = random_rigid(&mut rng, 180.0, 1.0);
            let qy: Vec<_> = y.iter().map(|p| q.apply_point(p)).collect();
            let lhs = solve_rigid_points(&x, &qy).unwrap();
            let rhs = q.compose(&solve_rigid_points(&x, &y).unwrap());
            prop_assert!((lhs.rotation - rhs.rotation).amax() < 1e-9);
            prop_assert!((lhs.translation - rhs.translation).amax() < 1e-9);
        }

        #[test]
        fn residual_is_locally_optimal(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_points(&mut rng, 10);
            let gt = random_rigid(&mut rng, 45.0, 0.5);
            let y: Vec<_> = x.iter().map(|p| gt.apply_point(p) + 0.05 * Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let t = solve_rigid_points(&x, &y).unwrap();
            let best = residual(&t, &x, &y);
            for _ in 0..100 {
                let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                let dr = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), 0.1f64.to_radians());
                let pert = RigidTransform { rotation: dr.matrix() * t.rotation, translation: t.translation };
                prop_assert!(residual(&pert, &x, &y) >= best);
            }
        }
    }
}
