//! Synthetic base shapes standing in for sampled CAD models.

use std::f64::consts::TAU;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::mesh::{load_mesh, Mesh};
use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.4;
/// Box half-extents; unequal so that the box has no rotational symmetry
/// beyond the 180 degree flips.
pub const BOX_HALF: [f64; 3] = [1.0, 0.6, 0.3];
pub const BLOB_COUNT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Torus,
    BoxSurface,
    GaussianBlobs,
    FromMesh(PathBuf),
}

impl FromStr for ShapeKind {
    type Err = Error;

    /// Accepts `sphere`, `torus`, `box-surface`, `gaussian-blobs` and
    /// `from-mesh:<path>`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sphere" => ShapeKind::Sphere,
            "torus" => ShapeKind::Torus,
            "box-surface" => ShapeKind::BoxSurface,
            "gaussian-blobs" => ShapeKind::GaussianBlobs,
            _ => match s.strip_prefix("from-mesh:") {
                Some(p) if !p.is_empty() => ShapeKind::FromMesh(PathBuf::from(p)),
                _ => return Err(Error::UnknownShape(s.to_string())),
            },
        })
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeKind::Sphere => f.write_str("sphere"),
            ShapeKind::Torus => f.write_str("torus"),
            ShapeKind::BoxSurface => f.write_str("box-surface"),
            ShapeKind::GaussianBlobs => f.write_str("gaussian-blobs"),
            ShapeKind::FromMesh(p) => write!(f, "from-mesh:{}", p.display()),
        }
    }
}

fn normal3<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    Point3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    loop {
        let v = normal3(rng);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Uniform over the torus surface: the area element is proportional to
/// `R + r cos v`, so the tube angle is drawn by rejection.
fn torus_point<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
    let u = TAU * rng.random::<f64>();
    let v = loop {
        let v = TAU * rng.random::<f64>();
        if rng.random::<f64>() * (big + small) <= big + small * v.cos() {
            break v;
        }
    };
    let ring = big + small * v.cos();
    Point3::new(ring * u.cos(), ring * u.sin(), small * v.sin())
}

fn box_point<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    let [a, b, c] = BOX_HALF;
    // Face pairs normal to x, y, z, weighted by area.
    let areas = [b * c, a * c, a * b];
    let mut pick = rng.random::<f64>() * areas.iter().sum::<f64>();
    let mut axis = 0;
    while axis < 2 && pick >= areas[axis] {
        pick -= areas[axis];
        axis += 1;
    }
    let mut p = Point3::new(
        a * rng.random_range(-1.0..=1.0),
        b * rng.random_range(-1.0..=1.0),
        c * rng.random_range(-1.0..=1.0),
    );
    p[axis] = if rng.random::<bool>() { BOX_HALF[axis] } else { -BOX_HALF[axis] };
    p
}

/// A few anisotropic Gaussian clusters with random centers and spreads.
fn blob_points<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Point3> {
    let blobs: Vec<(Point3, Point3)> = (0..BLOB_COUNT)
        .map(|_| {
            let center = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let spread = Point3::new(rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
            (center, spread)
        })
        .collect();
    (0..n)
        .map(|_| {
            let (c, s) = &blobs[rng.random_range(0..BLOB_COUNT)];
            c + normal3(rng).component_mul(s)
        })
        .collect()
}

/// Samples `n` points from the shape in its native coordinates.
pub fn sample_shape_raw<R: Rng + ?Sized>(kind: &ShapeKind, n: usize, rng: &mut R) -> Result<Vec<Point3>> {
    if n == 0 {
        return Err(Error::InvalidInput("cannot sample zero points".into()));
    }
    Ok(match kind {
        ShapeKind::Sphere => (0..n).map(|_| unit_vector(rng)).collect(),
        ShapeKind::Torus => (0..n).map(|_| torus_point(rng)).collect(),
        ShapeKind::BoxSurface => (0..n).map(|_| box_point(rng)).collect(),
        ShapeKind::GaussianBlobs => blob_points(n, rng),
        ShapeKind::FromMesh(path) => load_mesh(path)?.sample(n, rng)?,
    })
}

/// Centers the bounding box at the origin and scales its diagonal to 2.
pub fn normalize_unit(points: &mut [Point3]) {
    let cloud = PointCloud::from_points(points.to_vec());
    let (lo, hi) = cloud.bounds();
    let center = (lo + hi) / 2.0;
    let diag = (hi - lo).norm();
    let s = if diag > 0.0 { 2.0 / diag } else { 1.0 };
    for p in points {
        *p = (*p - center) * s;
    }
}

/// Samples `n` points and normalizes them to unit scale.
pub fn sample_shape<R: Rng + ?Sized>(kind: &ShapeKind, n: usize, rng: &mut R) -> Result<PointCloud> {
    let mut pts = sample_shape_raw(kind, n, rng)?;
    normalize_unit(&mut pts);
    PointCloud::new(pts)
}

/// Samples from an already loaded mesh, avoiding a file read per call.
pub fn sample_mesh<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<PointCloud> {
    let mut pts = mesh.sample(n, rng)?;
    normalize_unit(&mut pts);
    PointCloud::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_is_on_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = sample_shape_raw(&ShapeKind::Sphere, 1024, &mut rng).unwrap();
        assert!(pts.iter().all(|p| (p.norm() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn torus_satisfies_implicit_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = sample_shape_raw(&ShapeKind::Torus, 500, &mut rng).unwrap();
        for p in pts {
            let ring = (p.x * p.x + p.y * p.y).sqrt() - TORUS_MAJOR;
            assert!((ring * ring + p.z * p.z - TORUS_MINOR * TORUS_MINOR).abs() < 1e-9);
        }
    }

    #[test]
    fn box_points_on_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in sample_shape_raw(&ShapeKind::BoxSurface, 500, &mut rng).unwrap() {
            let on_face = (0..3).any(|k| (p[k].abs() - BOX_HALF[k]).abs() < 1e-12);
            let inside = (0..3).all(|k| p[k].abs() <= BOX_HALF[k] + 1e-12);
            assert!(on_face && inside, "{p:?}");
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        for kind in [ShapeKind::Sphere, ShapeKind::Torus, ShapeKind::BoxSurface, ShapeKind::GaussianBlobs] {
            let a = sample_shape(&kind, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = sample_shape(&kind, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn normalized_diagonal_is_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [ShapeKind::Torus, ShapeKind::BoxSurface, ShapeKind::GaussianBlobs] {
            let c = sample_shape(&kind, 300, &mut rng).unwrap();
            let (lo, hi) = c.bounds();
            assert!(((hi - lo).norm() - 2.0).abs() < 1e-12);
            assert!(((hi + lo) / 2.0).amax() < 1e-12);
        }
    }

    #[test]
    fn kind_names_roundtrip() {
        for s in ["sphere", "torus", "box-surface", "gaussian-blobs", "from-mesh:a/b.off"] {
            assert_eq!(s.parse::<ShapeKind>().unwrap().to_string(), s);
        }
        assert!(matches!("cube".parse::<ShapeKind>(), Err(Error::UnknownShape(_))));
        assert!("from-mesh:".parse::<ShapeKind>().is_err());
    }

    #[test]
    fn from_mesh_samples_surface() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.off");
        std::fs::write(&path, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        let kind: ShapeKind = format!("from-mesh:{}", path.display()).parse().unwrap();
        let pts = sample_shape_raw(&kind, 200, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(pts.iter().all(|p| p.z == 0.0 && p.x + p.y <= 1.0 + 1e-12));
    }
}
