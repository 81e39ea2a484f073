//! Similarity, soft matching, virtual corresponding points, exact nearest
//! neighbor search, Chamfer distance and ground-truth correspondences.

use crate::autodiff::{row_softmax as softmax_rows, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geom::{Point3, PointCloud, RigidTransform};

/// Above this reference size [`knn_points`] switches to the grid index.
pub const GRID_THRESHOLD: usize = 4096;

/// Default threshold of [`correct_match_ratio`], in model units.
pub const CORRECT_MATCH_TAU: f64 = 0.15;

/// Row-stochastic `N_X x N_Y` matrix of matching probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix(Tensor);

impl MatchMatrix {
    /// Wraps `t`, checking entries in `[0, 1]` and rows summing to 1 within 1e-9.
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::InvalidInput(format!("match matrix shape {:?}", t.shape())));
        }
        for r in 0..t.rows() {
            let row = t.row(r);
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!("row {r} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("row {r} sums to {s}")));
            }
        }
        Ok(MatchMatrix(t))
    }

    pub fn n_x(&self) -> usize {
        self.0.rows()
    }

    pub fn n_y(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.at(i, j)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// `S = Φ_X Φ_Y^T / sqrt(c)`.
pub fn similarity_matrix(phi_x: &Tensor, phi_y: &Tensor) -> Result<Tensor> {
    let c = phi_x.cols();
    if phi_y.cols() != c {
        return Err(Error::shape("similarity_matrix", phi_x.shape(), phi_y.shape()));
    }
    let (nx, ny) = (phi_x.rows(), phi_y.rows());
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        let a = phi_x.row(i);
        for j in 0..ny {
            let d: f64 = a.iter().zip(phi_y.row(j)).map(|(p, q)| p * q).sum();
            out.push(d * scale);
        }
    }
    Tensor::matrix(nx, ny, out)
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(s: &Tensor) -> Result<MatchMatrix> {
    if !s.is_finite() {
        return Err(Error::InvalidInput("non-finite similarity".into()));
    }
    Ok(MatchMatrix(softmax_rows(s)))
}

/// VCPs `Y' = M Y` (row `i` is `Σ_j m_ij y_j`) and their features `M Φ_Y`.
pub fn weighted_targets(y: &PointCloud, phi_y: &Tensor, m: &MatchMatrix) -> Result<(PointCloud, Tensor)> {
    if m.n_y() != y.len() || phi_y.rows() != y.len() {
        return Err(Error::shape("weighted_targets", m.as_tensor().shape(), &[y.len(), phi_y.rows()]));
    }
    let c = phi_y.cols();
    let mut pts = Vec::with_capacity(m.n_x());
    let mut feats = vec![0.0; m.n_x() * c];
    for i in 0..m.n_x() {
        let mut p = Point3::zeros();
        let frow = &mut feats[i * c..(i + 1) * c];
        for (j, &w) in m.as_tensor().row(i).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            p += w * y.points[j];
            for (f, v) in frow.iter_mut().zip(phi_y.row(j)) {
                *f += w * v;
            }
        }
        pts.push(p);
    }
    Ok((PointCloud::from_points(pts), Tensor::matrix(m.n_x(), c, feats)?))
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn dist2_p(a: &Point3, b: &Point3) -> f64 {
    dist2(a.as_slice(), b.as_slice())
}

/// Bounded insertion into a list sorted by (distance, index).
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn push(&mut self, d: f64, i: usize) {
        let before = |a: &(f64, usize)| a.0 < d || (a.0 == d && a.1 < i);
        if self.items.len() == self.k {
            match self.items.last() {
                Some(last) if !before(last) => {}
                _ => return,
            }
        }
        let pos = self.items.partition_point(before);
        self.items.insert(pos, (d, i));
        self.items.truncate(self.k);
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |x| x.0)
    }

    fn indices(self) -> Vec<usize> {
        self.items.into_iter().map(|x| x.1).collect()
    }
}

fn check_k(k: usize, n_ref: usize, exclude_self: bool) -> Result<()> {
    let avail = if exclude_self { n_ref.saturating_sub(1) } else { n_ref };
    if k == 0 || k > avail {
        return Err(Error::InvalidInput(format!(
            "k = {k} but only {avail} reference points available"
        )));
    }
    Ok(())
}

/// Exact brute-force kNN over rows of dimension `dim`. With `exclude_self`
/// query row `i` never returns reference row `i`. Ties go to lower indices.
pub fn knn_rows(
    query: &[f64],
    reference: &[f64],
    dim: usize,
    k: usize,
    exclude_self: bool,
    exec: Exec,
) -> Result<Vec<Vec<usize>>> {
    let nq = query.len() / dim;
    let nr = reference.len() / dim;
    check_k(k, nr, exclude_self)?;
    Ok(exec.map(nq, |i| {
        let q = &query[i * dim..(i + 1) * dim];
        let mut top = TopK::new(k);
        for j in 0..nr {
            if exclude_self && i == j {
                continue;
            }
            top.push(dist2(q, &reference[j * dim..(j + 1) * dim]), j);
        }
        top.indices()
    }))
}

/// kNN over feature rows of two tensors.
pub fn knn_features(query: &Tensor, reference: &Tensor, k: usize, exclude_self: bool) -> Result<Vec<Vec<usize>>> {
    if query.cols() != reference.cols() {
        return Err(Error::shape("knn_features", query.shape(), reference.shape()));
    }
    knn_rows(query.data(), reference.data(), query.cols(), k, exclude_self, Exec::Sequential)
}

/// Uniform grid over 3D points for exact kNN queries.
#[derive(Debug, Clone)]
pub struct GridIndex {
    points: Vec<Point3>,
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: `starts[c]..starts[c + 1]` indexes `sorted`.
    starts: Vec<usize>,
    sorted: Vec<usize>,
}

impl GridIndex {
    pub fn build(points: &[Point3]) -> Self {
        let cloud = PointCloud::from_points(points.to_vec());
        let (lo, hi) = cloud.bounds();
        let ext = hi - lo;
        let vol = ext.iter().map(|e| e.max(1e-9)).product::<f64>();
        // about two points per cell
        let mut cell = (2.0 * vol / points.len().max(1) as f64).cbrt();
        if !cell.is_finite() || cell <= 0.0 {
            cell = 1.0;
        }
        cell = cell.max(ext.amax() / 256.0).max(1e-12);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).max(1));
        let mut grid = GridIndex {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            starts: vec![],
            sorted: vec![],
        };
        let ncell = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0usize; ncell + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for c in 0..ncell {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut sorted = vec![0usize; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            sorted[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.sorted = sorted;
        grid
    }

    fn cell_of(&self, p: &Point3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact k nearest reference indices to `q`, skipping index `skip`.
    pub fn query(&self, q: &Point3, k: usize, skip: Option<usize>) -> Vec<usize> {
        let c = self.cell_of(q);
        let mut top = TopK::new(k);
        let max_r = *self.dims.iter().max().expect("3 dims");
        for r in 0..=max_r {
            let lo = c.map(|v| v as isize - r as isize);
            let hi = c.map(|v| v as isize + r as isize);
            for z in lo[2].max(0)..=hi[2].min(self.dims[2] as isize - 1) {
                for y in lo[1].max(0)..=hi[1].min(self.dims[1] as isize - 1) {
                    for x in lo[0].max(0)..=hi[0].min(self.dims[0] as isize - 1) {
                        let on_shell = x == lo[0] || x == hi[0] || y == lo[1] || y == hi[1] || z == lo[2] || z == hi[2];
                        if !on_shell {
                            continue;
                        }
                        let f = self.flat([x as usize, y as usize, z as usize]);
                        for &j in &self.sorted[self.starts[f]..self.starts[f + 1]] {
                            if Some(j) != skip {
                                top.push(dist2_p(q, &self.points[j]), j);
                            }
                        }
                    }
                }
            }
            // lower bound on the distance to any point outside the block
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                let covers_lo = lo[a] <= 0;
                let covers_hi = hi[a] >= self.dims[a] as isize - 1;
                if !covers_lo {
                    let edge = self.origin[a] + lo[a] as f64 * self.cell;
                    bound = bound.min((q[a] - edge).max(0.0));
                }
                if !covers_hi {
                    let edge = self.origin[a] + (hi[a] + 1) as f64 * self.cell;
                    bound = bound.min((edge - q[a]).max(0.0));
                }
            }
            if bound.is_infinite() || (top.full() && top.worst() < bound * bound) {
                break;
            }
        }
        top.indices()
    }
}

/// Exact kNN of 3D points; brute force below [`GRID_THRESHOLD`] reference
/// points and the grid index above. Both paths return identical results.
pub fn knn_points(
    query: &[Point3],
    reference: &[Point3],
    k: usize,
    exclude_self: bool,
    exec: Exec,
) -> Result<Vec<Vec<usize>>> {
    if reference.len() < GRID_THRESHOLD {
        knn_points_brute(query, reference, k, exclude_self, exec)
    } else {
        knn_points_grid(query, reference, k, exclude_self, exec)
    }
}

pub fn knn_points_brute(
    query: &[Point3],
    reference: &[Point3],
    k: usize,
    exclude_self: bool,
    exec: Exec,
) -> Result<Vec<Vec<usize>>> {
    let q: Vec<f64> = query.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let r: Vec<f64> = reference.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    knn_rows(&q, &r, 3, k, exclude_self, exec)
}

pub fn knn_points_grid(
    query: &[Point3],
    reference: &[Point3],
    k: usize,
    exclude_self: bool,
    exec: Exec,
) -> Result<Vec<Vec<usize>>> {
    check_k(k, reference.len(), exclude_self)?;
    let grid = GridIndex::build(reference);
    Ok(exec.map(query.len(), |i| {
        grid.query(&query[i], k, exclude_self.then_some(i))
    }))
}

/// kNN between clouds (self-exclusion off).
pub fn knn(query: &PointCloud, reference: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    knn_points(&query.points, &reference.points, k, false, Exec::Parallel)
}

/// Nearest reference index and squared distance for each query point.
pub fn nearest(query: &[Point3], reference: &[Point3], exec: Exec) -> Result<Vec<(usize, f64)>> {
    let nn = knn_points(query, reference, 1, false, exec)?;
    Ok(nn
        .into_iter()
        .zip(query)
        .map(|(ix, q)| (ix[0], dist2_p(q, &reference[ix[0]])))
        .collect())
}

/// Symmetric Chamfer distance: mean nearest squared distance from X to Y
/// plus the same from Y to X.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    chamfer_with(x, y, Exec::Parallel)
}

pub fn chamfer_with(x: &PointCloud, y: &PointCloud, exec: Exec) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidInput("chamfer of an empty cloud".into()));
    }
    let mean = |v: Vec<(usize, f64)>| v.iter().map(|p| p.1).sum::<f64>() / v.len() as f64;
    let xy = mean(nearest(&x.points, &y.points, exec)?);
    let yx = mean(nearest(&y.points, &x.points, exec)?);
    Ok(xy + yx)
}

/// Binary ground-truth correspondences. Row `i` is matched to
/// `partner[i]`, or is an outlier row (all zeros).
#[derive(Debug, Clone, PartialEq)]
pub struct GtMatching {
    pub partner: Vec<Option<usize>>,
    pub n_y: usize,
}

impl GtMatching {
    pub fn n_x(&self) -> usize {
        self.partner.len()
    }

    pub fn inlier_count(&self) -> usize {
        self.partner.iter().filter(|p| p.is_some()).count()
    }

    pub fn outlier_mask(&self) -> Vec<bool> {
        self.partner.iter().map(Option::is_none).collect()
    }

    pub fn inlier_fraction(&self) -> f64 {
        self.inlier_count() as f64 / self.n_x() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = vec![0.0; self.n_x() * self.n_y];
        for (i, p) in self.partner.iter().enumerate() {
            if let Some(j) = p {
                data[i * self.n_y + j] = 1.0;
            }
        }
        Tensor::matrix(self.n_x(), self.n_y, data).expect("shape")
    }
}

/// Matches each `T_gt x_i` to its nearest target point if that point is
/// within `tau`; otherwise the row is an outlier.
pub fn gt_matching_matrix(x: &PointCloud, y: &PointCloud, t_gt: &RigidTransform, tau: f64) -> Result<GtMatching> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidInput(format!("threshold {tau} must be positive")));
    }
    let moved: Vec<Point3> = x.points.iter().map(|p| t_gt.apply_point(p)).collect();
    let nn = nearest(&moved, &y.points, Exec::Sequential)?;
    let partner = nn
        .into_iter()
        .map(|(j, d2)| (d2.sqrt() <= tau).then_some(j))
        .collect();
    Ok(GtMatching { partner, n_y: y.len() })
}

/// Fraction of predicted partners within `tau` of `T_gt x_i`.
pub fn correct_match_ratio(pred: &PointCloud, x: &PointCloud, t_gt: &RigidTransform, tau: f64) -> Result<f64> {
    if pred.len() != x.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} source points",
            pred.len(),
            x.len()
        )));
    }
    let hits = pred
        .points
        .iter()
        .zip(&x.points)
        .filter(|(p, q)| (*p - t_gt.apply_point(q)).norm() < tau)
        .count();
    Ok(hits as f64 / x.len() as f64)
}
