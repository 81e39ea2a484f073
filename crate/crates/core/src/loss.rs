//! Matching supervision, local motion consensus, edge and node structure
//! losses, offset supervision and their weighted sum.
//!
//! Every loss exists twice: a plain `f64` evaluation and a tape builder
//! (`*_node`) used for training. Tests hold the two against each other.

use nalgebra::Matrix3;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, RigidTransform};
use crate::matching::{GtMatching, MatchMatrix};
use crate::procrustes::{solve_rigid_points, VjpOptions};

/// Number of consensus subsets per evaluation of L1.
pub const DEFAULT_GROUPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            l2: 1.0,
            l3: 1.0,
            l4: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("l1", self.l1), ("l2", self.l2), ("l3", self.l3), ("l4", self.l4)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Component values of one hybrid-loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

/// Pairwise Euclidean distances of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMatrix(Tensor);

impl EdgeMatrix {
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.at(i, j)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `sqrt(mean((a - b)^2))` over all entries.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

fn flat(points: &[Point3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn points_tensor(points: &[Point3]) -> Tensor {
    Tensor::matrix(points.len(), 3, flat(points)).expect("n x 3")
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a, 3], &[b, 3]));
    }
    Ok(())
}

/// `L0 = -Σ m_pred * m_gt / Σ m_gt`.
pub fn loss_l0(m_pred: &MatchMatrix, m_gt: &GtMatching) -> Result<f64> {
    if m_pred.n_x() != m_gt.n_x() || m_pred.n_y() != m_gt.n_y {
        return Err(Error::shape(
            "loss_l0",
            m_pred.as_tensor().shape(),
            &[m_gt.n_x(), m_gt.n_y],
        ));
    }
    let inliers = m_gt.inlier_count();
    if inliers == 0 {
        return Err(Error::AllOutliers);
    }
    let hit: f64 = m_gt
        .partner
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|j| m_pred.get(i, j)))
        .sum();
    Ok(-hit / inliers as f64)
}

/// Default consensus subset size `max(3, floor(n / 8))`.
pub fn default_subset_size(n: usize) -> usize {
    (n / 8).max(3)
}

fn coincident(x: &[Point3], idx: &[usize]) -> bool {
    idx.iter().all(|&i| x[i] == x[idx[0]])
}

/// Draws `groups` index subsets of `size` distinct indices each. A subset
/// whose source points all coincide is redrawn once, then rejected.
pub fn sample_subsets<R: Rng + ?Sized>(
    x: &[Point3],
    groups: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if size < 3 || size > x.len() {
        return Err(Error::InvalidInput(format!(
            "subset size {size} must lie in [3, {}]",
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(groups);
    for _ in 0..groups {
        let mut idx = sample(rng, x.len(), size).into_vec();
        if coincident(x, &idx) {
            idx = sample(rng, x.len(), size).into_vec();
            if coincident(x, &idx) {
                return Err(Error::DegenerateConfiguration(
                    "consensus subset with coincident source points".into(),
                ));
            }
        }
        out.push(idx);
    }
    Ok(out)
}

fn consensus_term(r: &Matrix3<f64>, t_full: &RigidTransform, sub: &RigidTransform) -> f64 {
    let m = sub.rotation.transpose() * r;
    let eye = Matrix3::identity();
    rmse(m.as_slice(), eye.as_slice()) + rmse(sub.translation.as_slice(), t_full.translation.as_slice())
}

/// L1 over explicit subsets: mean over groups of
/// `rmse(R_g^T R, I) + rmse(t_g, t)`.
pub fn loss_l1_subsets(x: &PointCloud, y2: &PointCloud, t_pred: &RigidTransform, subsets: &[Vec<usize>]) -> Result<f64> {
    same_len("loss_l1", x.len(), y2.len())?;
    if subsets.is_empty() {
        return Err(Error::InvalidInput("no consensus subsets".into()));
    }
    let mut acc = 0.0;
    for idx in subsets {
        let xs: Vec<Point3> = idx.iter().map(|&i| x.points[i]).collect();
        let ys: Vec<Point3> = idx.iter().map(|&i| y2.points[i]).collect();
        let sub = solve_rigid_points(&xs, &ys)?;
        acc += consensus_term(&t_pred.rotation, t_pred, &sub);
    }
    Ok(acc / subsets.len() as f64)
}

/// Local motion consensus with freshly drawn subsets.
pub fn loss_l1<R: Rng + ?Sized>(
    x: &PointCloud,
    y2: &PointCloud,
    t_pred: &RigidTransform,
    groups: usize,
    subset_size: usize,
    rng: &mut R,
) -> Result<f64> {
    same_len("loss_l1", x.len(), y2.len())?;
    let subsets = sample_subsets(&x.points, groups, subset_size, rng)?;
    loss_l1_subsets(x, y2, t_pred, &subsets)
}

pub fn edge_matrix(p: &PointCloud) -> Result<EdgeMatrix> {
    if p.is_empty() {
        return Err(Error::InvalidInput("edge matrix of an empty cloud".into()));
    }
    let n = p.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = (p.points[i] - p.points[j]).norm();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(EdgeMatrix(Tensor::matrix(n, n, d)?))
}

/// `L2 = rmse(D, D'')`.
pub fn loss_l2(d: &EdgeMatrix, d2: &EdgeMatrix) -> Result<f64> {
    if d.n() != d2.n() {
        return Err(Error::shape("loss_l2", d.0.shape(), d2.0.shape()));
    }
    Ok(rmse(d.0.data(), d2.0.data()))
}

/// `L3 = rmse(R X + t, Y'')`.
pub fn loss_l3(t_pred: &RigidTransform, x: &PointCloud, y2: &PointCloud) -> Result<f64> {
    same_len("loss_l3", x.len(), y2.len())?;
    let moved: Vec<Point3> = x.points.iter().map(|p| t_pred.apply_point(p)).collect();
    Ok(rmse(&flat(&moved), &flat(&y2.points)))
}

/// `L4 = rmse(R_gt X + t_gt - Y', Δt)`.
pub fn loss_l4(t_gt: &RigidTransform, x: &PointCloud, y1: &PointCloud, offsets: &[Point3]) -> Result<f64> {
    same_len("loss_l4", x.len(), y1.len())?;
    same_len("loss_l4", x.len(), offsets.len())?;
    let gap: Vec<Point3> = x
        .points
        .iter()
        .zip(&y1.points)
        .map(|(p, v)| t_gt.apply_point(p) - v)
        .collect();
    Ok(rmse(&flat(&gap), &flat(offsets)))
}

/// `L = λ1 L1 + λ2 L2 + λ3 L3 + λ4 L4`.
pub fn hybrid_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.l1 * parts.l1 + w.l2 * parts.l2 + w.l3 * parts.l3 + w.l4 * parts.l4
}

// ---- tape builders ----

/// `sqrt(mean((a - b)^2))` on the tape.
pub fn rmse_node(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let m = tape.mean(sq);
    tape.sqrt(m)
}

/// L0 from a predicted `[n_x, n_y]` matching node.
pub fn l0_node(tape: &mut Tape, m_pred: Var, m_gt: &GtMatching) -> Result<Var> {
    let inliers = m_gt.inlier_count();
    if inliers == 0 {
        return Err(Error::AllOutliers);
    }
    let gt = tape.constant(m_gt.to_tensor());
    let prod = tape.mul(m_pred, gt)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / inliers as f64))
}

/// Splits a `[4, 3]` rigid-solve node into `R` (`[3, 3]`) and `t` (`[1, 3]`).
pub fn split_pose(tape: &mut Tape, pose: Var) -> Result<(Var, Var)> {
    let r = tape.slice_rows(pose, 0, 3)?;
    let t = tape.slice_rows(pose, 3, 1)?;
    Ok((r, t))
}

/// `R X + t` as an `[n, 3]` node for constant `x`.
pub fn transform_node(tape: &mut Tape, x: &[Point3], r: Var, t: Var) -> Result<Var> {
    let xc = tape.constant(points_tensor(x));
    let rt = tape.transpose(r)?;
    let rx = tape.matmul(xc, rt)?;
    tape.add_row(rx, t)
}

/// L1 on the tape. `pose` is the full-set solve of `(x, y2)`.
pub fn l1_node(tape: &mut Tape, x: &[Point3], y2: Var, pose: Var, subsets: &[Vec<usize>], opts: VjpOptions) -> Result<Var> {
    if subsets.is_empty() {
        return Err(Error::InvalidInput("no consensus subsets".into()));
    }
    let (r, t) = split_pose(tape, pose)?;
    let eye = tape.constant(Tensor::matrix(3, 3, Matrix3::<f64>::identity().as_slice().to_vec())?);
    let mut terms = Vec::with_capacity(subsets.len());
    for idx in subsets {
        let xs: Vec<Point3> = idx.iter().map(|&i| x[i]).collect();
        let ys = tape.gather_rows(y2, idx)?;
        let sub = tape.rigid_solve(&xs, ys, opts)?;
        let (rg, tg) = split_pose(tape, sub)?;
        let rgt = tape.transpose(rg)?;
        let m = tape.matmul(rgt, r)?;
        let er = rmse_node(tape, m, eye)?;
        let et = rmse_node(tape, tg, t)?;
        terms.push(tape.add(er, et)?);
    }
    let stacked = tape.vstack(&terms)?;
    Ok(tape.mean(stacked))
}

/// Pairwise distance node `[n, n]` of an `[n, 3]` node.
pub fn edge_node(tape: &mut Tape, p: Var) -> Result<Var> {
    let n = tape.value(p).rows();
    let ii: Vec<usize> = (0..n * n).map(|k| k / n).collect();
    let jj: Vec<usize> = (0..n * n).map(|k| k % n).collect();
    let a = tape.gather_rows(p, &ii)?;
    let b = tape.gather_rows(p, &jj)?;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let s = tape.sum_last(sq);
    let dist = tape.sqrt(s)?;
    tape.reshape(dist, &[n, n])
}

/// L2 between the constant source edge matrix and that of `y2`.
pub fn l2_node(tape: &mut Tape, x: &PointCloud, y2: Var) -> Result<Var> {
    let d = tape.constant(edge_matrix(x)?.0);
    let d2 = edge_node(tape, y2)?;
    rmse_node(tape, d, d2)
}

pub fn l3_node(tape: &mut Tape, x: &[Point3], y2: Var, pose: Var) -> Result<Var> {
    let (r, t) = split_pose(tape, pose)?;
    let moved = transform_node(tape, x, r, t)?;
    rmse_node(tape, moved, y2)
}

/// L4 given the VCP node `y1` and offset node `dt`.
pub fn l4_node(tape: &mut Tape, t_gt: &RigidTransform, x: &[Point3], y1: Var, dt: Var) -> Result<Var> {
    let moved: Vec<Point3> = x.iter().map(|p| t_gt.apply_point(p)).collect();
    let target = tape.constant(points_tensor(&moved));
    let gap = tape.sub(target, y1)?;
    rmse_node(tape, gap, dt)
}

/// Hybrid loss node from the four component nodes.
pub fn hybrid_node(tape: &mut Tape, parts: [Var; 4], w: &LossWeights) -> Result<Var> {
    let weights = [w.l1, w.l2, w.l3, w.l4];
    let scaled: Vec<Var> = parts.iter().zip(weights).map(|(&p, s)| tape.scale(p, s)).collect();
    let stacked = tape.vstack(&scaled)?;
    Ok(tape.sum(stacked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::geom::random_rigid;
    use crate::matching::row_softmax;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        PointCloud::from_points(
            (0..n)
                .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        )
    }

    fn one_hot(n: usize, perm: &[usize]) -> MatchMatrix {
        let mut d = vec![0.0; n * n];
        for (i, &j) in perm.iter().enumerate() {
            d[i * n + j] = 1.0;
        }
        MatchMatrix::new(Tensor::matrix(n, n, d).unwrap()).unwrap()
    }

    fn gt(perm: &[Option<usize>], n_y: usize) -> GtMatching {
        GtMatching {
            partner: perm.to_vec(),
            n_y,
        }
    }

    #[test]
    fn l0_cases() {
        let g = gt(&[Some(1), Some(0), Some(2)], 3);
        assert_eq!(loss_l0(&one_hot(3, &[1, 0, 2]), &g).unwrap(), -1.0);
        assert_eq!(loss_l0(&one_hot(3, &[0, 2, 1]), &g).unwrap(), 0.0);
        let uniform = MatchMatrix::new(Tensor::full(&[3, 4], 0.25)).unwrap();
        let g4 = gt(&[Some(1), None, Some(3)], 4);
        assert!((loss_l0(&uniform, &g4).unwrap() + 0.25).abs() < 1e-15);
        assert!(matches!(loss_l0(&uniform, &gt(&[None, None, None], 4)), Err(Error::AllOutliers)));
    }

    #[test]
    fn l1_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = cloud(&mut rng, 40);
        let t = random_rigid(&mut rng, 45.0, 0.5);
        let y = t.apply(&x).unwrap();
        assert!(loss_l1(&x, &y, &t, 10, 5, &mut rng).unwrap() < 1e-9);
        let all: Vec<usize> = (0..40).collect();
        let t_full = solve_rigid_points(&x.points, &y.points).unwrap();
        assert!(loss_l1_subsets(&x, &y, &t_full, &[all]).unwrap() < 1e-9);

        // one corrupted point: positive, and smaller once repaired halfway
        let mut bad = y.clone();
        bad.points[3] += Vector3::new(0.8, -0.5, 0.3);
        let mut half = y.clone();
        half.points[3] += Vector3::new(0.4, -0.25, 0.15);
        let subsets = sample_subsets(&x.points, 10, 5, &mut rng).unwrap();
        let subsets: Vec<Vec<usize>> = subsets
            .into_iter()
            .map(|mut s| {
                if !s.contains(&3) {
                    s[0] = 3;
                }
                s
            })
            .collect();
        let lb = loss_l1_subsets(&x, &bad, &solve_rigid_points(&x.points, &bad.points).unwrap(), &subsets).unwrap();
        let lh = loss_l1_subsets(&x, &half, &solve_rigid_points(&x.points, &half.points).unwrap(), &subsets).unwrap();
        assert!(lb > 0.0 && lh < lb, "{lb} {lh}");
    }

    #[test]
    fn subsets_reject_coincident_sources() {
        let x = vec![Point3::zeros(); 6];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_subsets(&x, 2, 3, &mut rng), Err(Error::DegenerateConfiguration(_))));
        assert!(sample_subsets(&x, 2, 7, &mut rng).is_err());
        assert_eq!(default_subset_size(8), 3);
        assert_eq!(default_subset_size(128), 16);
    }

    #[test]
    fn edge_matrix_cases() {
        let p = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(edge_matrix(&p).unwrap().as_tensor().data(), &[0.0, 2.0, 2.0, 0.0]);
        let h = 3f64.sqrt() / 2.0;
        let tri = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0]]).unwrap();
        let d = edge_matrix(&tri).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 1.0 };
                assert!((d.get(i, j) - want).abs() < 1e-15);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = cloud(&mut rng, 20);
        let t = random_rigid(&mut rng, 45.0, 0.5);
        let a = edge_matrix(&q).unwrap();
        let b = edge_matrix(&t.apply(&q).unwrap()).unwrap();
        assert!(rmse(a.as_tensor().data(), b.as_tensor().data()) < 1e-12);
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(a.get(i, j), a.get(j, i));
                for k in 0..20 {
                    assert!(a.get(i, k) <= a.get(i, j) + a.get(j, k) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn l2_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = cloud(&mut rng, 6);
        let d = edge_matrix(&p).unwrap();
        assert_eq!(loss_l2(&d, &d).unwrap(), 0.0);
        // one symmetric entry pair off by delta
        let n = 6;
        let delta = 0.3;
        let mut t = d.as_tensor().clone();
        t.data_mut()[n + 4] += delta;
        t.data_mut()[4 * n + 1] += delta;
        let want = delta * (2.0 / (n * n) as f64).sqrt();
        assert!((loss_l2(&d, &EdgeMatrix(t)).unwrap() - want).abs() < 1e-15);
        // uniform scale
        let s = 1.7;
        let scaled = PointCloud::from_points(p.points.iter().map(|q| q * s).collect());
        let zero = EdgeMatrix(Tensor::zeros(&[n, n]));
        let want = (s - 1.0) * loss_l2(&d, &zero).unwrap();
        assert!((loss_l2(&d, &edge_matrix(&scaled).unwrap()).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn l3_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = cloud(&mut rng, 12);
        let t = random_rigid(&mut rng, 45.0, 0.5);
        let y = t.apply(&x).unwrap();
        assert!(loss_l3(&t, &x, &y).unwrap() < 1e-15);
        let eps = 0.05;
        let off = PointCloud::from_points(y.points.iter().map(|p| p + Vector3::new(eps, 0.0, 0.0)).collect());
        // rmse over all 3n entries of a residual that is eps on one axis only
        let want = eps / 3f64.sqrt();
        assert!((loss_l3(&t, &x, &off).unwrap() - want).abs() < 1e-12);
        let perm: Vec<usize> = (0..12).rev().collect();
        let a = loss_l3(&t, &x, &off).unwrap();
        let b = loss_l3(&t, &x.select(&perm), &off.select(&perm)).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn l4_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = cloud(&mut rng, 10);
        let y1 = cloud(&mut rng, 10);
        let t = random_rigid(&mut rng, 45.0, 0.5);
        let gap: Vec<Point3> = x.points.iter().zip(&y1.points).map(|(p, v)| t.apply_point(p) - v).collect();
        assert!(loss_l4(&t, &x, &y1, &gap).unwrap() < 1e-15);
        let zeros = vec![Point3::zeros(); 10];
        let raw = rmse(&flat(&gap), &vec![0.0; 30]);
        assert!((loss_l4(&t, &x, &y1, &zeros).unwrap() - raw).abs() < 1e-15);
        // shifting the VCPs by s moves the gap by -s; shifting the offsets by -s cancels it
        let s = Vector3::new(0.1, -0.2, 0.3);
        let y1s = PointCloud::from_points(y1.points.iter().map(|p| p + s).collect());
        let zs: Vec<Point3> = zeros.iter().map(|p| p - s).collect();
        assert!((loss_l4(&t, &x, &y1s, &zs).unwrap() - raw).abs() < 1e-12);
    }

    #[test]
    fn hybrid_cases() {
        let w = LossWeights::default();
        assert_eq!((w.l1, w.l2, w.l3, w.l4), (1.0, 1.0, 1.0, 100.0));
        assert_eq!(hybrid_loss(&LossParts::default(), &w), 0.0);
        let p = LossParts {
            l4: 0.01,
            ..Default::default()
        };
        assert!((hybrid_loss(&p, &w) - 1.0).abs() < 1e-15);
        let zero = LossWeights {
            l1: 0.0,
            l2: 0.0,
            l3: 0.0,
            l4: 0.0,
        };
        let p = LossParts {
            l1: 3.0,
            l2: 1.0,
            l3: 7.0,
            l4: 2.0,
        };
        assert_eq!(hybrid_loss(&p, &zero), 0.0);
        assert!(LossWeights { l1: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn joint_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = cloud(&mut rng, 32);
        let t = random_rigid(&mut rng, 45.0, 0.5);
        let y2 = t.apply(&x).unwrap();
        let y1 = cloud(&mut rng, 32);
        let dt: Vec<Point3> = y2.points.iter().zip(&y1.points).map(|(a, b)| a - b).collect();
        let parts = LossParts {
            l1: loss_l1(&x, &y2, &t, 10, 4, &mut rng).unwrap(),
            l2: loss_l2(&edge_matrix(&x).unwrap(), &edge_matrix(&y2).unwrap()).unwrap(),
            l3: loss_l3(&t, &x, &y2).unwrap(),
            l4: loss_l4(&t, &x, &y1, &dt).unwrap(),
        };
        for v in [parts.l1, parts.l2, parts.l3, parts.l4] {
            assert!(v.abs() < 1e-9, "{parts:?}");
        }
    }

    /// Tape builders against the plain evaluations on random data.
    #[test]
    fn nodes_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = cloud(&mut rng, 9);
        let y2 = cloud(&mut rng, 9);
        let y1 = cloud(&mut rng, 9);
        let dt = cloud(&mut rng, 9);
        let tg = random_rigid(&mut rng, 45.0, 0.5);
        let subsets = sample_subsets(&x.points, 4, 3, &mut rng).unwrap();
        let t_pred = solve_rigid_points(&x.points, &y2.points).unwrap();

        let mut tape = Tape::new();
        let yv = tape.leaf(points_tensor(&y2.points));
        let y1v = tape.leaf(points_tensor(&y1.points));
        let dv = tape.leaf(points_tensor(&dt.points));
        let pose = tape.rigid_solve(&x.points, yv, VjpOptions::default()).unwrap();
        let l1 = l1_node(&mut tape, &x.points, yv, pose, &subsets, VjpOptions::default()).unwrap();
        let l2 = l2_node(&mut tape, &x, yv).unwrap();
        let l3 = l3_node(&mut tape, &x.points, yv, pose).unwrap();
        let l4 = l4_node(&mut tape, &tg, &x.points, y1v, dv).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(tape.value(l1).item(), loss_l1_subsets(&x, &y2, &t_pred, &subsets).unwrap()));
        assert!(close(
            tape.value(l2).item(),
            loss_l2(&edge_matrix(&x).unwrap(), &edge_matrix(&y2).unwrap()).unwrap()
        ));
        assert!(close(tape.value(l3).item(), loss_l3(&t_pred, &x, &y2).unwrap()));
        assert!(close(tape.value(l4).item(), loss_l4(&tg, &x, &y1, &dt.points).unwrap()));

        let m = row_softmax(&Tensor::matrix(9, 9, (0..81).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()).unwrap();
        let g = gt(&[Some(0), None, Some(5), Some(2), Some(8), None, Some(1), Some(7), Some(3)], 9);
        let mv = tape.leaf(m.as_tensor().clone());
        let l0 = l0_node(&mut tape, mv, &g).unwrap();
        assert!(close(tape.value(l0).item(), loss_l0(&m, &g).unwrap()));
        let w = LossWeights::default();
        let h = hybrid_node(&mut tape, [l1, l2, l3, l4], &w).unwrap();
        let parts = LossParts {
            l1: tape.value(l1).item(),
            l2: tape.value(l2).item(),
            l3: tape.value(l3).item(),
            l4: tape.value(l4).item(),
        };
        assert!(close(tape.value(h).item(), hybrid_loss(&parts, &w)));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = cloud(&mut rng, 8);
        let t = random_rigid(&mut rng, 45.0, 0.5);
        let y2 = PointCloud::from_points(t.apply(&x).unwrap().points.iter().map(|p| p + Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2))).collect());
        let subsets = sample_subsets(&x.points, 10, 3, &mut rng).unwrap();
        let opts = VjpOptions::default();
        let leaves = [points_tensor(&y2.points), points_tensor(&cloud(&mut rng, 8).points), points_tensor(&cloud(&mut rng, 8).points)];
        let r = grad_check(
            |tp, v| {
                let pose = tp.rigid_solve(&x.points, v[0], opts)?;
                let a = l1_node(tp, &x.points, v[0], pose, &subsets, opts)?;
                let b = l2_node(tp, &x, v[0])?;
                let c = l3_node(tp, &x.points, v[0], pose)?;
                let d = l4_node(tp, &t, &x.points, v[1], v[2])?;
                hybrid_node(tp, [a, b, c, d], &LossWeights::default())
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #[test]
        fn l0_in_range(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (nx, ny) = (rng.random_range(1..10), rng.random_range(1..10));
            let m = row_softmax(&Tensor::matrix(nx, ny, (0..nx * ny).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap()).unwrap();
            let mut partner: Vec<Option<usize>> = (0..nx).map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..ny))).collect();
            partner[0] = Some(0);
            let v = loss_l0(&m, &GtMatching { partner, n_y: ny }).unwrap();
            prop_assert!((-1.0..=0.0).contains(&v));
        }

        #[test]
        fn l1_is_deterministic_per_seed(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = cloud(&mut rng, 16);
            let y = cloud(&mut rng, 16);
            let t = solve_rigid_points(&x.points, &y.points).unwrap();
            let a = loss_l1(&x, &y, &t, 10, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = loss_l1(&x, &y, &t, 10, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a >= 0.0);
        }
    }
}
