//! Point-to-point ICP baseline and the iterative refinement wrapper.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geom::{Point3, PointCloud, RigidTransform};
use crate::matching::nearest;
use crate::procrustes::solve_rigid_points;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpOptions {
    pub max_iter: usize,
    /// Stop once the mean squared residual drops by less than this.
    pub tol: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        IcpOptions { max_iter: 100, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Mean squared nearest-neighbor residual before each solve and after
    /// the last one. Nonincreasing by construction.
    pub trace: Vec<f64>,
    /// Correspondence/solve cycles run, including a final rejected one.
    pub iterations: usize,
    pub converged: bool,
}

fn matched(moved: &[Point3], y: &PointCloud, exec: Exec) -> Result<(Vec<Point3>, f64)> {
    let nn = nearest(moved, &y.points, exec)?;
    let mean = nn.iter().map(|p| p.1).sum::<f64>() / nn.len() as f64;
    Ok((nn.iter().map(|&(j, _)| y.points[j]).collect(), mean))
}

fn distinct_count(pts: &[Point3]) -> usize {
    let mut v: Vec<[u64; 3]> = pts.iter().map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Aligns `x` onto `y` by alternating nearest-neighbor correspondence and
/// the closed-form rigid solve. A step that would raise the residual (only
/// possible through round-off at convergence) is rejected and ends the run.
pub fn icp_register(x: &PointCloud, y: &PointCloud, opts: &IcpOptions, exec: Exec) -> Result<IcpResult> {
    for (op, p) in [("icp source", x), ("icp target", y)] {
        p.validate()?;
        if p.len() < 3 {
            return Err(Error::Arity { op, expected: 3, got: p.len() });
        }
    }
    if opts.tol.is_nan() || opts.tol < 0.0 {
        return Err(Error::Config(format!("icp tol {} must be nonnegative", opts.tol)));
    }
    let mut total = RigidTransform::identity();
    let mut moved = x.points.clone();
    let (mut targets, mut res) = matched(&moved, y, exec)?;
    let mut trace = vec![res];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        if distinct_count(&targets) < 3 {
            return Err(Error::DegenerateConfiguration(
                "fewer than 3 distinct nearest-neighbor targets".into(),
            ));
        }
        let step = solve_rigid_points(&moved, &targets)?;
        let next: Vec<Point3> = moved.iter().map(|p| step.apply_point(p)).collect();
        let (next_targets, next_res) = matched(&next, y, exec)?;
        iterations += 1;
        if next_res > res {
            converged = true;
            break;
        }
        total = step.compose(&total);
        moved = next;
        targets = next_targets;
        trace.push(next_res);
        let change = res - next_res;
        res = next_res;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(IcpResult {
        transform: total,
        trace,
        iterations,
        converged,
    })
}

/// Re-registers the moved source `k` times and composes the increments:
/// `T_k ∘ … ∘ T_1`. With `k = 1` this is exactly one `register` call.
pub fn iterative_refine<F>(mut register: F, x: &PointCloud, y: &PointCloud, k: usize) -> Result<RigidTransform>
where
    F: FnMut(&PointCloud, &PointCloud) -> Result<RigidTransform>,
{
    if k == 0 {
        return Err(Error::InvalidInput("iterative_refine needs k >= 1".into()));
    }
    let mut total = register(x, y)?;
    for _ in 1..k {
        let moved = total.apply(x)?;
        let step = register(&moved, y)?;
        total = step.compose(&total);
    }
    Ok(total)
}
