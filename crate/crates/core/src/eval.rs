//! Pose-error aggregation over a test set, plus dataset-level runners for
//! the learned model and the ICP baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::RegistrationPair;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geom::{euler_from_rotation, rotation_error_deg, translation_error, RigidTransform};
use crate::icp::{icp_register, iterative_refine, IcpOptions};
use crate::matching::chamfer_with;
use crate::model::{vrnet_register, Model, RegisterOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub rot_deg: f64,
    pub trans: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { rot_deg: 15.0, trans: 0.30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub recall: Thresholds,
    /// Refinement rounds for `register`; 1 is a single pass.
    pub iters: usize,
    pub correction: bool,
    pub icp: IcpOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            recall: Thresholds::default(),
            iters: 1,
            correction: true,
            icp: IcpOptions::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("eval.iters must be >= 1".into()));
        }
        if !(self.recall.rot_deg >= 0.0 && self.recall.trans >= 0.0) {
            return Err(Error::Config("recall thresholds must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Aggregate pose errors. Euler errors are pooled per axis and then across
/// pairs; mean RE/TE over successful pairs follow the scene-registration
/// convention and are absent when no pair succeeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: usize,
    pub thresholds: Thresholds,
    pub recall: f64,
    pub successes: usize,
    pub rmse_rot_deg: f64,
    pub mae_rot_deg: f64,
    pub rmse_trans: f64,
    pub mae_trans: f64,
    pub re_mean: f64,
    pub te_mean: f64,
    pub re_median: f64,
    pub te_median: f64,
    pub re_mean_success: Option<f64>,
    pub te_mean_success: Option<f64>,
}

/// Wraps an angle difference into `(-180, 180]`.
pub fn wrap_deg(d: f64) -> f64 {
    let w = d.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Sum in ascending order, so the result is independent of input order.
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-pair `(RE degrees, TE)`.
pub fn pose_errors(pred: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    (
        rotation_error_deg(&pred.rotation, &gt.rotation),
        translation_error(&pred.translation, &gt.translation),
    )
}

pub fn compute_metrics(results: &[(RigidTransform, RigidTransform)], th: &Thresholds) -> Result<MetricReport> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no results to evaluate".into()));
    }
    let mut rot_axis = Vec::with_capacity(3 * results.len());
    let mut trans_axis = Vec::with_capacity(3 * results.len());
    let mut re = Vec::with_capacity(results.len());
    let mut te = Vec::with_capacity(results.len());
    for (pred, gt) in results {
        let ep = euler_from_rotation(&pred.rotation).as_array();
        let eg = euler_from_rotation(&gt.rotation).as_array();
        for k in 0..3 {
            rot_axis.push(wrap_deg(ep[k] - eg[k]));
            trans_axis.push(pred.translation[k] - gt.translation[k]);
        }
        let (r, t) = pose_errors(pred, gt);
        re.push(r);
        te.push(t);
    }
    let ok: Vec<bool> = re.iter().zip(&te).map(|(r, t)| *r <= th.rot_deg && *t <= th.trans).collect();
    let successes = ok.iter().filter(|&&b| b).count();
    let pick = |v: &[f64]| -> Vec<f64> { v.iter().zip(&ok).filter(|(_, &o)| o).map(|(x, _)| *x).collect() };
    let sq = |v: &[f64]| v.iter().map(|e| e * e).collect::<Vec<_>>();
    let abs = |v: &[f64]| v.iter().map(|e| e.abs()).collect::<Vec<_>>();
    Ok(MetricReport {
        pairs: results.len(),
        thresholds: *th,
        recall: successes as f64 / results.len() as f64,
        successes,
        rmse_rot_deg: sorted_mean(sq(&rot_axis)).sqrt(),
        mae_rot_deg: sorted_mean(abs(&rot_axis)),
        rmse_trans: sorted_mean(sq(&trans_axis)).sqrt(),
        mae_trans: sorted_mean(abs(&trans_axis)),
        re_mean: sorted_mean(re.clone()),
        te_mean: sorted_mean(te.clone()),
        re_median: median(re.clone()),
        te_median: median(te.clone()),
        re_mean_success: (successes > 0).then(|| sorted_mean(pick(&re))),
        te_mean_success: (successes > 0).then(|| sorted_mean(pick(&te))),
    })
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Two-column `metric,value` table; absent values are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let rows = [
            ("pairs", self.pairs.to_string()),
            ("recall_rot_deg", self.thresholds.rot_deg.to_string()),
            ("recall_trans", self.thresholds.trans.to_string()),
            ("recall", self.recall.to_string()),
            ("successes", self.successes.to_string()),
            ("rmse_rot_deg", self.rmse_rot_deg.to_string()),
            ("mae_rot_deg", self.mae_rot_deg.to_string()),
            ("rmse_trans", self.rmse_trans.to_string()),
            ("mae_trans", self.mae_trans.to_string()),
            ("re_mean", self.re_mean.to_string()),
            ("te_mean", self.te_mean.to_string()),
            ("re_median", self.re_median.to_string()),
            ("te_median", self.te_median.to_string()),
            ("re_mean_success", opt(self.re_mean_success)),
            ("te_mean_success", opt(self.te_mean_success)),
        ];
        let mut s = String::from("metric,value\n");
        for (k, v) in rows {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}

/// Registers every pair with the model, refining `cfg.iters` times.
pub fn run_model(model: &Model, pairs: &[RegistrationPair], cfg: &EvalConfig, exec: Exec) -> Result<Vec<RigidTransform>> {
    let opts = RegisterOptions {
        correction: cfg.correction,
        ..RegisterOptions::default()
    };
    exec.try_map(pairs.len(), |i| {
        let p = &pairs[i];
        let reg = |x: &crate::geom::PointCloud, y: &crate::geom::PointCloud| Ok(vrnet_register(model, x, y, &opts)?.transform);
        iterative_refine(reg, &p.source, &p.target, cfg.iters)
    })
}

pub fn run_icp(pairs: &[RegistrationPair], opts: &IcpOptions, exec: Exec) -> Result<Vec<RigidTransform>> {
    // Pairs run concurrently; each ICP uses sequential neighbor search.
    exec.try_map(pairs.len(), |i| Ok(icp_register(&pairs[i].source, &pairs[i].target, opts, Exec::Sequential)?.transform))
}

pub fn with_ground_truth(preds: &[RigidTransform], pairs: &[RegistrationPair]) -> Vec<(RigidTransform, RigidTransform)> {
    preds.iter().zip(pairs).map(|(p, q)| (*p, q.gt_transform)).collect()
}

/// Chamfer distances from `T_gt X` to the VCPs and to the RCPs of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChamferPair {
    pub vcp: f64,
    pub rcp: f64,
}

pub fn chamfer_consistency(model: &Model, pairs: &[RegistrationPair], exec: Exec) -> Result<Vec<ChamferPair>> {
    exec.try_map(pairs.len(), |i| {
        let p = &pairs[i];
        let r = vrnet_register(model, &p.source, &p.target, &RegisterOptions::default())?;
        let moved = p.gt_transform.apply(&p.source)?;
        Ok(ChamferPair {
            vcp: chamfer_with(&moved, &r.vcp, Exec::Sequential)?,
            rcp: chamfer_with(&moved, &r.rcp, Exec::Sequential)?,
        })
    })
}
