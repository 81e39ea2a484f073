//! Source/target pair construction: subset modes, viewpoint crops, clipped
//! Gaussian noise and shuffling.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{random_rigid, Point3, PointCloud, RigidTransform};
use crate::matching::{gt_matching_matrix, GtMatching};

/// Viewpoint distance from the cloud centroid for partial-view crops.
pub const VIEW_DISTANCE: f64 = 3.0;
pub const TAU_GT_NOISY: f64 = 0.05;
pub const TAU_GT_CLEAN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[allow(non_camel_case_types)]
pub enum PairMode {
    /// Consistent: both clouds hold every base point.
    #[default]
    CO,
    /// Partial view: nearest `keep_n` points to a viewpoint.
    PV,
    /// Random sample: independent `keep_n` subsets.
    RS,
    /// Random `pv_rs_intermediate` subset, then a partial-view crop.
    #[serde(alias = "PV+RS")]
    PV_RS,
}

impl FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CO" => Ok(PairMode::CO),
            "PV" => Ok(PairMode::PV),
            "RS" => Ok(PairMode::RS),
            "PV_RS" | "PV+RS" => Ok(PairMode::PV_RS),
            _ => Err(Error::Config(format!("unknown pair mode `{s}` (CO, PV, RS, PV_RS)"))),
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PairMode::CO => "CO",
            PairMode::PV => "PV",
            PairMode::RS => "RS",
            PairMode::PV_RS => "PV_RS",
        };
        f.write_str(s)
    }
}

/// Dataset regime: unseen point clouds, unseen categories, or noisy data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Split {
    #[default]
    UPC,
    UC,
    ND,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "UPC" => Ok(Split::UPC),
            "UC" => Ok(Split::UC),
            "ND" => Ok(Split::ND),
            _ => Err(Error::Config(format!("unknown split `{s}` (UPC, UC, ND)"))),
        }
    }
}

/// Where the target's partial-view viewpoint sits relative to the source's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ViewpointMode {
    /// The same point in space crops both clouds.
    #[default]
    Same,
    /// The target viewpoint is the source viewpoint reflected through the
    /// source centroid.
    Symmetric,
    /// A fresh direction for the target.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation per coordinate.
    pub sigma: f64,
    /// Samples are clamped to `[-clip, clip]`.
    pub clip: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { sigma: 0.01, clip: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSetting {
    pub mode: PairMode,
    pub base_n: usize,
    pub keep_n: usize,
    pub pv_rs_intermediate: usize,
    pub noise: Option<NoiseSpec>,
    pub viewpoint: ViewpointMode,
    pub rot_range_deg: f64,
    pub trans_range: f64,
    /// Ground-truth matching threshold; defaults by noise when absent.
    pub tau_gt: Option<f64>,
}

impl Default for PairSetting {
    fn default() -> Self {
        PairSetting {
            mode: PairMode::CO,
            base_n: 1024,
            keep_n: 768,
            pv_rs_intermediate: 896,
            noise: None,
            viewpoint: ViewpointMode::Same,
            rot_range_deg: 45.0,
            trans_range: 0.5,
            tau_gt: None,
        }
    }
}

impl PairSetting {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_n < 3 {
            return bad(format!("base_n {} must be at least 3", self.base_n));
        }
        if self.mode != PairMode::CO && !(3..=self.base_n).contains(&self.keep_n) {
            return bad(format!("keep_n {} must lie in [3, base_n {}]", self.keep_n, self.base_n));
        }
        if self.mode == PairMode::PV_RS && !(self.keep_n..=self.base_n).contains(&self.pv_rs_intermediate) {
            return bad(format!(
                "pv_rs_intermediate {} must lie between keep_n {} and base_n {}",
                self.pv_rs_intermediate, self.keep_n, self.base_n
            ));
        }
        if let Some(n) = &self.noise {
            if !(n.sigma >= 0.0 && n.sigma.is_finite() && n.clip > 0.0 && n.clip.is_finite()) {
                return bad(format!("noise sigma {} / clip {} out of range", n.sigma, n.clip));
            }
        }
        if !(self.rot_range_deg >= 0.0 && self.trans_range >= 0.0) {
            return bad("pose ranges must be nonnegative".into());
        }
        if let Some(t) = self.tau_gt {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("tau_gt {t} must be positive"));
            }
        }
        Ok(())
    }

    /// Noise in force for `split`; ND turns on the default noise.
    pub fn effective_noise(&self, split: Split) -> Option<NoiseSpec> {
        match (self.noise, split) {
            (Some(n), _) => Some(n),
            (None, Split::ND) => Some(NoiseSpec::default()),
            (None, _) => None,
        }
    }

    pub fn effective_tau(&self, split: Split) -> f64 {
        self.tau_gt.unwrap_or(if self.effective_noise(split).is_some() {
            TAU_GT_NOISY
        } else {
            TAU_GT_CLEAN
        })
    }
}

/// Source, target, their true pose, and the binary ground-truth matching.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationPair {
    /// Carries `gt_partner` equal to `gt_matrix.partner`.
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt_transform: RigidTransform,
    pub gt_matrix: GtMatching,
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = Point3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        if v.norm() > 1e-12 {
            return v.normalize();
        }
    }
}

/// The `keep` candidates nearest to `view`, ties broken by index.
pub fn crop_nearest(points: &[Point3], candidates: &[usize], view: &Point3, keep: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = candidates.iter().map(|&i| ((points[i] - view).norm_squared(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(keep);
    order.into_iter().map(|(_, i)| i).collect()
}

/// Adds clamped Gaussian noise per coordinate and returns the noise added.
pub fn add_clipped_noise<R: Rng + ?Sized>(points: &mut [Point3], spec: &NoiseSpec, rng: &mut R) -> Result<Vec<Point3>> {
    let normal = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(format!("noise: {e}")))?;
    Ok(points
        .iter_mut()
        .map(|p| {
            let mut draw = || normal.sample(rng).clamp(-spec.clip, spec.clip);
            let n = Point3::new(draw(), draw(), draw());
            *p += n;
            n
        })
        .collect())
}

fn random_subset<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Builds one training or test pair from a base cloud. The target is the
/// posed base; subsets, crops and noise are drawn per cloud, and both clouds
/// are shuffled independently.
pub fn make_pair<R: Rng + ?Sized>(base: &PointCloud, setting: &PairSetting, split: Split, rng: &mut R) -> Result<RegistrationPair> {
    setting.validate()?;
    base.validate()?;
    let n = base.len();
    let needed = match setting.mode {
        PairMode::CO => 3,
        PairMode::PV | PairMode::RS => setting.keep_n,
        PairMode::PV_RS => setting.pv_rs_intermediate,
    };
    if needed > n {
        return Err(Error::InvalidInput(format!("{} pair needs {needed} base points, got {n}", setting.mode)));
    }
    let t_gt = random_rigid(rng, setting.rot_range_deg, setting.trans_range);
    let src_full = base.points.clone();
    let tgt_full: Vec<Point3> = src_full.iter().map(|p| t_gt.apply_point(p)).collect();
    let all: Vec<usize> = (0..n).collect();

    let (src_idx, tgt_idx) = match setting.mode {
        PairMode::CO => (all.clone(), all),
        PairMode::RS => (random_subset(n, setting.keep_n, rng), random_subset(n, setting.keep_n, rng)),
        PairMode::PV | PairMode::PV_RS => {
            let (src_pool, tgt_pool) = if setting.mode == PairMode::PV_RS {
                let m = setting.pv_rs_intermediate;
                (random_subset(n, m, rng), random_subset(n, m, rng))
            } else {
                (all.clone(), all)
            };
            let c = base.centroid();
            let u = unit_vector(rng);
            let view_s = c + u * VIEW_DISTANCE;
            let view_t = match setting.viewpoint {
                ViewpointMode::Same => view_s,
                ViewpointMode::Symmetric => c - u * VIEW_DISTANCE,
                ViewpointMode::Independent => t_gt.apply_point(&c) + unit_vector(rng) * VIEW_DISTANCE,
            };
            (
                crop_nearest(&src_full, &src_pool, &view_s, setting.keep_n),
                crop_nearest(&tgt_full, &tgt_pool, &view_t, setting.keep_n),
            )
        }
    };

    let mut src: Vec<Point3> = src_idx.iter().map(|&i| src_full[i]).collect();
    let mut tgt: Vec<Point3> = tgt_idx.iter().map(|&i| tgt_full[i]).collect();
    if let Some(spec) = setting.effective_noise(split) {
        add_clipped_noise(&mut src, &spec, rng)?;
        add_clipped_noise(&mut tgt, &spec, rng)?;
    }
    src.shuffle(rng);
    tgt.shuffle(rng);

    let source = PointCloud::new(src)?;
    let target = PointCloud::new(tgt)?;
    let gt = gt_matching_matrix(&source, &target, &t_gt, setting.effective_tau(split))?;
    Ok(RegistrationPair {
        source: source.with_partners(gt.partner.clone())?,
        target,
        gt_transform: t_gt,
        gt_matrix: gt,
    })
}
