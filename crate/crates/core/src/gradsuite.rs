//! The finite-difference gradient suite: every tape primitive, each learned
//! block, the rigid-solve backward, and every loss differentiated through the
//! whole pipeline on small pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, grad_check_params, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::geom::{random_rigid, Point3, PointCloud};
use crate::loss::{self, LossWeights};
use crate::matching::GtMatching;
use crate::model::{
    correction_walk, edge_conv, forward_matching, forward_pose, init_params, transformer_attend, Model, ModelConfig,
    RegisterOptions,
};
use crate::procrustes::VjpOptions;

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Probes re-measured with a smaller step because they straddled a kink.
    pub kinks: usize,
    /// Worst input (leaf or parameter name) and entry index.
    pub worst: Option<(String, usize)>,
}

impl SuiteEntry {
    fn new(name: impl Into<String>, r: GradCheckReport, tolerance: f64) -> Self {
        SuiteEntry {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            tolerance,
            checked: r.checked,
            kinks: r.kinks,
            worst: r.worst,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Entries in `[-2, 2]` with magnitude at least 0.05, so relu and max kinks
/// stay out of reach of the probe.
fn away_from_kinks(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::from_points(
        (0..n)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect(),
    )
}

/// Fresh models have a zero final correction layer; give every parameter
/// under `prefix` generic values so no gradient vanishes by construction.
fn randomize(store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) {
    for name in store.names_with_prefix(prefix) {
        for v in store.get_mut(&name).expect("listed").data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

pub fn primitives(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = away_from_kinks(&mut rng, &[6, 4]);
    let b = away_from_kinks(&mut rng, &[6, 4]);
    let w = uniform(&mut rng, &[4, 3], -2.0, 2.0);
    let row = away_from_kinks(&mut rng, &[1, 4]);
    let cases: Vec<(&str, Objective)> = vec![
        ("matmul", Box::new(|t, v| { let p = t.matmul(v[0], v[2])?; let s = t.square(p); Ok(t.sum(s)) })),
        ("add", Box::new(|t, v| { let p = t.add(v[0], v[1])?; let s = t.square(p); Ok(t.sum(s)) })),
        ("sub", Box::new(|t, v| { let p = t.sub(v[0], v[1])?; let s = t.square(p); Ok(t.mean(s)) })),
        ("mul", Box::new(|t, v| { let p = t.mul(v[0], v[1])?; Ok(t.sum(p)) })),
        ("add_row", Box::new(|t, v| { let p = t.add_row(v[0], v[3])?; let s = t.square(p); Ok(t.sum(s)) })),
        ("mul_row", Box::new(|t, v| { let p = t.mul_row(v[0], v[3])?; let s = t.square(p); Ok(t.sum(s)) })),
        ("scale", Box::new(|t, v| { let p = t.scale(v[0], -1.7); let s = t.square(p); Ok(t.sum(s)) })),
        ("concat", Box::new(|t, v| { let p = t.concat(&[v[0], v[1], v[0]])?; let q = t.square(p); let w = t.mul(q, p)?; Ok(t.sum(w)) })),
        ("vstack", Box::new(|t, v| { let p = t.vstack(&[v[0], v[1]])?; let q = t.square(p); let w = t.matmul(q, v[2])?; Ok(t.sum(w)) })),
        ("relu", Box::new(|t, v| { let p = t.relu(v[0]); let s = t.mul(p, v[1])?; Ok(t.sum(s)) })),
        ("row_softmax", Box::new(|t, v| { let p = t.row_softmax(v[0]); let s = t.mul(p, v[1])?; Ok(t.sum(s)) })),
        ("max_over_groups", Box::new(|t, v| { let p = t.max_over_groups(v[0], 3)?; let s = t.square(p); Ok(t.sum(s)) })),
        ("gather_rows", Box::new(|t, v| { let p = t.gather_rows(v[0], &[5, 0, 0, 2])?; let s = t.square(p); Ok(t.sum(s)) })),
        ("slice_rows", Box::new(|t, v| { let p = t.slice_rows(v[0], 2, 3)?; let s = t.square(p); Ok(t.sum(s)) })),
        ("normalize_columns", Box::new(|t, v| { let p = t.normalize_columns(v[0], 1e-5); let s = t.mul(p, v[1])?; Ok(t.sum(s)) })),
        ("sum_last", Box::new(|t, v| { let p = t.sum_last(v[0]); let s = t.square(p); Ok(t.sum(s)) })),
        ("sqrt", Box::new(|t, v| { let p = t.square(v[0]); let q = t.sqrt(p)?; let s = t.mul(q, v[1])?; Ok(t.sum(s)) })),
        ("transpose", Box::new(|t, v| { let p = t.transpose(v[0])?; let q = t.matmul(p, v[1])?; let s = t.square(q); Ok(t.sum(s)) })),
        ("reshape", Box::new(|t, v| { let p = t.reshape(v[0], &[2, 3, 4])?; let q = t.max_over_groups(p, 3)?; let s = t.square(q); Ok(t.sum(s)) })),
    ];
    let leaves = [a, b, w, row];
    cases
        .into_iter()
        .map(|(name, f)| Ok(SuiteEntry::new(format!("primitive/{name}"), grad_check(f, &leaves, STEP)?, PRIMITIVE_TOL)))
        .collect()
}

/// Backward of the closed-form rigid solve with respect to the targets.
pub fn rigid_solve(seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = cloud(&mut rng, 8).points;
    let y = uniform(&mut rng, &[8, 3], -1.0, 1.0);
    let weights = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    let r = grad_check(
        |t, v| {
            let s = t.rigid_solve(&src, v[0], VjpOptions::default())?;
            let p = t.mul(s, v[1])?;
            Ok(t.sum(p))
        },
        &[y, weights],
        STEP,
    )?;
    Ok(SuiteEntry::new("solve_rigid", r, COMPOSITE_TOL))
}

fn weighted_sum(t: &mut Tape, v: Var, w: &Tensor) -> Result<Var> {
    let c = t.constant(w.clone());
    let m = t.mul(v, c)?;
    Ok(t.sum(m))
}

pub fn edge_conv_entries(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::desk();
    let mut store = init_params(&cfg, &mut rng)?;
    randomize(&mut store, "dgcnn.layer0.norm", &mut rng);
    let p = crate::model::cloud_tensor(&cloud(&mut rng, 16));
    let probe = uniform(&mut rng, &[16, cfg.filters[0]], -1.0, 1.0);
    let objective = |t: &mut Tape, f: Var, s: &ParamStore| {
        let out = edge_conv(t, s, &cfg, 0, &[f])?[0];
        weighted_sum(t, out, &probe)
    };
    let names = store.names_with_prefix("dgcnn.layer0");
    let params = grad_check_params(
        |t, s| {
            let f = t.constant(p.clone());
            objective(t, f, s)
        },
        &store,
        &names,
        STEP,
        usize::MAX,
    )?;
    let input = grad_check(|t, v| objective(t, v[0], &store), std::slice::from_ref(&p), STEP)?;
    Ok(vec![
        SuiteEntry::new("edge_conv/params", params, COMPOSITE_TOL),
        SuiteEntry::new("edge_conv/input", input, COMPOSITE_TOL),
    ])
}

pub fn transformer_entries(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        filters: vec![8, 8],
        k: 4,
        heads: 2,
        correction: vec![8, 3],
        embed_dim: 8,
        ..ModelConfig::desk()
    };
    let store = init_params(&cfg, &mut rng)?;
    let (fx, fy) = (uniform(&mut rng, &[6, 8], -1.0, 1.0), uniform(&mut rng, &[5, 8], -1.0, 1.0));
    let (wx, wy) = (uniform(&mut rng, &[6, 8], -1.0, 1.0), uniform(&mut rng, &[5, 8], -1.0, 1.0));
    let objective = |t: &mut Tape, a: Var, b: Var, s: &ParamStore| {
        let (px, py) = transformer_attend(t, s, &cfg, a, b)?;
        let sx = weighted_sum(t, px, &wx)?;
        let sy = weighted_sum(t, py, &wy)?;
        t.add(sx, sy)
    };
    let names = store.names_with_prefix("transformer.");
    let params = grad_check_params(
        |t, s| {
            let (a, b) = (t.constant(fx.clone()), t.constant(fy.clone()));
            objective(t, a, b, s)
        },
        &store,
        &names,
        STEP,
        usize::MAX,
    )?;
    let inputs = grad_check(|t, v| objective(t, v[0], v[1], &store), &[fx.clone(), fy.clone()], STEP)?;
    Ok(vec![
        SuiteEntry::new("transformer/params", params, COMPOSITE_TOL),
        SuiteEntry::new("transformer/inputs", inputs, COMPOSITE_TOL),
    ])
}

pub fn correction_entry(seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        correction: vec![16, 3],
        ..ModelConfig::desk()
    };
    let mut store = init_params(&cfg, &mut rng)?;
    randomize(&mut store, "correction.", &mut rng);
    let seeds = uniform(&mut rng, &[10, 2 * cfg.embed_dim], -1.0, 1.0);
    let target = uniform(&mut rng, &[10, 3], -1.0, 1.0);
    let names = store.names_with_prefix("correction.");
    let r = grad_check_params(
        |t, s| {
            let e = t.constant(seeds.clone());
            let dt = correction_walk(t, s, &cfg, e)?;
            let g = t.constant(target.clone());
            loss::rmse_node(t, dt, g)
        },
        &store,
        &names,
        STEP,
        usize::MAX,
    )?;
    Ok(SuiteEntry::new("correction_walk", r, COMPOSITE_TOL))
}

pub const LOSS_NAMES: [&str; 6] = ["l0", "l1", "l2", "l3", "l4", "hybrid"];

/// Losses unchanged by translating every RCP by the same vector.
pub const SHIFT_INVARIANT: [usize; 2] = [1, 2];

/// A desk model with a randomized correction walk and an 8-point pair.
pub struct EndToEnd {
    pub model: Model,
    pub x: PointCloud,
    pub y: PointCloud,
    pub t_gt: crate::geom::RigidTransform,
    pub gt: GtMatching,
    pub subsets: Vec<Vec<usize>>,
}

impl EndToEnd {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::new(ModelConfig::desk(), seed)?;
        randomize(&mut model.params, "correction.", &mut rng);
        let x = cloud(&mut rng, 8);
        let t_gt = random_rigid(&mut rng, 45.0, 0.5);
        let y = t_gt.apply(&x)?;
        let gt = GtMatching {
            partner: (0..8).map(Some).collect(),
            n_y: 8,
        };
        let subsets = loss::sample_subsets(&x.points, 10, 3, &mut rng)?;
        Ok(EndToEnd { model, x, y, t_gt, gt, subsets })
    }

    /// Builds loss `which` (index into [`LOSS_NAMES`]) on a fresh tape.
    pub fn build(&self, which: usize, t: &mut Tape, s: &ParamStore) -> Result<Var> {
        let cfg = &self.model.config;
        let f = forward_matching(t, s, cfg, &self.x, &self.y)?;
        let l0 = loss::l0_node(t, f.matching, &self.gt)?;
        if which == 0 {
            return Ok(l0);
        }
        let p = forward_pose(t, s, cfg, &self.x, &f, &RegisterOptions::default())?;
        let dt = p.offsets.expect("correction enabled");
        let l1 = loss::l1_node(t, &self.x.points, p.rcp, p.pose, &self.subsets, VjpOptions::default())?;
        let l2 = loss::l2_node(t, &self.x, p.rcp)?;
        let l3 = loss::l3_node(t, &self.x.points, p.rcp, p.pose)?;
        let l4 = loss::l4_node(t, &self.t_gt, &self.x.points, f.vcp, dt)?;
        Ok(match which {
            1 => l1,
            2 => l2,
            3 => l3,
            4 => l4,
            _ => loss::hybrid_node(t, [l1, l2, l3, l4], &LossWeights::default())?,
        })
    }

    /// Name of the final correction bias. A uniform shift of every RCP
    /// leaves the consensus loss (subset poses and the full pose move
    /// together) and the edge loss (pairwise differences) exactly unchanged,
    /// so its gradient there is identically zero.
    pub fn last_correction_bias(&self) -> String {
        format!("correction.layer{}.bias", self.model.config.correction.len() - 1)
    }

    pub fn check(&self, which: usize, per_param: usize) -> Result<SuiteEntry> {
        let names = self.model.params.names();
        let r = grad_check_params(|t, s| self.build(which, t, s), &self.model.params, &names, STEP, per_param)?;
        Ok(SuiteEntry::new(format!("end_to_end/{}", LOSS_NAMES[which]), r, COMPOSITE_TOL))
    }
}

/// Runs the whole suite; every entry must pass for the build to be trusted.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = primitives(seed)?;
    out.push(rigid_solve(seed)?);
    out.extend(edge_conv_entries(seed)?);
    out.extend(transformer_entries(seed)?);
    out.push(correction_entry(seed)?);
    let e2e = EndToEnd::new(seed)?;
    for which in 0..LOSS_NAMES.len() {
        out.push(e2e.check(which, 3)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for e in primitives(2).unwrap() {
            assert!(e.passed(), "{e:?}");
        }
        assert!(rigid_solve(3).unwrap().passed());
    }

    #[test]
    fn blocks_pass() {
        for e in edge_conv_entries(9).unwrap().into_iter().chain(transformer_entries(10).unwrap()) {
            assert!(e.passed(), "{e:?}");
        }
        assert!(correction_entry(8).unwrap().passed());
    }

    #[test]
    fn end_to_end_losses_pass() {
        let e2e = EndToEnd::new(14).unwrap();
        for which in 0..LOSS_NAMES.len() {
            let e = e2e.check(which, 3).unwrap();
            assert!(e.passed(), "{e:?}");
        }
    }

    #[test]
    fn uniform_rcp_shift_is_invisible_to_l1_and_l2() {
        let e2e = EndToEnd::new(14).unwrap();
        let bias = e2e.last_correction_bias();
        let mut shifted = e2e.model.params.clone();
        for v in shifted.get_mut(&bias).unwrap().data_mut() {
            *v += 0.01;
        }
        for which in SHIFT_INVARIANT {
            let mut tape = Tape::new();
            let l = e2e.build(which, &mut tape, &e2e.model.params).unwrap();
            let g = tape.param_grads(&tape.backward(l).unwrap());
            assert!(g[&bias].data().iter().all(|v| v.abs() < 1e-12), "{which}: {:?}", g[&bias]);
            let eval = |s: &ParamStore| {
                let mut t = Tape::new();
                let v = e2e.build(which, &mut t, s).unwrap();
                t.value(v).item()
            };
            assert!((eval(&shifted) - eval(&e2e.model.params)).abs() < 1e-12);
        }
    }
}
