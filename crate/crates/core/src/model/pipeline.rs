use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{correction_walk, dgcnn_forward, init_params, transformer_attend};
use crate::autodiff::{checkpoint, rows_to_points, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, RigidTransform};
use crate::matching::MatchMatrix;
use crate::procrustes::VjpOptions;

/// Parameters plus the configuration and training state they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stage1_complete: bool,
    pub stage2_complete: bool,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    stage1_complete: bool,
    stage2_complete: bool,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &mut rng)?;
        Ok(Model {
            config,
            params,
            stage1_complete: false,
            stage2_complete: false,
        })
    }

    fn meta(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(Meta {
            model: self.config.clone(),
            stage1_complete: self.stage1_complete,
            stage2_complete: self.stage2_complete,
        })?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.params, &self.meta()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, &self.meta()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        let meta: Meta = serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        meta.model.validate()?;
        Ok(Model {
            config: meta.model,
            params,
            stage1_complete: meta.stage1_complete,
            stage2_complete: meta.stage2_complete,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegisterOptions {
    /// Run the correction walk; when off, RCPs equal VCPs.
    pub correction: bool,
    pub vjp: VjpOptions,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        RegisterOptions {
            correction: true,
            vjp: VjpOptions::default(),
        }
    }
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub phi_x: Var,
    pub phi_y: Var,
    /// `[n_x, n_y]` matching matrix.
    pub matching: Var,
    /// VCPs `[n_x, 3]`.
    pub vcp: Var,
    pub phi_vcp: Var,
}

/// Correction-walk and pose nodes added on top of [`ForwardNodes`].
#[derive(Debug, Clone, Copy)]
pub struct PoseNodes {
    /// Offsets `[n_x, 3]`, absent when the walk is disabled.
    pub offsets: Option<Var>,
    /// RCPs `[n_x, 3]`.
    pub rcp: Var,
    /// `[4, 3]` solve output: rows 0..3 are `R`, row 3 is `t`.
    pub pose: Var,
}

pub(crate) fn cloud_tensor(p: &PointCloud) -> Tensor {
    Tensor::matrix(p.len(), 3, p.to_flat()).expect("n x 3")
}

fn check_finite(tape: &Tape, vars: &[Var], stage: &str) -> Result<()> {
    if vars.iter().all(|&v| tape.value(v).is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericBlowup { stage: stage.into() })
    }
}

/// Features, attention, soft matching and VCPs.
pub fn forward_matching(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, x: &PointCloud, y: &PointCloud) -> Result<ForwardNodes> {
    for (name, p) in [("source", x), ("target", y)] {
        if p.len() < 3 {
            return Err(Error::Arity {
                op: if name == "source" { "register source" } else { "register target" },
                expected: 3,
                got: p.len(),
            });
        }
        p.validate()?;
    }
    let xv = tape.constant(cloud_tensor(x));
    let yv = tape.constant(cloud_tensor(y));
    let feats = dgcnn_forward(tape, store, cfg, &[xv, yv])?;
    check_finite(tape, &feats, "dgcnn")?;
    let (phi_x, phi_y) = transformer_attend(tape, store, cfg, feats[0], feats[1])?;
    check_finite(tape, &[phi_x, phi_y], "transformer")?;
    let pyt = tape.transpose(phi_y)?;
    let s = tape.matmul(phi_x, pyt)?;
    let s = tape.scale(s, 1.0 / (cfg.embed_dim as f64).sqrt());
    let matching = tape.row_softmax(s);
    let vcp = tape.matmul(matching, yv)?;
    let phi_vcp = tape.matmul(matching, phi_y)?;
    check_finite(tape, &[matching, vcp, phi_vcp], "matching")?;
    Ok(ForwardNodes {
        phi_x,
        phi_y,
        matching,
        vcp,
        phi_vcp,
    })
}

/// Correction walk, RCPs and the closed-form pose.
pub fn forward_pose(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, x: &PointCloud, f: &ForwardNodes, opts: &RegisterOptions) -> Result<PoseNodes> {
    let (offsets, rcp) = if opts.correction {
        let seeds = tape.concat(&[f.phi_x, f.phi_vcp])?;
        let dt = correction_walk(tape, store, cfg, seeds)?;
        check_finite(tape, &[dt], "correction")?;
        let rcp = tape.add(f.vcp, dt)?;
        (Some(dt), rcp)
    } else {
        (None, f.vcp)
    };
    let pose = tape.rigid_solve(&x.points, rcp, opts.vjp)?;
    check_finite(tape, &[pose], "procrustes")?;
    Ok(PoseNodes { offsets, rcp, pose })
}

/// Output of [`vrnet_register`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub matching: MatchMatrix,
    pub vcp: PointCloud,
    pub rcp: PointCloud,
    /// Correction-walk offsets; all zero when the walk is disabled.
    pub offsets: Vec<Point3>,
    pub correction: bool,
}

pub(crate) fn pose_from_tensor(t: &Tensor) -> Result<RigidTransform> {
    let d = t.data();
    let rot: [f64; 9] = d[..9].try_into().expect("4 x 3");
    RigidTransform::from_row_major(&rot, [d[9], d[10], d[11]])
}

/// Full forward pass: features, attention, matching, VCPs, correction walk,
/// RCPs and the pose solve from `x` onto the RCPs.
pub fn vrnet_register(model: &Model, x: &PointCloud, y: &PointCloud, opts: &RegisterOptions) -> Result<RegistrationResult> {
    let mut tape = Tape::with_trainable_prefixes(&[]);
    let f = forward_matching(&mut tape, &model.params, &model.config, x, y)?;
    let p = forward_pose(&mut tape, &model.params, &model.config, x, &f, opts)?;
    let vcp = rows_to_points(tape.value(f.vcp));
    let offsets = match p.offsets {
        Some(v) => rows_to_points(tape.value(v)),
        None => vec![Point3::zeros(); x.len()],
    };
    Ok(RegistrationResult {
        transform: pose_from_tensor(tape.value(p.pose))?,
        matching: MatchMatrix::new(tape.value(f.matching).clone())?,
        vcp: PointCloud::from_points(vcp),
        rcp: PointCloud::from_points(rows_to_points(tape.value(p.rcp))),
        offsets,
        correction: opts.correction,
    })
}
