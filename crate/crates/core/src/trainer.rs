//! Two-stage training. Stage 1 fits the feature extractor and attention
//! under the matching loss; stage 2 freezes them and fits the correction
//! walk under the hybrid loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Tape, Tensor};
use crate::data::RegistrationPair;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::{self, LossWeights, DEFAULT_GROUPS};
use crate::model::{forward_matching, forward_pose, Model, RegisterOptions};

/// Parameter-name prefixes trained in stage 1. Everything else, i.e. the
/// correction walk, is left alone.
pub const STAGE1_PREFIXES: [&str; 2] = ["dgcnn.", "transformer."];
pub const STAGE2_PREFIXES: [&str; 1] = ["correction."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::One => &STAGE1_PREFIXES,
            Stage::Two => &STAGE2_PREFIXES,
        }
    }

    fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
}

impl StageConfig {
    pub fn stage1() -> Self {
        StageConfig {
            lr: 1e-3,
            steps: 500,
            batch: 4,
        }
    }

    pub fn stage2() -> Self {
        StageConfig { lr: 1e-4, ..Self::stage1() }
    }
}

/// A partial stage table; missing keys keep that stage's own defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StagePatch {
    lr: Option<f64>,
    steps: Option<usize>,
    batch: Option<usize>,
}

impl StagePatch {
    fn over(self, base: StageConfig) -> StageConfig {
        StageConfig {
            lr: self.lr.unwrap_or(base.lr),
            steps: self.steps.unwrap_or(base.steps),
            batch: self.batch.unwrap_or(base.batch),
        }
    }
}

fn de_stage1<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    Ok(StagePatch::deserialize(d)?.over(StageConfig::stage1()))
}

fn de_stage2<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    Ok(StagePatch::deserialize(d)?.over(StageConfig::stage2()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(deserialize_with = "de_stage1")]
    pub stage1: StageConfig,
    #[serde(deserialize_with = "de_stage2")]
    pub stage2: StageConfig,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Seeds batch order and consensus subsets.
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub l1_groups: usize,
    /// Consensus subset size; `max(3, n / 8)` when absent.
    pub l1_subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            l1_groups: DEFAULT_GROUPS,
            l1_subset: None,
        }
    }
}

impl TrainConfig {
    pub fn stage(&self, s: Stage) -> &StageConfig {
        match s {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("train.{name}.lr {} must be positive", s.lr)));
            }
            if s.batch == 0 {
                return Err(Error::Config(format!("train.{name}.batch must be >= 1")));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("adam constants out of range: {a:?}")));
        }
        if self.l1_groups == 0 {
            return Err(Error::Config("train.l1_groups must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// Where and how a training run reports.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoints and loss CSVs go here when set.
    pub out_dir: Option<PathBuf>,
    pub exec: Exec,
    /// Print a progress line to stderr every this many steps (0: silent).
    pub progress_every: usize,
}

/// Batch-mean losses of one step, before its update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    /// Stage 1: L0. Stage 2: the weighted hybrid sum.
    pub loss: f64,
    /// Stage 2 components.
    pub parts: Option<loss::LossParts>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub stage: Stage,
    pub steps: Vec<StepLoss>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        match self.stage {
            Stage::One => {
                s.push_str("step,l0\n");
                for r in &self.steps {
                    let _ = writeln!(s, "{},{}", r.step, r.loss);
                }
            }
            Stage::Two => {
                s.push_str("step,l1,l2,l3,l4,loss\n");
                for r in &self.steps {
                    let p = r.parts.unwrap_or_default();
                    let _ = writeln!(s, "{},{},{},{},{},{}", r.step, p.l1, p.l2, p.l3, p.l4, r.loss);
                }
            }
        }
        s
    }
}

/// Loss and trainable-parameter gradients of one pair.
#[derive(Debug, Clone)]
pub struct PairGrad {
    pub loss: f64,
    pub parts: Option<loss::LossParts>,
    pub grads: BTreeMap<String, Tensor>,
}

fn l1_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Bit 62 keeps these streams apart from the batch-order stream.
    rng.set_stream(1 << 62 | (step as u64) << 20 | slot as u64);
    rng
}

/// Forward and backward pass for one pair. `step` and `slot` select the
/// consensus-subset stream in stage 2.
pub fn pair_gradient(model: &Model, pair: &RegistrationPair, stage: Stage, cfg: &TrainConfig, step: usize, slot: usize) -> Result<PairGrad> {
    let mut tape = Tape::with_trainable_prefixes(stage.prefixes());
    let (x, y) = (&pair.source, &pair.target);
    let f = forward_matching(&mut tape, &model.params, &model.config, x, y)?;
    let (out, parts) = match stage {
        Stage::One => (loss::l0_node(&mut tape, f.matching, &pair.gt_matrix)?, None),
        Stage::Two => {
            let opts = RegisterOptions::default();
            let p = forward_pose(&mut tape, &model.params, &model.config, x, &f, &opts)?;
            let dt = p.offsets.expect("correction walk enabled");
            let size = cfg.l1_subset.unwrap_or_else(|| loss::default_subset_size(x.len()));
            let subsets = loss::sample_subsets(&x.points, cfg.l1_groups, size, &mut l1_rng(cfg.seed, step, slot))?;
            let l1 = loss::l1_node(&mut tape, &x.points, p.rcp, p.pose, &subsets, opts.vjp)?;
            let l2 = loss::l2_node(&mut tape, x, p.rcp)?;
            let l3 = loss::l3_node(&mut tape, &x.points, p.rcp, p.pose)?;
            let l4 = loss::l4_node(&mut tape, &pair.gt_transform, &x.points, f.vcp, dt)?;
            let parts = loss::LossParts {
                l1: tape.value(l1).item(),
                l2: tape.value(l2).item(),
                l3: tape.value(l3).item(),
                l4: tape.value(l4).item(),
            };
            (loss::hybrid_node(&mut tape, [l1, l2, l3, l4], &cfg.weights)?, Some(parts))
        }
    };
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(Error::NumericBlowup {
            stage: format!("stage{} loss", stage.number()),
        });
    }
    let grads = tape.param_grads(&tape.backward(out)?);
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::NumericBlowup {
            stage: format!("stage{} gradient", stage.number()),
        });
    }
    Ok(PairGrad { loss: value, parts, grads })
}

/// Mean loss and mean gradient over a batch. Pairs may be processed
/// concurrently; the sums are formed in batch order so the result does not
/// depend on the execution policy.
pub fn batch_gradient(
    model: &Model,
    batch: &[&RegistrationPair],
    stage: Stage,
    cfg: &TrainConfig,
    step: usize,
    exec: Exec,
) -> Result<PairGrad> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let per = exec.try_map(batch.len(), |b| pair_gradient(model, batch[b], stage, cfg, step, b))?;
    let inv = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut total = 0.0;
    let mut parts = per[0].parts.map(|_| loss::LossParts::default());
    for p in &per {
        total += p.loss;
        if let (Some(acc), Some(q)) = (parts.as_mut(), p.parts) {
            acc.l1 += q.l1;
            acc.l2 += q.l2;
            acc.l3 += q.l3;
            acc.l4 += q.l4;
        }
        for (name, g) in &p.grads {
            match grads.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    grads.insert(name.clone(), g.clone());
                }
            }
        }
    }
    for g in grads.values_mut() {
        *g = g.map(|v| v * inv);
    }
    Ok(PairGrad {
        loss: total * inv,
        parts: parts.map(|p| loss::LossParts {
            l1: p.l1 * inv,
            l2: p.l2 * inv,
            l3: p.l3 * inv,
            l4: p.l4 * inv,
        }),
        grads,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(dir: &Path, stage: Stage, step: Option<usize>) -> PathBuf {
    match step {
        Some(s) => dir.join(format!("stage{}_step{s:06}.ckpt", stage.number())),
        None => dir.join(format!("stage{}.ckpt", stage.number())),
    }
}

/// Batches visit the pairs in a fresh shuffled order each epoch.
struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64, stage: Stage) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 << 40 | stage.number() as u64);
        BatchOrder { rng, order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn run_stage(data: &[RegistrationPair], model: &mut Model, cfg: &TrainConfig, run: &RunOptions, stage: Stage) -> Result<LossCurve> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let sc = *cfg.stage(stage);
    let names: Vec<String> = stage.prefixes().iter().flat_map(|p| model.params.names_with_prefix(p)).collect();
    let mut order = BatchOrder::new(data.len(), cfg.seed, stage);
    let mut curve = LossCurve { stage, steps: Vec::with_capacity(sc.steps) };
    for step in 0..sc.steps {
        let idx = order.next(sc.batch.min(data.len()));
        let batch: Vec<&RegistrationPair> = idx.iter().map(|&i| &data[i]).collect();
        let g = batch_gradient(model, &batch, stage, cfg, step, run.exec)?;
        model.params.adam_step(&g.grads, &names, sc.lr, &cfg.adam)?;
        if model.params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::NumericBlowup {
                stage: format!("stage{} update", stage.number()),
            });
        }
        curve.steps.push(StepLoss {
            step,
            loss: g.loss,
            parts: g.parts,
        });
        if run.progress_every > 0 && (step % run.progress_every == 0 || step + 1 == sc.steps) {
            eprintln!("stage{} step {step:>5}  loss {:.6}", stage.number(), g.loss);
        }
        if let Some(dir) = &run.out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                write_file(&checkpoint_path(dir, stage, Some(step + 1)), &model.to_bytes()?)?;
            }
        }
    }
    match stage {
        Stage::One => model.stage1_complete = true,
        Stage::Two => model.stage2_complete = true,
    }
    if let Some(dir) = &run.out_dir {
        write_file(&checkpoint_path(dir, stage, None), &model.to_bytes()?)?;
        write_file(&dir.join(format!("stage{}_loss.csv", stage.number())), curve.to_csv().as_bytes())?;
    }
    Ok(curve)
}

/// Fits every extractor and attention parameter under L0. The correction
/// walk is not on the optimizer's list, so it is untouched. On a non-finite
/// loss the run stops; `model` and any checkpoints written so far hold the
/// last good state.
pub fn train_stage1(data: &[RegistrationPair], model: &mut Model, cfg: &TrainConfig, run: &RunOptions) -> Result<LossCurve> {
    run_stage(data, model, cfg, run, Stage::One)
}

/// Fits the correction walk under the hybrid loss with everything upstream
/// frozen. Requires a model that has completed stage 1.
pub fn train_stage2(data: &[RegistrationPair], model: &mut Model, cfg: &TrainConfig, run: &RunOptions) -> Result<LossCurve> {
    if !model.stage1_complete {
        return Err(Error::MissingCheckpoint("stage 2 needs a model that completed stage 1".into()));
    }
    run_stage(data, model, cfg, run, Stage::Two)
}

/// Mean L0 of the model over `data`.
pub fn mean_l0(model: &Model, data: &[RegistrationPair], exec: Exec) -> Result<f64> {
    let vals = exec.try_map(data.len(), |i| {
        let mut tape = Tape::with_trainable_prefixes(&[]);
        let f = forward_matching(&mut tape, &model.params, &model.config, &data[i].source, &data[i].target)?;
        let l = loss::l0_node(&mut tape, f.matching, &data[i].gt_matrix)?;
        Ok::<_, Error>(tape.value(l).item())
    })?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}
