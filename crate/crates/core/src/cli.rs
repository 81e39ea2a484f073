//! Command-line front door. Every command resolves the experiment config
//! (file, then dot-path overrides such as `--train.stage2.lr 1e-4`, then the
//! dedicated flags), echoes it with the master seed, and writes a snapshot
//! into its run directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{self, generate, load_cloud, read_dataset, Dataset, Role, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{self, compute_metrics, with_ground_truth};
use crate::exec::{init_threads, Exec};
use crate::geom::{Point3, PointCloud, RigidTransform};
use crate::gradsuite;
use crate::icp::{icp_register, iterative_refine};
use crate::model::{vrnet_register, Model, RegisterOptions, RegistrationResult};
use crate::trainer::{train_stage1, train_stage2, RunOptions};

/// Environment variable naming the parent of default run directories.
pub const RUN_DIR_ENV: &str = "VRNET_RUN_DIR";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const SECTIONS: [&str; 4] = ["data", "model", "train", "eval"];

#[derive(Debug, Parser)]
#[command(
    name = "vrnet",
    about = "Point-cloud registration with rectified virtual corresponding points",
    after_help = "Any config field can be overridden with a dot-path flag, e.g. `--train.stage2.lr 1e-4`."
)]
struct Cli {
    /// TOML experiment config; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for dataset-level parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run directory; defaults to a fresh numbered directory under
    /// `$VRNET_RUN_DIR` (or `runs/`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train and test pair datasets.
    Gen(GenArgs),
    /// Train stage 1 (features and attention), stage 2 (correction walk), or both.
    Train(TrainArgs),
    /// Register one pair or every pair of a dataset with a trained model.
    Register(RegisterArgs),
    /// Register with the point-to-point ICP baseline.
    Icp(IcpArgs),
    /// Score model, ICP or saved predictions on a dataset.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Pair mode: CO, PV, RS or PV_RS.
    #[arg(long)]
    mode: Option<String>,
    /// Points kept per cloud by cropping or subsampling.
    #[arg(long)]
    keep: Option<usize>,
    /// Dataset regime: UPC, UC or ND.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    train_pairs: Option<usize>,
    #[arg(long)]
    test_pairs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageSel {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory, or a `gen` run directory (its `train/` is used).
    #[arg(long)]
    data: PathBuf,
    /// Which stage to run; `all` runs stage 1 then stage 2.
    #[arg(long, value_enum, default_value = "all")]
    stage: StageSel,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
}

/// One pair (`--source`/`--target`) or a dataset (`--data`).
#[derive(Debug, Args)]
struct Inputs {
    /// Source cloud, one `x y z` point per line.
    #[arg(long, requires = "target", conflicts_with = "data")]
    source: Option<PathBuf>,
    /// Target cloud in the same format.
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
    /// Dataset directory, or a `gen` run directory (its `test/` is used).
    #[arg(long, required_unless_present = "source")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    inputs: Inputs,
    /// Refinement rounds (overrides `eval.iters`).
    #[arg(long)]
    iters: Option<usize>,
    /// Skip the correction walk: RCPs equal VCPs.
    #[arg(long)]
    no_correction: bool,
}

#[derive(Debug, Args)]
struct IcpArgs {
    #[command(flatten)]
    inputs: Inputs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset directory, or a `gen` run directory (its `test/` is used).
    #[arg(long)]
    data: PathBuf,
    /// Score this checkpoint.
    #[arg(long, conflicts_with_all = ["icp", "predictions"])]
    model: Option<PathBuf>,
    /// Score the ICP baseline.
    #[arg(long, conflicts_with = "predictions")]
    icp: bool,
    /// A `predictions.json` written by `register` or `icp`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Refinement rounds for `--model`.
    #[arg(long)]
    iters: Option<usize>,
    /// Skip the correction walk for `--model`.
    #[arg(long)]
    no_correction: bool,
}

type Overrides = Vec<(String, String)>;

/// Splits `--a.b value` and `--a.b=value` overrides out of the arguments.
fn split_overrides(args: Vec<OsString>) -> std::result::Result<(Vec<OsString>, Overrides), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(s) = a.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match s.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (s, None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let section = key.split('.').next().unwrap_or_default();
        if !SECTIONS.contains(&section) {
            return Err(format!("unknown config section in `--{key}` (expected one of {SECTIONS:?})"));
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| format!("`--{key}` needs a value"))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli, &overrides) {
        Ok(code) => code,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    match e {
        Error::NumericBlowup { stage } => {
            eprintln!("numeric failure in stage `{stage}`");
            EXIT_NUMERIC
        }
        Error::Config(_) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        _ => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen(_) => "gen",
        Command::Train(_) => "train",
        Command::Register(_) => "register",
        Command::Icp(_) => "icp",
        Command::Eval(_) => "eval",
        Command::Gradcheck => "gradcheck",
    }
}

/// `--out`, else the first unused `<base>/<command>-NNN`.
fn run_dir(out: Option<PathBuf>, command: &str) -> Result<PathBuf> {
    if let Some(p) = out {
        return Ok(p);
    }
    let base = std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    (0..10_000)
        .map(|i| base.join(format!("{command}-{i:03}")))
        .find(|p| !p.exists())
        .ok_or_else(|| Error::Config(format!("no free run directory under {}", base.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn execute(cli: Cli, overrides: &[(String, String)]) -> Result<i32> {
    let mut ov = overrides.to_vec();
    if let Some(s) = cli.seed {
        ov.push(("seed".into(), s.to_string()));
    }
    if let Command::Gen(g) = &cli.command {
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                ov.push((k.into(), v));
            }
        };
        push("data.mode", g.mode.clone());
        push("data.keep_n", g.keep.map(|v| v.to_string()));
        push("data.split", g.split.clone());
        push("data.train_pairs", g.train_pairs.map(|v| v.to_string()));
        push("data.test_pairs", g.test_pairs.map(|v| v.to_string()));
    }
    if let Command::Register(RegisterArgs { iters, no_correction, .. }) | Command::Eval(EvalArgs { iters, no_correction, .. }) =
        &cli.command
    {
        if let Some(k) = iters {
            ov.push(("eval.iters".into(), k.to_string()));
        }
        if *no_correction {
            ov.push(("eval.correction".into(), "false".into()));
        }
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &ov)?;
    init_threads(cli.threads);
    let name = command_name(&cli.command);
    let dir = run_dir(cli.out, name)?;
    println!("# vrnet {name}  seed = {}  run_dir = {}", cfg.seed, dir.display());
    print!("{}", cfg.to_toml()?);
    println!("# end config");
    cfg.write_snapshot(&dir)?;
    match cli.command {
        Command::Gen(_) => cmd_gen(&cfg, &dir),
        Command::Train(a) => cmd_train(&cfg, &dir, &a),
        Command::Register(a) => cmd_register(&cfg, &dir, &a),
        Command::Icp(a) => cmd_icp(&cfg, &dir, &a),
        Command::Eval(a) => cmd_eval(&cfg, &dir, &a),
        Command::Gradcheck => cmd_gradcheck(&cfg, &dir),
    }
}

fn cmd_gen(cfg: &ExperimentConfig, dir: &Path) -> Result<i32> {
    for (role, count) in [(Role::Train, cfg.data.train_pairs), (Role::Test, cfg.data.test_pairs)] {
        let d = generate(&cfg.data, cfg.seed, role, count, Exec::Parallel)?;
        let sub = dir.join(role.as_str());
        data::write_dataset(&sub, &d)?;
        cfg.write_snapshot(&sub)?;
        let inliers: usize = d.manifest.pairs.iter().map(|e| e.inliers).sum();
        let points: usize = d.manifest.pairs.iter().map(|e| e.n_source).sum();
        println!(
            "{}: {} pairs, keep_n {}, inlier fraction {:.4}, shapes {:?}",
            role.as_str(),
            count,
            d.manifest.setting.keep_n,
            inliers as f64 / points.max(1) as f64,
            data::shape_counts(&d.manifest)
        );
    }
    Ok(0)
}

/// A dataset directory as given, or the `role` subdirectory of a `gen` run.
fn dataset_dir(p: &Path, role: Role) -> PathBuf {
    if p.join(MANIFEST_FILE).exists() {
        p.to_path_buf()
    } else {
        p.join(role.as_str())
    }
}

fn load_dataset(p: &Path, role: Role) -> Result<Dataset> {
    let d = dataset_dir(p, role);
    let data = read_dataset(&d)?;
    println!("dataset {} ({} pairs)", d.display(), data.pairs.len());
    Ok(data)
}

fn cmd_train(cfg: &ExperimentConfig, dir: &Path, a: &TrainArgs) -> Result<i32> {
    let data = load_dataset(&a.data, Role::Train)?;
    let mut model = match &a.init {
        Some(p) => Model::load(p)?,
        None => Model::new(cfg.model.clone(), cfg.seed)?,
    };
    let run = RunOptions {
        out_dir: Some(dir.to_path_buf()),
        exec: Exec::Parallel,
        progress_every: 50,
    };
    if a.stage != StageSel::Two {
        let c = train_stage1(&data.pairs, &mut model, &cfg.train, &run)?;
        println!("stage1: {} steps, final loss {:.6}", c.steps.len(), c.steps.last().map_or(f64::NAN, |s| s.loss));
    }
    if a.stage != StageSel::One {
        let c = train_stage2(&data.pairs, &mut model, &cfg.train, &run)?;
        println!("stage2: {} steps, final loss {:.6}", c.steps.len(), c.steps.last().map_or(f64::NAN, |s| s.loss));
    }
    let out = dir.join("model.ckpt");
    model.save(&out)?;
    println!("model written to {}", out.display());
    Ok(0)
}

/// JSON form of one registration. `vcp`, `rcp` and `offsets` come from the
/// final refinement round.
#[derive(Debug, Serialize)]
pub struct RegistrationJson {
    pub transform: RigidTransform,
    pub vcp: Vec<[f64; 3]>,
    pub rcp: Vec<[f64; 3]>,
    pub offsets: Vec<[f64; 3]>,
}

fn rows(p: &[Point3]) -> Vec<[f64; 3]> {
    p.iter().map(|v| [v.x, v.y, v.z]).collect()
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct PredictionFile {
    predictions: Vec<PredictionEntry>,
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct PredictionEntry {
    index: usize,
    transform: RigidTransform,
}

fn write_predictions(dir: &Path, preds: &[RigidTransform]) -> Result<()> {
    let file = PredictionFile {
        predictions: preds.iter().enumerate().map(|(index, t)| PredictionEntry { index, transform: *t }).collect(),
    };
    write_json(&dir.join("predictions.json"), &file)
}

fn read_predictions(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: PredictionFile = serde_json::from_str(&text)?;
    for (i, p) in f.predictions.iter().enumerate() {
        if p.index != i {
            return Err(Error::Config(format!("{}: prediction {i} has index {}", path.display(), p.index)));
        }
        p.transform.validate()?;
    }
    Ok(f.predictions.into_iter().map(|p| p.transform).collect())
}

fn write_metrics(dir: &Path, cfg: &ExperimentConfig, preds: &[RigidTransform], data: &Dataset) -> Result<()> {
    let report = compute_metrics(&with_ground_truth(preds, &data.pairs), &cfg.eval.recall)?;
    let json = report.to_json()?;
    write_text(&dir.join("metrics.json"), &json)?;
    write_text(&dir.join("metrics.csv"), &report.to_csv())?;
    print!("{json}");
    Ok(())
}

fn single_pair(inputs: &Inputs) -> Option<(&Path, &Path)> {
    Some((inputs.source.as_deref()?, inputs.target.as_deref()?))
}

fn register_refined(model: &Model, x: &PointCloud, y: &PointCloud, cfg: &ExperimentConfig) -> Result<(RigidTransform, RegistrationResult)> {
    let opts = RegisterOptions {
        correction: cfg.eval.correction,
        ..RegisterOptions::default()
    };
    let mut last = None;
    let total = iterative_refine(
        |a, b| {
            let r = vrnet_register(model, a, b, &opts)?;
            let t = r.transform;
            last = Some(r);
            Ok(t)
        },
        x,
        y,
        cfg.eval.iters,
    )?;
    Ok((total, last.expect("at least one round")))
}

fn cmd_register(cfg: &ExperimentConfig, dir: &Path, a: &RegisterArgs) -> Result<i32> {
    let model = Model::load(&a.model)?;
    if let Some((s, t)) = single_pair(&a.inputs) {
        let (x, y) = (load_cloud(s)?, load_cloud(t)?);
        let (total, r) = register_refined(&model, &x, &y, cfg)?;
        let out = RegistrationJson {
            transform: total,
            vcp: rows(&r.vcp.points),
            rcp: rows(&r.rcp.points),
            offsets: rows(&r.offsets),
        };
        write_json(&dir.join("registration.json"), &out)?;
        println!("transform: {}", serde_json::to_string(&total)?);
        return Ok(0);
    }
    let data = load_dataset(a.inputs.data.as_deref().expect("clap requires --data"), Role::Test)?;
    let preds = eval::run_model(&model, &data.pairs, &cfg.eval, Exec::Parallel)?;
    write_predictions(dir, &preds)?;
    write_metrics(dir, cfg, &preds, &data)?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct IcpJson {
    transform: RigidTransform,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn cmd_icp(cfg: &ExperimentConfig, dir: &Path, a: &IcpArgs) -> Result<i32> {
    if let Some((s, t)) = single_pair(&a.inputs) {
        let (x, y) = (load_cloud(s)?, load_cloud(t)?);
        let r = icp_register(&x, &y, &cfg.eval.icp, Exec::Parallel)?;
        let out = IcpJson {
            transform: r.transform,
            trace: r.trace,
            iterations: r.iterations,
            converged: r.converged,
        };
        write_json(&dir.join("icp.json"), &out)?;
        println!("transform: {}  iterations: {}", serde_json::to_string(&out.transform)?, out.iterations);
        return Ok(0);
    }
    let data = load_dataset(a.inputs.data.as_deref().expect("clap requires --data"), Role::Test)?;
    let preds = eval::run_icp(&data.pairs, &cfg.eval.icp, Exec::Parallel)?;
    write_predictions(dir, &preds)?;
    write_metrics(dir, cfg, &preds, &data)?;
    Ok(0)
}

fn cmd_eval(cfg: &ExperimentConfig, dir: &Path, a: &EvalArgs) -> Result<i32> {
    let data = load_dataset(&a.data, Role::Test)?;
    let preds = match (&a.model, a.icp, &a.predictions) {
        (Some(m), _, _) => eval::run_model(&Model::load(m)?, &data.pairs, &cfg.eval, Exec::Parallel)?,
        (None, true, _) => eval::run_icp(&data.pairs, &cfg.eval.icp, Exec::Parallel)?,
        (None, false, Some(p)) => read_predictions(p)?,
        (None, false, None) => return Err(Error::Config("eval needs --model, --icp or --predictions".into())),
    };
    if preds.len() != data.pairs.len() {
        return Err(Error::Config(format!("{} predictions for {} pairs", preds.len(), data.pairs.len())));
    }
    write_predictions(dir, &preds)?;
    write_metrics(dir, cfg, &preds, &data)?;
    Ok(0)
}

fn cmd_gradcheck(cfg: &ExperimentConfig, dir: &Path) -> Result<i32> {
    let entries = gradsuite::run_suite(cfg.seed)?;
    let mut worst: f64 = 0.0;
    for e in &entries {
        worst = worst.max(e.max_rel_error);
        println!(
            "{:<28} {:>4}  max rel err {:.3e}  (tol {:.0e}, {} entries)",
            e.name,
            if e.passed() { "ok" } else { "FAIL" },
            e.max_rel_error,
            e.tolerance,
            e.checked
        );
    }
    write_json(&dir.join("gradcheck.json"), &entries)?;
    let failed = entries.iter().filter(|e| !e.passed()).count();
    println!("max rel err {worst:.3e}; {failed} of {} checks failed", entries.len());
    Ok(if failed == 0 { 0 } else { EXIT_FAILURE })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) =
            split_overrides(os(&["vrnet", "--train.stage2.lr", "1e-4", "eval", "--data.mode=PV", "--data", "d"])).unwrap();
        assert_eq!(rest, os(&["vrnet", "eval", "--data", "d"]));
        assert_eq!(
            ov,
            vec![("train.stage2.lr".to_string(), "1e-4".to_string()), ("data.mode".to_string(), "PV".to_string())]
        );
        assert!(split_overrides(os(&["vrnet", "--bogus.x", "1"])).is_err());
        assert!(split_overrides(os(&["vrnet", "--train.seed"])).is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["vrnet", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["vrnet", "gradcheck", "--nope"]), EXIT_USAGE);
        assert_eq!(run(["vrnet", "gradcheck", "--model.nope", "1"]), EXIT_USAGE);
    }

    #[test]
    fn dataset_dir_resolution() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(dataset_dir(dir.path(), Role::Test), dir.path().join("test"));
        std::fs::write(dir.path().join(MANIFEST_FILE), "{}").unwrap();
        assert_eq!(dataset_dir(dir.path(), Role::Test), dir.path());
    }
}
