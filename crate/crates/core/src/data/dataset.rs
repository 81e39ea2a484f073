//! Seeded pair datasets and their on-disk layout: one directory per pair
//! with XYZ clouds and a partner list, plus a JSON manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mesh::{load_mesh, parse_off, parse_ply, Mesh};
use super::pairs::{make_pair, NoiseSpec, PairMode, PairSetting, RegistrationPair, Split, ViewpointMode};
use super::shapes::{sample_mesh, sample_shape, ShapeKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geom::{Point3, PointCloud, RigidTransform};
use crate::matching::GtMatching;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
/// Test pairs draw from streams above this offset so they never share a
/// stream with training pairs of the same seed.
pub const TEST_STREAM_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }

    pub fn stream(self, index: usize) -> u64 {
        match self {
            Role::Train => index as u64,
            Role::Test => TEST_STREAM_OFFSET + index as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mode: PairMode,
    pub split: Split,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub base_n: usize,
    pub keep_n: usize,
    pub pv_rs_intermediate: usize,
    pub noise: Option<NoiseSpec>,
    pub viewpoint: ViewpointMode,
    pub rot_range_deg: f64,
    pub trans_range: f64,
    pub tau_gt: Option<f64>,
    /// Shape kinds for training, and for testing outside the UC split.
    pub shapes: Vec<String>,
    /// Shape kinds for testing under UC; must not overlap `shapes`.
    pub test_shapes: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = PairSetting::default();
        DataConfig {
            mode: s.mode,
            split: Split::UPC,
            train_pairs: 32,
            test_pairs: 16,
            base_n: s.base_n,
            keep_n: s.keep_n,
            pv_rs_intermediate: s.pv_rs_intermediate,
            noise: s.noise,
            viewpoint: s.viewpoint,
            rot_range_deg: s.rot_range_deg,
            trans_range: s.trans_range,
            tau_gt: s.tau_gt,
            shapes: vec!["gaussian-blobs".into(), "box-surface".into()],
            test_shapes: vec!["torus".into()],
        }
    }
}

impl DataConfig {
    pub fn setting(&self) -> PairSetting {
        PairSetting {
            mode: self.mode,
            base_n: self.base_n,
            keep_n: self.keep_n,
            pv_rs_intermediate: self.pv_rs_intermediate,
            noise: self.noise,
            viewpoint: self.viewpoint,
            rot_range_deg: self.rot_range_deg,
            trans_range: self.trans_range,
            tau_gt: self.tau_gt,
        }
    }

    pub fn shapes_for(&self, role: Role) -> &[String] {
        match (role, self.split) {
            (Role::Test, Split::UC) => &self.test_shapes,
            _ => &self.shapes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.setting().validate()?;
        for s in self.shapes.iter().chain(&self.test_shapes) {
            s.parse::<ShapeKind>()?;
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("data.shapes is empty".into()));
        }
        if self.split == Split::UC {
            if self.test_shapes.is_empty() {
                return Err(Error::Config("UC split needs data.test_shapes".into()));
            }
            if let Some(s) = self.test_shapes.iter().find(|s| self.shapes.contains(s)) {
                return Err(Error::Config(format!("UC split: `{s}` is both a train and a test shape")));
            }
        }
        Ok(())
    }
}

/// Shape kinds with meshes loaded once up front.
struct ShapeBank {
    kinds: Vec<(String, ShapeKind, Option<Mesh>)>,
}

impl ShapeBank {
    fn new(names: &[String]) -> Result<Self> {
        let kinds = names
            .iter()
            .map(|n| {
                let kind: ShapeKind = n.parse()?;
                let mesh = match &kind {
                    ShapeKind::FromMesh(p) => Some(load_mesh(p)?),
                    _ => None,
                };
                Ok((n.clone(), kind, mesh))
            })
            .collect::<Result<_>>()?;
        Ok(ShapeBank { kinds })
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(String, PointCloud)> {
        let (name, kind, mesh) = &self.kinds[rng.random_range(0..self.kinds.len())];
        let cloud = match mesh {
            Some(m) => sample_mesh(m, n, rng)?,
            None => sample_shape(kind, n, rng)?,
        };
        Ok((name.clone(), cloud))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub index: usize,
    pub stream: u64,
    pub shape: String,
    pub gt_transform: RigidTransform,
    pub n_source: usize,
    pub n_target: usize,
    pub inliers: usize,
    pub source: String,
    pub target: String,
    pub partners: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub role: Role,
    pub seed: u64,
    pub split: Split,
    pub setting: PairSetting,
    pub shapes: Vec<String>,
    pub pairs: Vec<PairEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub pairs: Vec<RegistrationPair>,
}

/// Generates `count` pairs. Pair `i` owns the ChaCha8 stream
/// `role.stream(i)` of `seed`, so any subset can be regenerated alone and the
/// result does not depend on the execution policy.
pub fn generate(cfg: &DataConfig, seed: u64, role: Role, count: usize, exec: Exec) -> Result<Dataset> {
    cfg.validate()?;
    let setting = cfg.setting();
    let shapes = cfg.shapes_for(role).to_vec();
    let bank = ShapeBank::new(&shapes)?;
    let made = exec.try_map(count, |i| {
        let stream = role.stream(i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let (shape, base) = bank.sample(setting.base_n, &mut rng)?;
        let pair = make_pair(&base, &setting, cfg.split, &mut rng)?;
        let dir = format!("pair_{i:04}");
        let entry = PairEntry {
            index: i,
            stream,
            shape,
            gt_transform: pair.gt_transform,
            n_source: pair.source.len(),
            n_target: pair.target.len(),
            inliers: pair.gt_matrix.inlier_count(),
            source: format!("{dir}/source.xyz"),
            target: format!("{dir}/target.xyz"),
            partners: format!("{dir}/partners.txt"),
        };
        Ok::<_, Error>((entry, pair))
    })?;
    let (entries, pairs) = made.into_iter().unzip();
    Ok(Dataset {
        manifest: Manifest {
            format_version: FORMAT_VERSION,
            role,
            seed,
            split: cfg.split,
            setting,
            shapes,
            pairs: entries,
        },
        pairs,
    })
}

pub fn xyz_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 64);
    for p in &cloud.points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

/// Parses whitespace-separated `x y z` rows; extra columns are ignored.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut t = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty());
        let mut c = [0.0; 3];
        for (k, v) in c.iter_mut().enumerate() {
            let tok = t.next().ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected 3 coordinates, got {k}"),
            })?;
            *v = tok.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad coordinate `{tok}`"),
            })?;
        }
        pts.push(Point3::new(c[0], c[1], c[2]));
    }
    PointCloud::new(pts)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_text(path, &xyz_string(cloud))
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    parse_xyz(&read_text(path)?)
}

/// Reads a cloud from `.xyz`/`.txt`, or the vertices of an `.off`/`.ply`.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("off") => parse_off(&read_text(path)?)?.to_cloud(),
        Some("ply") => parse_ply(&std::fs::read(path).map_err(|e| Error::io(path, e))?)?.to_cloud(),
        _ => read_xyz(path),
    }
}

fn partners_string(gt: &GtMatching) -> String {
    let mut s = format!("# target points: {}\n", gt.n_y);
    for p in &gt.partner {
        match p {
            Some(j) => writeln!(s, "{j}"),
            None => writeln!(s, "-1"),
        }
        .expect("string write");
    }
    s
}

fn parse_partners(text: &str, n_y: usize) -> Result<Vec<Option<usize>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let v: i64 = l.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad partner `{l}`"),
            })?;
            match v {
                -1 => Ok(None),
                j if (0..n_y as i64).contains(&j) => Ok(Some(j as usize)),
                _ => Err(Error::Parse {
                    line: i + 1,
                    msg: format!("partner {v} outside 0..{n_y}"),
                }),
            }
        })
        .collect()
}

pub fn manifest_json(m: &Manifest) -> Result<String> {
    Ok(serde_json::to_string_pretty(m)? + "\n")
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for (e, p) in data.manifest.pairs.iter().zip(&data.pairs) {
        write_xyz(&dir.join(&e.source), &p.source)?;
        write_xyz(&dir.join(&e.target), &p.target)?;
        write_text(&dir.join(&e.partners), &partners_string(&p.gt_matrix))?;
    }
    write_text(&dir.join(MANIFEST_FILE), &manifest_json(&data.manifest)?)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: Manifest = serde_json::from_str(&read_text(&path)?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!("{}: unsupported format_version {}", path.display(), m.format_version)));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let pairs = manifest
        .pairs
        .iter()
        .map(|e| {
            let source = read_xyz(&dir.join(&e.source))?;
            let target = read_xyz(&dir.join(&e.target))?;
            let partner = parse_partners(&read_text(&dir.join(&e.partners))?, target.len())?;
            if partner.len() != source.len() || source.len() != e.n_source || target.len() != e.n_target {
                return Err(Error::Config(format!("pair {}: file sizes disagree with the manifest", e.index)));
            }
            let gt_matrix = GtMatching { partner, n_y: target.len() };
            Ok(RegistrationPair {
                source: source.with_partners(gt_matrix.partner.clone())?,
                target,
                gt_transform: e.gt_transform,
                gt_matrix,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, pairs })
}

/// Shape-kind histogram, handy in logs.
pub fn shape_counts(m: &Manifest) -> BTreeMap<&str, usize> {
    let mut h = BTreeMap::new();
    for e in &m.pairs {
        *h.entry(e.shape.as_str()).or_insert(0) += 1;
    }
    h
}
