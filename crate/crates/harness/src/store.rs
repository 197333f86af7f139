//! On-disk artifacts: trajectory JSON-Lines, policy manifests, JSON reports.
//!
//! Every write goes to a temporary file in the destination directory and is
//! renamed into place, so an interrupted command never leaves a truncated
//! artifact over a completed one.

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use steerlab::policy::{self, Policy, PolicyParams, Record, Source, SourceTag, Trajectory};
use steerlab::worldsim::{SceneConfig, World, WorldState};

use crate::error::{io, Error, Result};

pub const TRAJECTORY_FORMAT: &str = "steerlab.trajectories/1";
pub const MANIFEST_FORMAT: &str = "steerlab.policy-manifest/1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON encoding of `x`.
pub fn hash_of<T: Serialize>(x: &T) -> String {
    sha256_hex(&serde_json::to_vec(x).expect("value serializes"))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(dir))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(io(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn to_json<T: Serialize>(x: &T) -> String {
    let mut s = serde_json::to_string_pretty(x).expect("value serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, x: &T) -> Result<()> {
    write_atomic(path, to_json(x).as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub format: String,
    pub scene_hash: String,
    /// Hash of the parameters that generated the trajectories.
    pub params_hash: String,
    pub source: SourceTag,
    pub seed: u64,
    pub trajectories: usize,
    pub records: usize,
}

impl TrajectoryHeader {
    pub fn new<P: Serialize>(
        scene: &SceneConfig,
        params: &P,
        source: SourceTag,
        seed: u64,
        trajs: &[Trajectory],
    ) -> Self {
        Self {
            format: TRAJECTORY_FORMAT.into(),
            scene_hash: hash_of(scene),
            params_hash: hash_of(params),
            source,
            seed,
            trajectories: trajs.len(),
            records: trajs.iter().map(|t| t.records.len()).sum(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(TrajectoryHeader),
    Trajectory(TrajectoryLine),
    Step(StepLine),
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    index: usize,
    n_records: usize,
    switch_step: Option<u32>,
    success: Vec<bool>,
    achieved: Vec<bool>,
    source: SourceTag,
    seed: u64,
    final_state: WorldState,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    trajectory: usize,
    #[serde(flatten)]
    record: Record,
}

/// A header line, then per trajectory a summary line followed by one line per step.
pub fn trajectories_to_string(header: &TrajectoryHeader, trajs: &[Trajectory]) -> String {
    let mut out = String::new();
    let mut push = |line: &Line| {
        out.push_str(&serde_json::to_string(line).expect("line serializes"));
        out.push('\n');
    };
    push(&Line::Header(header.clone()));
    for (index, t) in trajs.iter().enumerate() {
        push(&Line::Trajectory(TrajectoryLine {
            index,
            n_records: t.records.len(),
            switch_step: t.switch_step,
            success: t.success.clone(),
            achieved: t.achieved.clone(),
            source: t.source,
            seed: t.seed,
            final_state: t.final_state.clone(),
        }));
        for r in &t.records {
            push(&Line::Step(StepLine { trajectory: index, record: r.clone() }));
        }
    }
    out
}

/// Write and return the file's content hash.
pub fn save_trajectories(path: &Path, header: &TrajectoryHeader, trajs: &[Trajectory]) -> Result<String> {
    let text = trajectories_to_string(header, trajs);
    write_atomic(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn parse_trajectories(path: &Path, text: &str) -> Result<(TrajectoryHeader, Vec<Trajectory>)> {
    let bad = |line: usize, message: String| Error::Format { path: path.to_path_buf(), line, message };
    let mut header = None;
    let mut trajs: Vec<Trajectory> = Vec::new();
    let mut expected = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line: Line = serde_json::from_str(raw).map_err(|e| bad(line_no, e.to_string()))?;
        match line {
            Line::Header(h) if n == 0 => {
                if h.format != TRAJECTORY_FORMAT {
                    return Err(bad(line_no, format!("unsupported format {:?}", h.format)));
                }
                header = Some(h);
            }
            _ if n == 0 => return Err(bad(line_no, "first line must be the header".into())),
            Line::Header(_) => return Err(bad(line_no, "repeated header".into())),
            Line::Trajectory(t) => {
                if t.index != trajs.len() {
                    return Err(bad(line_no, format!("trajectory index {} out of order", t.index)));
                }
                expected.push(t.n_records);
                trajs.push(Trajectory {
                    records: Vec::with_capacity(t.n_records),
                    final_state: t.final_state,
                    switch_step: t.switch_step,
                    success: t.success,
                    achieved: t.achieved,
                    source: t.source,
                    seed: t.seed,
                });
            }
            Line::Step(s) => {
                let last = trajs.len().checked_sub(1).filter(|&k| k == s.trajectory);
                let k =
                    last.ok_or_else(|| bad(line_no, format!("step for trajectory {} out of order", s.trajectory)))?;
                trajs[k].records.push(s.record);
            }
        }
    }
    let header = header.ok_or_else(|| bad(1, "empty trajectory file".into()))?;
    if let Some(k) = (0..trajs.len()).find(|&k| trajs[k].records.len() != expected[k]) {
        return Err(bad(
            0,
            format!("trajectory {k} has {} steps, summary says {}", trajs[k].records.len(), expected[k]),
        ));
    }
    if trajs.len() != header.trajectories {
        return Err(bad(1, format!("header lists {} trajectories, file has {}", header.trajectories, trajs.len())));
    }
    Ok((header, trajs))
}

pub fn load_trajectories(path: &Path) -> Result<(TrajectoryHeader, Vec<Trajectory>)> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    parse_trajectories(path, &text)
}

/// One dataset entry of a policy manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSource {
    /// Relative to the manifest's directory.
    pub path: String,
    pub tag: SourceTag,
    pub weight: f64,
    pub sha256: String,
    pub trajectories: usize,
}

/// A fitted policy is the deterministic fit of its listed datasets, so the
/// manifest stores those instead of the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyManifest {
    pub format: String,
    pub scene_hash: String,
    pub params: PolicyParams,
    pub sources: Vec<ManifestSource>,
    pub n_records: usize,
}

/// Path of `target` relative to directory `from`.
pub fn relative(from: &Path, target: &Path) -> Result<String> {
    let abs = |p: &Path| std::path::absolute(p).map_err(io(p));
    let (from, target) = (abs(from)?, abs(target)?);
    let f: Vec<Component> = from.components().collect();
    let t: Vec<Component> = target.components().collect();
    let common = f.iter().zip(&t).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..f.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    Ok(out.to_string_lossy().replace('\\', "/"))
}

/// Datasets loaded from a manifest, in manifest order.
pub struct LoadedPolicy {
    /// Path of the manifest file.
    pub origin: PathBuf,
    pub manifest: PolicyManifest,
    pub policy: Policy,
    pub datasets: Vec<(ManifestSource, Vec<Trajectory>)>,
}

impl LoadedPolicy {
    /// All trajectories carrying `tag`, concatenated.
    pub fn tagged(&self, tag: SourceTag) -> Vec<Trajectory> {
        self.datasets.iter().filter(|(s, _)| s.tag == tag).flat_map(|(_, t)| t.iter().cloned()).collect()
    }

    /// Dataset entries as `(file, tag, weight)`, ready for [`save_policy`].
    pub fn files(&self) -> Vec<(PathBuf, SourceTag, f64)> {
        let dir = self.origin.parent().unwrap_or(Path::new("."));
        self.manifest.sources.iter().map(|s| (dir.join(&s.path), s.tag, s.weight)).collect()
    }
}

/// Fit a policy over `(file, tag, weight)` entries and write its manifest.
pub fn save_policy(
    manifest_path: &Path,
    world: &World,
    params: PolicyParams,
    files: &[(PathBuf, SourceTag, f64)],
) -> Result<LoadedPolicy> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut datasets = Vec::new();
    for (file, tag, weight) in files {
        let text = fs::read_to_string(file).map_err(io(file))?;
        let (_, trajs) = parse_trajectories(file, &text)?;
        let entry = ManifestSource {
            path: relative(dir, file)?,
            tag: *tag,
            weight: *weight,
            sha256: sha256_hex(text.as_bytes()),
            trajectories: trajs.len(),
        };
        datasets.push((entry, trajs));
    }
    let policy = fit_datasets(world, params, &datasets)?;
    let manifest = PolicyManifest {
        format: MANIFEST_FORMAT.into(),
        scene_hash: hash_of(&world.scene),
        params,
        sources: datasets.iter().map(|(s, _)| s.clone()).collect(),
        n_records: policy.n_records(),
    };
    write_json(manifest_path, &manifest)?;
    Ok(LoadedPolicy { origin: manifest_path.to_path_buf(), manifest, policy, datasets })
}

fn fit_datasets(world: &World, params: PolicyParams, datasets: &[(ManifestSource, Vec<Trajectory>)]) -> Result<Policy> {
    let sources: Vec<Source> = datasets.iter().map(|(s, t)| Source::new(t, s.weight)).collect();
    Ok(policy::fit(&world.scene, &world.tasks, params, &sources)?)
}

/// Read a manifest, verify every dataset hash and the scene, and refit.
pub fn load_policy(manifest_path: &Path, world: &World) -> Result<LoadedPolicy> {
    let manifest: PolicyManifest = read_json(manifest_path)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Invalid(format!("{}: unsupported format {:?}", manifest_path.display(), manifest.format)));
    }
    let scene = hash_of(&world.scene);
    if manifest.scene_hash != scene {
        return Err(Error::Integrity {
            path: manifest_path.to_path_buf(),
            expected: manifest.scene_hash,
            found: scene,
        });
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut datasets = Vec::new();
    for s in &manifest.sources {
        let file = dir.join(&s.path);
        let text = fs::read_to_string(&file).map_err(io(&file))?;
        let found = sha256_hex(text.as_bytes());
        if found != s.sha256 {
            return Err(Error::Integrity { path: file, expected: s.sha256.clone(), found });
        }
        let (_, trajs) = parse_trajectories(&file, &text)?;
        datasets.push((s.clone(), trajs));
    }
    let policy = fit_datasets(world, manifest.params, &datasets)?;
    Ok(LoadedPolicy { origin: manifest_path.to_path_buf(), manifest, policy, datasets })
}
