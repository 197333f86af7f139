//! Run configuration, read from TOML.
//!
//! Every key is optional and falls back to the value documented in
//! `configs/default.toml`. The master `seed` is the only randomness root.
//! A consumer named `label` runs on `derive(seed, label, stream)`, where
//! `stream` is the `seed` key of its own table (0 unless set):
//!
//! | consumer            | label        | stream key       |
//! |---------------------|--------------|------------------|
//! | demonstrations      | `demos`      | none (always 0)  |
//! | steerability eval   | `eval`       | `eval.seed`      |
//! | CMI sampling        | `cmi`        | `cmi.seed`       |
//! | SteerGen            | `steergen`   | `steergen.seed`  |
//! | SRBC / refinement   | `refine`     | `refine.seed`    |
//! | experiment seed `s` | `experiment` | `s`              |
//! | session episodes    | `serve`      | none (always 0)  |
//!
//! Labels are hashed into the derivation, so two consumers never share a
//! seed even when their stream keys coincide.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steerlab::infometrics::CmiConfig;
use steerlab::policy::{DemoConfig, PolicyParams};
use steerlab::refine::RefineConfig;
use steerlab::seed;
use steerlab::steerability::EvalConfig;
use steerlab::steergen::GenConfig;
use steerlab::worldsim::{SceneConfig, World};

use crate::experiments::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    pub tick_hz: f64,
    /// A disconnected session is dropped after this many seconds.
    pub session_timeout_s: f64,
    /// Action chunks per instruction for the live CMI estimate.
    pub cmi_n_a: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8765".into(), tick_hz: 10.0, session_timeout_s: 30.0, cmi_n_a: 16 }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tick_hz > 0.0 && self.tick_hz.is_finite()) {
            return Err(format!("tick_hz must be positive, got {}", self.tick_hz));
        }
        if !(self.session_timeout_s >= 0.0) {
            return Err("session_timeout_s must be nonnegative".into());
        }
        if self.cmi_n_a < 2 {
            return Err("cmi_n_a must be at least 2".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Scene JSON; the built-in scene when absent. Relative paths resolve
    /// against the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    pub demos: DemoConfig,
    pub policy: PolicyParams,
    pub eval: EvalConfig,
    pub cmi: CmiConfig,
    pub steergen: GenConfig,
    pub refine: RefineConfig,
    pub experiment: ExperimentConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            scene: None,
            demos: DemoConfig::default(),
            policy: PolicyParams::default(),
            eval: EvalConfig::default(),
            cmi: CmiConfig::default(),
            steergen: GenConfig::default(),
            refine: RefineConfig::default(),
            experiment: ExperimentConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

/// Seeds handed to each consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub demos: u64,
    pub eval: u64,
    pub cmi: u64,
    pub steergen: u64,
    pub refine: u64,
    pub serve: u64,
}

impl RunConfig {
    pub fn seeds(&self) -> Seeds {
        let m = self.seed;
        Seeds {
            demos: seed::derive(m, "demos", 0),
            eval: seed::derive(m, "eval", self.eval.seed),
            cmi: seed::derive(m, "cmi", self.cmi.seed),
            steergen: seed::derive(m, "steergen", self.steergen.seed),
            refine: seed::derive(m, "refine", self.refine.seed),
            serve: seed::derive(m, "serve", 0),
        }
    }

    /// Root seed of experiment seed index `s`.
    pub fn experiment_seed(&self, s: usize) -> u64 {
        seed::derive(self.seed, "experiment", s as u64)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { seed: self.seeds().eval, ..self.eval }
    }

    pub fn cmi_config(&self) -> CmiConfig {
        CmiConfig { seed: self.seeds().cmi, ..self.cmi }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig { seed: self.seeds().steergen, ..self.steergen }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig { seed: self.seeds().refine, ..self.refine }
    }

    pub fn scene_config(&self) -> Result<SceneConfig, String> {
        match &self.scene {
            None => Ok(SceneConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("cannot read scene {}: {e}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("scene {}: {e}", p.display()))
            }
        }
    }

    pub fn world(&self) -> Result<World, String> {
        World::new(self.scene_config()?).map_err(|e| e.to_string())
    }

    /// Every check, as `(table, message)`; an empty table name is the top level.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let horizon = match self.world() {
            Ok(w) => w.horizon(),
            Err(e) => {
                out.push(("", format!("scene: {e}")));
                SceneConfig::default().horizon
            }
        };
        let mut check = |table: &'static str, r: Result<(), String>| {
            if let Err(e) = r {
                out.push((table, e));
            }
        };
        let core = |r: steerlab::Result<()>| r.map_err(|e| e.to_string());
        check("demos", core(self.demos.validate()));
        check("policy", core(self.policy.validate()));
        check("eval", core(self.eval.validate(horizon)));
        check("cmi", core(self.cmi.validate()));
        check("steergen", core(self.steergen.validate()));
        check("refine", core(self.refine.validate()));
        check("experiment", self.experiment.validate(horizon));
        check("serve", self.serve.validate());
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// A config failure located in its source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = self.path.as_deref().map_or_else(|| "<config>".into(), |p| p.display().to_string());
        write!(f, "{path}:{}:{}: {}", self.line, self.column, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Parse and validate a config file.
pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
        path: Some(path.to_path_buf()),
        line: 0,
        column: 0,
        message: format!("cannot read config: {e}"),
    })?;
    parse(&src, Some(path))
}

/// Parse and validate config text; `path` names the file in diagnostics and
/// anchors relative scene paths.
pub fn parse(src: &str, path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let err = |line: usize, column: usize, message: String| ConfigError {
        path: path.map(Path::to_path_buf),
        line,
        column,
        message,
    };
    let mut cfg: RunConfig = toml::from_str(src).map_err(|e| {
        let (line, col) = e.span().map_or((1, 1), |s| line_col(src, s.start));
        err(line, col, e.message().to_string())
    })?;
    if let (Some(scene), Some(dir)) = (&cfg.scene, path.and_then(Path::parent)) {
        if scene.is_relative() {
            cfg.scene = Some(dir.join(scene));
        }
    }
    if let Some((table, message)) = cfg.problems().into_iter().next() {
        let key_table = if message.starts_with("scene:") { "" } else { table };
        let line = locate(src, key_table, &message);
        let shown = if table.is_empty() { message } else { format!("[{table}] {message}") };
        return Err(err(line, 1, shown));
    }
    Ok(cfg)
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// Line of the key in `table` that `message` names, else the table header, else 1.
fn locate(src: &str, table: &str, message: &str) -> usize {
    let words: Vec<&str> = message.split(|c: char| !(c.is_alphanumeric() || c == '_')).collect();
    let mut current = String::new();
    let mut header = None;
    for (n, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = name.trim().to_string();
            if current == table && header.is_none() {
                header = Some(n + 1);
            }
            continue;
        }
        let in_table = current == table || (!table.is_empty() && current.starts_with(&format!("{table}.")));
        if !in_table {
            continue;
        }
        if let Some((key, _)) = line.split_once('=') {
            let key = key.trim();
            if !key.starts_with('#') && words.iter().any(|w| *w == key || (w.len() >= 4 && key.starts_with(w))) {
                return n + 1;
            }
        }
    }
    header.unwrap_or(1)
}
