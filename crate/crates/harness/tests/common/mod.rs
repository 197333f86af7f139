#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// A run small enough for a few seconds per subcommand.
pub const TINY: &str = r#"seed = 3
output_dir = "out"

[demos]
per_task = 6

[eval]
n_est = 3
n_repeat = 1

[eval.grid]
stride = 25

[eval.probe]
rollouts_per_task = 1
stride = 25

[cmi]
n_a = 8

[steergen]
budget = 3
buffer_rollouts = 1
buffer_stride = 25

[refine]
n_srbc = 40
scr_n_est = 2

[refine.scr_probe]
rollouts_per_task = 1
stride = 25

[experiment]
seeds = 2
n_repeat = 1
single_task_n = 4
buffer_n_a = 8
lambdas = [0.0, 8.0]
budgets = [2, 3]

[experiment.cmi_probe]
rollouts_per_task = 1
stride = 50
"#;

/// Write `TINY` into `dir/run.toml`; its `out` resolves against `dir` only
/// through `--out`, which callers pass.
pub fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn steerlab(config: Option<&Path>, out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_steerlab"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--out").arg(out).args(args);
    cmd.env("RUST_LOG", "error");
    cmd.output().expect("binary runs")
}

pub fn stdout_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "one summary line, got {text:?}");
    serde_json::from_str(lines[0]).unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
