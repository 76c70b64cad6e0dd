//! Actor checkpoints on disk: `{run_id}/ckpt_{step}.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyRegistry};

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{step}.json"))
}

pub fn save_checkpoint(path: &Path, policy: &dyn Policy, step: usize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let doc = json!({ "step": step, "policy": policy.to_json() });
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads either a checkpoint wrapper or a bare policy document.
pub fn load_policy(path: &Path, registry: &PolicyRegistry) -> Result<Box<dyn Policy>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let policy = doc.get("policy").unwrap_or(&doc);
    registry
        .load(policy)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// The checkpoint with the largest step in `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(run_dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", run_dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_env;
    use crate::policy::ModelConfig;

    #[test]
    fn round_trip_and_latest() {
        let dir = tempfile::tempdir().unwrap();
        let env = make_env("pendulum").unwrap();
        let reg = PolicyRegistry::builtin();
        let cfg = ModelConfig {
            depth: 2,
            ..ModelConfig::default()
        };
        let p = reg.build(&cfg, env.spec(), 3).unwrap();
        for step in [0, 20, 100, 9] {
            save_checkpoint(&checkpoint_path(dir.path(), step), p.as_ref(), step).unwrap();
        }
        let latest = latest_checkpoint(dir.path()).unwrap();
        assert!(latest.ends_with("ckpt_100.json"));
        let back = load_policy(&latest, &reg).unwrap();
        assert_eq!(back.to_json(), p.to_json());
    }

    #[test]
    fn corrupt_file_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt_1.json");
        fs::write(&path, r#"{"step": 1, "policy": {"kind": "icct"}}"#).unwrap();
        assert!(matches!(
            load_policy(&path, &PolicyRegistry::builtin()),
            Err(Error::Checkpoint(_))
        ));
    }
}
