//! Run artifacts: digest-named directories that are written once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Classify, CliResult};

/// SHA-256 of the named input files, keyed by role.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Inputs(pub BTreeMap<String, String>);

impl Inputs {
    pub fn file(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).input(format!("reading {}", path.display()))?;
        self.bytes(role, &bytes);
        Ok(())
    }

    pub fn bytes(&mut self, role: &str, bytes: &[u8]) {
        self.0
            .insert(role.to_string(), hex::encode(Sha256::digest(bytes)));
    }

    pub fn get(&self, role: &str) -> Option<&str> {
        self.0.get(role).map(String::as_str)
    }
}

/// Digest over everything that determines a run's result.
pub fn run_digest(kind: &str, settings: &impl Serialize, inputs: &Inputs) -> String {
    let doc = serde_json::json!({ "kind": kind, "settings": settings, "inputs": inputs });
    hex::encode(Sha256::digest(
        serde_json::to_vec(&doc).expect("settings serialize"),
    ))
}

pub fn run_dir(output_dir: &Path, kind: &str, digest: &str) -> PathBuf {
    output_dir.join(format!("{kind}-{}", &digest[..16]))
}

/// The common shape of every `report.json`.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, C: Serialize, R: Serialize> {
    pub kind: &'a str,
    pub digest: &'a str,
    pub created_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    /// Headline values, merged by `hallu report`.
    pub metrics: BTreeMap<String, f64>,
    pub config: &'a C,
    pub inputs: &'a Inputs,
    pub result: R,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub enum Staged {
    /// A run with the same digest was already published here.
    Existing(PathBuf),
    New(Stage),
}

/// A scratch directory that becomes the run directory on commit.
pub struct Stage {
    tmp: PathBuf,
    target: PathBuf,
}

impl Stage {
    pub fn open(target: PathBuf) -> CliResult<Staged> {
        if target.exists() {
            return Ok(Staged::Existing(target));
        }
        let parent = target.parent().expect("run directories have a parent");
        std::fs::create_dir_all(parent).input(format!("creating {}", parent.display()))?;
        let name = target.file_name().expect("named").to_string_lossy();
        let tmp = parent.join(format!(".{name}.{}.partial", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).input(format!("clearing {}", tmp.display()))?;
        }
        std::fs::create_dir(&tmp).input(format!("creating {}", tmp.display()))?;
        Ok(Staged::New(Stage { tmp, target }))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).input(format!("writing {}", path.display()))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialize");
        bytes.push(b'\n');
        self.write(name, bytes)
    }

    pub fn commit(self) -> CliResult<PathBuf> {
        match std::fs::rename(&self.tmp, &self.target) {
            Ok(()) => Ok(self.target.clone()),
            // lost a race against an identical run
            Err(_) if self.target.exists() => {
                let _ = std::fs::remove_dir_all(&self.tmp);
                Ok(self.target.clone())
            }
            Err(e) => Err(e).input(format!("publishing {}", self.target.display())),
        }
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        if self.tmp.exists() {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_settings_and_inputs() {
        let mut a = Inputs::default();
        a.bytes("x", b"1");
        let mut b = Inputs::default();
        b.bytes("x", b"2");
        assert_eq!(run_digest("k", &1, &a), run_digest("k", &1, &a));
        assert_ne!(run_digest("k", &1, &a), run_digest("k", &2, &a));
        assert_ne!(run_digest("k", &1, &a), run_digest("k", &1, &b));
        assert_ne!(run_digest("k", &1, &a), run_digest("j", &1, &a));
    }

    #[test]
    fn published_directories_are_not_replaced() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("score-abc");
        let Staged::New(stage) = Stage::open(target.clone()).unwrap() else {
            panic!()
        };
        stage.write("a.txt", "first").unwrap();
        stage.commit().unwrap();
        match Stage::open(target.clone()).unwrap() {
            Staged::Existing(p) => assert_eq!(p, target),
            Staged::New(_) => panic!("reopened a published run"),
        }
        assert_eq!(
            std::fs::read_to_string(target.join("a.txt")).unwrap(),
            "first"
        );
    }

    #[test]
    fn abandoned_stage_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let Staged::New(stage) = Stage::open(dir.path().join("x")).unwrap() else {
            panic!()
        };
        stage.write("a", "b").unwrap();
        drop(stage);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
