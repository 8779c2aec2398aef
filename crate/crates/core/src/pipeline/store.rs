//! State directory layout and atomic commits.
//!
//! A commit builds the complete next state in a sibling staging directory
//! and swaps it in with two renames. A crash between the renames leaves
//! the previous state under `.<name>.old`, which [`recover`] puts back.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CONFIG: &str = "config.json";
pub const STATE: &str = "state.json";
pub const CORPUS: &str = "corpus.jsonl";
pub const STANDARDS: &str = "standards.json";
pub const DIRECTIVES: &str = "directives.jsonl";
pub const PROPOSALS: &str = "proposals.jsonl";
pub const CASES: &str = "cases.jsonl";
pub const MEMORY_DIR: &str = "memory";
pub const GRM: &str = "grm.json";
pub const REPORTS: &str = "reports.jsonl";
pub const SERVING_LOGS: &str = "serving_logs.jsonl";
pub const CONSISTENCY: &str = "consistency.jsonl";
pub const ASSOCIATIONS: &str = "associations.jsonl";
pub const GOLDEN: &str = "golden.jsonl";
pub const MODEL: &str = "model.ckpt";
pub const EVAL_DIR: &str = "eval";
pub const CRAWL_DIR: &str = "crawl";
pub const CYCLES_DIR: &str = "cycles";

pub fn eval_file(cycle: u64) -> PathBuf {
    Path::new(EVAL_DIR).join(format!("cycle-{cycle:04}.jsonl"))
}

pub fn crawl_file(cycle: u64) -> PathBuf {
    Path::new(CRAWL_DIR).join(format!("cycle-{cycle:04}.jsonl"))
}

pub fn cycle_dir(cycle: u64) -> PathBuf {
    Path::new(CYCLES_DIR).join(format!("cycle-{cycle:04}"))
}

fn sibling(dir: &Path, suffix: &str) -> Result<PathBuf> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("state dir {} has no name", dir.display())))?
        .to_string_lossy()
        .to_string();
    Ok(dir.with_file_name(format!(".{name}.{suffix}")))
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to)?;
    for e in fs::read_dir(from)? {
        let e = e?;
        let target = to.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_dir(&e.path(), &target)?;
        } else {
            fs::copy(e.path(), &target)?;
        }
    }
    Ok(())
}

/// Restores a state dir left half-swapped by a crash and removes staging
/// leftovers.
pub fn recover(dir: &Path) -> Result<()> {
    let old = sibling(dir, "old")?;
    let staging = sibling(dir, "staging")?;
    if !dir.exists() && old.exists() {
        fs::rename(&old, dir)?;
    }
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    Ok(())
}

/// Copies the current state (if any) to staging, lets `write` fill in the
/// next state, then swaps. `write` failing leaves `dir` untouched.
pub fn commit(dir: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    recover(dir)?;
    let staging = sibling(dir, "staging")?;
    if dir.exists() {
        copy_dir(dir, &staging)?;
    } else {
        fs::create_dir_all(&staging)?;
    }
    if let Err(e) = write(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    let old = sibling(dir, "old")?;
    if dir.exists() {
        fs::rename(dir, &old)?;
    }
    fs::rename(&staging, dir)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_write_leaves_state() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("state");
        commit(&dir, |s| Ok(fs::write(s.join("a"), "1")?)).unwrap();
        let r = commit(&dir, |s| {
            fs::write(s.join("a"), "2")?;
            Err(Error::StageFailed { stage: "t", reason: "boom".into() })
        });
        assert!(r.is_err());
        assert_eq!(fs::read_to_string(dir.join("a")).unwrap(), "1");
        assert!(!sibling(&dir, "staging").unwrap().exists());
        commit(&dir, |s| Ok(fs::write(s.join("b"), "3")?)).unwrap();
        assert_eq!(fs::read_to_string(dir.join("a")).unwrap(), "1");
        assert_eq!(fs::read_to_string(dir.join("b")).unwrap(), "3");
    }

    #[test]
    fn recovers_half_swap() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("state");
        commit(&dir, |s| Ok(fs::write(s.join("a"), "1")?)).unwrap();
        fs::rename(&dir, sibling(&dir, "old").unwrap()).unwrap();
        recover(&dir).unwrap();
        assert_eq!(fs::read_to_string(dir.join("a")).unwrap(), "1");
    }
}
