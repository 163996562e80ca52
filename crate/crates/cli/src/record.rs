//! `run.json`: resolved config, inputs and SHA-256 digests of every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const RUN_FILE: &str = "run.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// One digest for a whole directory: hashes sorted relative paths and the
/// digest of each file.
pub fn sha256_tree(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in files_under(dir)? {
        let rel = f.strip_prefix(dir)?.to_string_lossy().replace('\\', "/");
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(sha256_file(&f)?.as_bytes());
        h.update(*b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// Top-level files get their own digest; subdirectories get one tree digest.
pub fn artifact_digests(out: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for entry in fs::read_dir(out)? {
        let p = entry?.path();
        let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
        if name == RUN_FILE {
            continue;
        }
        let digest = if p.is_dir() { sha256_tree(&p)? } else { sha256_file(&p)? };
        map.insert(if p.is_dir() { format!("{name}/") } else { name }, digest);
    }
    Ok(map)
}

/// Creates `out`, or clears a previous run there when `force` is set.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            bail!(crate::ConfigError(format!("{} exists and is not a directory", out.display())));
        }
        let empty = fs::read_dir(out)?.next().is_none();
        if !empty {
            if !force {
                bail!(crate::ConfigError(format!("{} already exists; pass --force to overwrite it", out.display())));
            }
            if !out.join(RUN_FILE).exists() {
                bail!(crate::ConfigError(format!(
                    "{} is not empty and holds no {RUN_FILE}; refusing to clear it",
                    out.display()
                )));
            }
            fs::remove_dir_all(out)?;
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    /// Resolved config text; `--config run.json` reads it back.
    pub config: String,
    pub args: BTreeMap<String, Value>,
    pub inputs: BTreeMap<String, Value>,
    pub summary: Value,
    pub artifacts: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &str, config: String) -> Self {
        RunRecord {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            args: BTreeMap::new(),
            inputs: BTreeMap::new(),
            summary: Value::Null,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.args.insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn input(&mut self, key: &str, path: &Path, digest: String) -> &mut Self {
        self.inputs.insert(key.into(), serde_json::json!({ "path": path.display().to_string(), "sha256": digest }));
        self
    }

    /// Digests everything in `out` and writes `out/run.json`.
    pub fn write(mut self, out: &Path) -> Result<()> {
        self.artifacts = artifact_digests(out)?;
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(out.join(RUN_FILE), text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_digest_tracks_names_and_contents() {
        let d = tempfile::tempdir().unwrap();
        fs::create_dir(d.path().join("sub")).unwrap();
        fs::write(d.path().join("sub/a"), b"1").unwrap();
        let first = sha256_tree(d.path()).unwrap();
        assert_eq!(first, sha256_tree(d.path()).unwrap());
        fs::write(d.path().join("sub/a"), b"2").unwrap();
        let second = sha256_tree(d.path()).unwrap();
        assert_ne!(first, second);
        fs::rename(d.path().join("sub/a"), d.path().join("sub/b")).unwrap();
        assert_ne!(second, sha256_tree(d.path()).unwrap());
    }

    #[test]
    fn out_dir_needs_force_and_a_previous_run() {
        let d = tempfile::tempdir().unwrap();
        let out = d.path().join("run");
        prepare_out(&out, false).unwrap();
        fs::write(out.join("x"), b"").unwrap();
        assert!(prepare_out(&out, false).is_err());
        assert!(prepare_out(&out, true).is_err());
        fs::write(out.join(RUN_FILE), b"{}").unwrap();
        prepare_out(&out, true).unwrap();
        assert!(fs::read_dir(&out).unwrap().next().is_none());
    }

    #[test]
    fn sha256_of_known_input() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("abc");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
