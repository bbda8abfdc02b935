//! Settings resolution (flags > config file > defaults), run manifests and
//! the per-output-root lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Top-level keys accepted in a config file besides the per-command sections.
const SHARED_KEYS: [&str; 1] = ["seed"];

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                if v.is_null() {
                    continue;
                }
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn read_config(path: &Path, section: &str) -> Result<Value, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config file {} is not valid JSON: {e}", path.display())))?;
    let Value::Object(root) = root else {
        return Err(CliError::Usage(format!("config file {} must hold a JSON object", path.display())));
    };
    let mut out = Map::new();
    let mut own = None;
    for (k, v) in root {
        if SHARED_KEYS.contains(&k.as_str()) {
            out.insert(k, v);
        } else if k == section {
            own = Some(v);
        } else if !crate::COMMANDS.contains(&k.as_str()) {
            return Err(CliError::Usage(format!("config file {}: unknown section `{k}`", path.display())));
        }
    }
    match own {
        Some(Value::Object(sec)) => out.extend(sec),
        Some(_) => return Err(CliError::Usage(format!("config section `{section}` must be a JSON object"))),
        None => {}
    }
    Ok(Value::Object(out))
}

/// Layers defaults, the command's config section, and explicitly given flags.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(
    config: Option<&Path>,
    section: &str,
    flags: &impl Serialize,
) -> Result<T, CliError> {
    let mut v = serde_json::to_value(T::default()).map_err(|e| CliError::Runtime(e.into()))?;
    if let Some(p) = config {
        merge(&mut v, read_config(p, section)?);
    }
    merge(&mut v, serde_json::to_value(flags).map_err(|e| CliError::Runtime(e.into()))?);
    let text = v.to_string();
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Usage(format!("invalid setting `{}` for {section}: {}", e.path(), e.inner())))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub checkpoint_format: u32,
    pub config: Value,
    /// Input path -> SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    /// Output file (relative to the output root) -> SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self, CliError> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: scenediff::net::CHECKPOINT_VERSION,
            config: serde_json::to_value(config).map_err(|e| CliError::Runtime(e.into()))?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let files: Vec<PathBuf> = if path.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| CliError::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json" && n != LOCK_FILE))
                .collect();
            v.sort();
            v
        } else {
            vec![path.to_path_buf()]
        };
        for f in files {
            let h = sha256_file(&f).map_err(|e| CliError::io(&f, e))?;
            self.inputs.insert(f.display().to_string(), h);
        }
        Ok(())
    }

    /// Hashes the listed outputs and writes `manifest.json` under `out`.
    pub fn write(mut self, out: &Path, outputs: &[&str]) -> Result<(), CliError> {
        for name in outputs {
            let p = out.join(name);
            let h = sha256_file(&p).map_err(|e| CliError::io(&p, e))?;
            self.outputs.insert(name.to_string(), h);
        }
        write_json(&out.join("manifest.json"), &self)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.into()))? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub const LOCK_FILE: &str = ".lock";

/// Exclusive claim on an output root, released on drop.
#[derive(Debug)]
pub struct OutLock {
    path: PathBuf,
}

impl OutLock {
    pub fn acquire(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Runtime(anyhow::anyhow!(
                "output root {} is in use by another run (lock file {})",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct S {
        seed: u64,
        steps: usize,
        lr: Option<f64>,
    }

    #[derive(Serialize)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 4, "pretrain": {"steps": 10, "lr": 0.5}}"#).unwrap();
        let s: S = resolve(Some(&p), "pretrain", &Flags { steps: Some(20) }).unwrap();
        assert_eq!(s, S { seed: 4, steps: 20, lr: Some(0.5) });
        let s: S = resolve(Some(&p), "pretrain", &Flags { steps: None }).unwrap();
        assert_eq!(s.steps, 10);
        let s: S = resolve(None, "pretrain", &Flags { steps: None }).unwrap();
        assert_eq!(s, S::default());
    }

    #[test]
    fn config_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"pretrain": {"stepz": 10}}"#).unwrap();
        let e = resolve::<S>(Some(&p), "pretrain", &Flags { steps: None }).unwrap_err();
        assert!(e.to_string().contains("stepz"), "{e}");
        fs::write(&p, r#"{"pretrain": {"steps": "x"}}"#).unwrap();
        let e = resolve::<S>(Some(&p), "pretrain", &Flags { steps: None }).unwrap_err();
        assert!(e.to_string().contains("steps"), "{e}");
        fs::write(&p, r#"{"bogus": {}}"#).unwrap();
        assert!(resolve::<S>(Some(&p), "pretrain", &Flags { steps: None }).is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutLock::acquire(dir.path()).unwrap();
        assert!(OutLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(OutLock::acquire(dir.path()).is_ok());
    }
}
