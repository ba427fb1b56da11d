//! Content-addressed stage records. A stage's hash covers its own settings
//! and the hashes of the stages it reads from, so changing any upstream field
//! invalidates everything downstream.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tak_core::codec::sha256_hex;

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub suite: u64,
    pub pretrain: u64,
    pub kfac: u64,
    pub finetune: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Command line of the most recent invocation.
    pub command: Vec<String>,
    pub seeds: Seeds,
    pub stages: BTreeMap<String, StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Hash of a stage from its settings and upstream stage hashes.
pub fn stage_hash<T: Serialize>(name: &str, settings: &T, upstream: &[&str]) -> String {
    let mut bytes = name.as_bytes().to_vec();
    bytes.push(0);
    bytes.extend(serde_json::to_vec(settings).expect("stage settings serialize"));
    for u in upstream {
        bytes.push(0);
        bytes.extend_from_slice(u.as_bytes());
    }
    sha256_hex(&bytes)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(config_hash: String, seeds: Seeds) -> Self {
        Self {
            config_hash,
            command: Vec::new(),
            seeds,
            stages: BTreeMap::new(),
        }
    }

    /// Reads `dir/manifest.json` if present.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(BenchError::Io { path, source }),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        tak_core::codec::write_file(&dir.join(MANIFEST_FILE), &bytes)?;
        Ok(())
    }

    /// The stage's record when its hash matches and every artifact is present
    /// with the recorded digest.
    pub fn verified(&self, dir: &Path, stage: &str, hash: &str) -> Result<Option<&StageRecord>> {
        let Some(rec) = self.stages.get(stage) else {
            return Ok(None);
        };
        if rec.hash != hash {
            return Ok(None);
        }
        for a in &rec.artifacts {
            let path = dir.join(&a.path);
            if !path.exists() {
                return Ok(None);
            }
            if file_sha256(&path)? != a.sha256 {
                return Ok(None);
            }
        }
        Ok(Some(rec))
    }

    /// Records `stage` with digests of the files it wrote.
    pub fn record(&mut self, dir: &Path, stage: &str, hash: String, files: &[PathBuf]) -> Result<()> {
        let mut artifacts = Vec::with_capacity(files.len());
        for f in files {
            let rel = f.strip_prefix(dir).unwrap_or(f);
            artifacts.push(ArtifactRecord {
                path: rel.to_string_lossy().into_owned(),
                sha256: file_sha256(f)?,
            });
        }
        self.stages.insert(stage.to_string(), StageRecord { hash, artifacts });
        Ok(())
    }

    /// Fails if any recorded artifact is missing or altered.
    pub fn verify_all(&self, dir: &Path) -> Result<()> {
        for rec in self.stages.values() {
            for a in &rec.artifacts {
                let path = dir.join(&a.path);
                if !path.exists() {
                    return Err(BenchError::Artifact {
                        path,
                        reason: "missing".into(),
                    });
                }
                let got = file_sha256(&path)?;
                if got != a.sha256 {
                    return Err(BenchError::Artifact {
                        path,
                        reason: format!("sha256 {got} does not match recorded {}", a.sha256),
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_settings_and_upstream() {
        let a = stage_hash("s", &1, &["u"]);
        assert_eq!(a, stage_hash("s", &1, &["u"]));
        assert_ne!(a, stage_hash("s", &2, &["u"]));
        assert_ne!(a, stage_hash("s", &1, &["v"]));
        assert_ne!(a, stage_hash("t", &1, &["u"]));
    }

    #[test]
    fn verification_detects_tampering() {
        let dir = std::env::temp_dir().join(format!("tak-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let f = dir.join("x.bin");
        std::fs::write(&f, b"abc").unwrap();
        let mut m = RunManifest::new(
            "h".into(),
            Seeds {
                suite: 0,
                pretrain: 0,
                kfac: 0,
                finetune: 0,
            },
        );
        m.record(&dir, "stage", "h1".into(), std::slice::from_ref(&f)).unwrap();
        assert_eq!(m.stages["stage"].artifacts[0].path, "x.bin");
        assert!(m.verified(&dir, "stage", "h1").unwrap().is_some());
        assert!(m.verified(&dir, "stage", "h2").unwrap().is_none());
        m.save(&dir).unwrap();
        assert_eq!(RunManifest::load(&dir).unwrap().unwrap(), m);
        std::fs::write(&f, b"abd").unwrap();
        assert!(m.verified(&dir, "stage", "h1").unwrap().is_none());
        assert!(matches!(m.verify_all(&dir), Err(BenchError::Artifact { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }
}
