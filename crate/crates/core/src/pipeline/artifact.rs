//! Content-hashed artifacts with provenance manifests.
//!
//! Each artifact is a payload (file or directory) plus a sidecar
//! `<name>.manifest.json` recording the payload's sha256 and the payload
//! hashes of every upstream artifact it was derived from. Loading an
//! artifact re-hashes the payload and checks every recorded upstream hash
//! against that artifact's current manifest, so both tampering and stale
//! upstream regeneration are caught before use.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

pub const MANIFEST_FORMAT: &str = "forestnet.manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Artifact name, also the stem of the manifest file.
    pub name: String,
    pub stage: String,
    /// Payload path relative to the output directory.
    pub payload: PathBuf,
    pub payload_sha256: String,
    /// Upstream artifact name -> its payload hash at the time of use.
    pub inputs: BTreeMap<String, String>,
    /// Hash of the configuration section that shaped this artifact.
    pub config_sha256: String,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a serializable value through its JSON form.
pub fn sha256_json<T: Serialize>(value: &T) -> String {
    sha256_bytes(&serde_json::to_vec(value).expect("serializable"))
}

/// Hash of a file, or of a directory tree as the sorted list of
/// `(relative path, file hash)` pairs.
pub fn sha256_path(path: &Path) -> Result<String, PipelineError> {
    if path.is_file() {
        return Ok(sha256_bytes(&fs::read(path).map_err(io(path))?));
    }
    let mut entries = Vec::new();
    collect_files(path, path, &mut entries)?;
    entries.sort();
    let mut h = Sha256::new();
    for (rel, digest) in entries {
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update(digest.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<(), PipelineError> {
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walk stays below root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push((rel, sha256_bytes(&fs::read(&path).map_err(io(&path))?)));
        }
    }
    Ok(())
}

/// Writes `bytes` to `path` via a sibling temp file and rename, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
        f.write_all(bytes).map_err(io(&tmp))?;
        f.sync_all().map_err(io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Internal(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Artifact store rooted at an output directory.
#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.manifest.json"))
    }

    fn resolve(&self, payload: &Path) -> PathBuf {
        if payload.is_absolute() {
            payload.to_path_buf()
        } else {
            self.root.join(payload)
        }
    }

    pub fn exists(&self, name: &str) -> bool {
        self.manifest_path(name).is_file()
    }

    pub fn read_manifest(&self, name: &str) -> Result<Manifest, PipelineError> {
        let path = self.manifest_path(name);
        if !path.is_file() {
            return Err(PipelineError::MissingArtifact(name.to_string()));
        }
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| PipelineError::StaleProvenance(format!(
            "manifest of {name} is unreadable: {e}"
        )))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION || m.name != name {
            return Err(PipelineError::StaleProvenance(format!(
                "manifest of {name} has unexpected header"
            )));
        }
        Ok(m)
    }

    /// Records an already-written payload. Input hashes are taken from the
    /// upstream manifests as they are now.
    pub fn commit(
        &self,
        name: &str,
        stage: &str,
        payload: &Path,
        inputs: &[&str],
        config_sha256: String,
    ) -> Result<Manifest, PipelineError> {
        let mut recorded = BTreeMap::new();
        for up in inputs {
            recorded.insert(up.to_string(), self.read_manifest(up)?.payload_sha256);
        }
        let rel = payload.strip_prefix(&self.root).unwrap_or(payload).to_path_buf();
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            name: name.into(),
            stage: stage.into(),
            payload_sha256: sha256_path(&self.resolve(&rel))?,
            payload: rel,
            inputs: recorded,
            config_sha256,
        };
        write_json_atomic(&self.manifest_path(name), &manifest)?;
        Ok(manifest)
    }

    /// Verifies `name` and, transitively, everything it was derived from.
    /// Returns the payload path.
    pub fn verify(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let mut checked = BTreeMap::new();
        self.verify_inner(name, &mut checked)?;
        let m = self.read_manifest(name)?;
        Ok(self.resolve(&m.payload))
    }

    fn verify_inner(&self, name: &str, checked: &mut BTreeMap<String, String>) -> Result<String, PipelineError> {
        if let Some(h) = checked.get(name) {
            return Ok(h.clone());
        }
        let m = self.read_manifest(name)?;
        let path = self.resolve(&m.payload);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact(format!("{name} payload {}", path.display())));
        }
        let actual = sha256_path(&path)?;
        if actual != m.payload_sha256 {
            return Err(PipelineError::StaleProvenance(format!(
                "{name}: payload hash {actual} does not match its manifest ({})",
                m.payload_sha256
            )));
        }
        for (up, recorded) in &m.inputs {
            let current = self.verify_inner(up, checked)?;
            if &current != recorded {
                return Err(PipelineError::StaleProvenance(format!(
                    "{name} was derived from {up} {recorded}, which is now {current}; rerun the stage"
                )));
            }
        }
        checked.insert(name.to_string(), actual.clone());
        Ok(actual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_is_order_free_and_content_sensitive() {
        let d = tempfile::tempdir().unwrap();
        fs::create_dir_all(d.path().join("a/b")).unwrap();
        fs::write(d.path().join("a/b/x.txt"), "1").unwrap();
        fs::write(d.path().join("a/y.txt"), "2").unwrap();
        let h1 = sha256_path(&d.path().join("a")).unwrap();
        assert_eq!(h1, sha256_path(&d.path().join("a")).unwrap());
        fs::write(d.path().join("a/y.txt"), "3").unwrap();
        assert_ne!(h1, sha256_path(&d.path().join("a")).unwrap());
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("sub/out.json");
        write_atomic(&p, b"{}").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"{}");
        assert!(!d.path().join("sub/out.json.tmp").exists());
    }

    #[test]
    fn tampering_and_stale_upstream_detected() {
        let d = tempfile::tempdir().unwrap();
        let store = Store::new(d.path());
        let up = d.path().join("up.txt");
        fs::write(&up, "v1").unwrap();
        store.commit("up", "s1", &up, &[], "c".into()).unwrap();
        let down = d.path().join("down.txt");
        fs::write(&down, "derived").unwrap();
        store.commit("down", "s2", &down, &["up"], "c".into()).unwrap();
        store.verify("down").unwrap();

        // upstream regenerated with different content: downstream is stale
        fs::write(&up, "v2").unwrap();
        store.commit("up", "s1", &up, &[], "c".into()).unwrap();
        assert!(matches!(store.verify("down"), Err(PipelineError::StaleProvenance(_))));

        // a payload edited behind the manifest's back
        store.commit("down", "s2", &down, &["up"], "c".into()).unwrap();
        fs::write(&down, "edited").unwrap();
        assert!(matches!(store.verify("down"), Err(PipelineError::StaleProvenance(_))));
        assert!(matches!(store.verify("nothing"), Err(PipelineError::MissingArtifact(_))));
    }
}
