//! Plain-file subject registry.
//!
//! One directory per subject under the registry root, holding the current
//! `entry.json`, an append-only `history/` of every prior version, and the
//! subject's `detector.ckpt`. A lock file at the root serializes mutations;
//! reads never take the lock. The root can be overridden with the
//! `GENMARK_REGISTRY` environment variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;

pub const REGISTRY_ENV: &str = "GENMARK_REGISTRY";
const LOCK_FILE: &str = "registry.lock";
const ENTRY_FILE: &str = "entry.json";

/// Where the fine-tuned detector came from: the exact config plus the
/// checksums of the two synthesis runs it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneProvenance {
    pub config: FinetuneConfig,
    pub clean_checksum: String,
    pub watermarked_checksum: String,
}

/// Current registry state for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    /// 1-based, assigned by the registry on every write.
    pub entry_version: u32,
    /// Root seed of the subject's persisted watermark latents.
    pub latent_seed: u64,
    pub generator_version: String,
    /// Relative to the subject directory.
    pub detector_checkpoint: Option<String>,
    pub finetune: Option<FinetuneProvenance>,
}

/// Resolve the registry root: explicit path if given, else the
/// `GENMARK_REGISTRY` environment variable.
pub fn resolve_root(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(REGISTRY_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::config(format!(
            "no registry root given and {REGISTRY_ENV} is unset"
        ))),
    }
}

fn check_subject_id(subject_id: &str) -> Result<()> {
    let ok = !subject_id.is_empty()
        && subject_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && subject_id != "."
        && subject_id != "..";
    if !ok {
        return Err(Error::config(format!(
            "subject id {subject_id:?} is not a safe directory name"
        )));
    }
    Ok(())
}

/// Held for the duration of a mutation; the lock file disappears on drop.
#[derive(Debug)]
pub struct RegistryLock {
    path: PathBuf,
}

impl Drop for RegistryLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn subject_dir(&self, subject_id: &str) -> PathBuf {
        self.root.join(subject_id)
    }

    pub fn detector_checkpoint_path(&self, subject_id: &str) -> PathBuf {
        self.subject_dir(subject_id).join("detector.ckpt")
    }

    /// Take the mutation lock, failing fast if another process holds it.
    pub fn lock(&self) -> Result<RegistryLock> {
        let path = self.root.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RegistryLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Registry(
                format!("registry is locked by another process ({})", path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }

    pub fn get(&self, subject_id: &str) -> Result<Option<SubjectEntry>> {
        check_subject_id(subject_id)?;
        let path = self.subject_dir(subject_id).join(ENTRY_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let entry: SubjectEntry = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(Some(entry))
    }

    /// Write a subject entry, assigning the next version and appending the
    /// full record to the subject's history. The passed `entry_version` is
    /// ignored.
    pub fn upsert(&self, mut entry: SubjectEntry) -> Result<SubjectEntry> {
        check_subject_id(&entry.subject_id)?;
        let _lock = self.lock()?;
        entry.entry_version = match self.get(&entry.subject_id)? {
            Some(existing) => existing.entry_version + 1,
            None => 1,
        };
        let dir = self.subject_dir(&entry.subject_id);
        let bytes = serde_json::to_vec_pretty(&entry)?;
        write_atomic(
            &dir.join("history").join(format!("entry-v{}.json", entry.entry_version)),
            &bytes,
        )?;
        write_atomic(&dir.join(ENTRY_FILE), &bytes)?;
        Ok(entry)
    }

    /// Every recorded version of a subject's entry, oldest first.
    pub fn history(&self, subject_id: &str) -> Result<Vec<SubjectEntry>> {
        check_subject_id(subject_id)?;
        let current = match self.get(subject_id)? {
            Some(e) => e,
            None => return Ok(Vec::new()),
        };
        let dir = self.subject_dir(subject_id).join("history");
        let mut out = Vec::with_capacity(current.entry_version as usize);
        for v in 1..=current.entry_version {
            let path = dir.join(format!("entry-v{v}.json"));
            let entry: SubjectEntry = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            out.push(entry);
        }
        Ok(out)
    }

    /// All registered subject ids, sorted.
    pub fn subjects(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for dirent in std::fs::read_dir(&self.root)? {
            let dirent = dirent?;
            if !dirent.file_type()?.is_dir() {
                continue;
            }
            if dirent.path().join(ENTRY_FILE).exists() {
                out.push(dirent.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }
}
