//! Run manifests: what a command produced, from which inputs, with content hashes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, refuse, CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the directory holding the manifest, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// One ancestor in a checkpoint's history, oldest first in [`RunManifest::lineage`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: String,
    pub run_id: String,
    pub checkpoint: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// `data`, `train`, `eval`, `ablate` or `report`.
    pub kind: String,
    pub run_id: String,
    /// Seconds since the Unix epoch. The only wall-clock value any command writes.
    pub created_unix: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_snapshot: Option<String>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub lineage: Vec<LineageEntry>,
    /// Manifests of input directories, keyed by role, with their hashes.
    #[serde(default)]
    pub inputs: BTreeMap<String, FileEntry>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&fs::read(path).map_err(io_at(path))?))
}

pub fn entry(root: &Path, rel: &str) -> Result<FileEntry> {
    let path = root.join(rel);
    let bytes = fs::read(&path).map_err(io_at(&path))?;
    Ok(FileEntry {
        path: rel.to_string(),
        sha256: sha256_bytes(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Every regular file under `root` except the manifest itself, sorted by path.
pub fn inventory(root: &Path) -> Result<Vec<FileEntry>> {
    let mut rels = Vec::new();
    collect(root, root, &mut rels)?;
    rels.retain(|r| r != MANIFEST_FILE);
    rels.sort();
    rels.iter().map(|r| entry(root, r)).collect()
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for item in fs::read_dir(dir).map_err(io_at(dir))? {
        let path = item?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(kind: &str, run_id: String) -> Self {
        RunManifest {
            kind: kind.to_string(),
            run_id,
            created_unix: now_unix(),
            stage: None,
            config_snapshot: None,
            seeds: BTreeMap::new(),
            lineage: Vec::new(),
            inputs: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    /// Hashes everything under `root` and writes the manifest there, last.
    pub fn seal(mut self, root: &Path) -> Result<Self> {
        self.files = inventory(root)?;
        self.check_lineage()?;
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(&path, text + "\n").map_err(io_at(&path))?;
        Ok(self)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    /// Checks that every listed file exists with the recorded hash and that the lineage is acyclic.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for f in &self.files {
            let path = root.join(&f.path);
            if !path.is_file() {
                return Err(CliError::Io(format!("{} lists missing file {}", root.display(), f.path)));
            }
            if sha256_file(&path)? != f.sha256 {
                return refuse(format!("{} does not match the hash in its manifest", path.display()));
            }
        }
        self.check_lineage()
    }

    fn check_lineage(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for l in self.lineage.iter().map(|l| &l.run_id).chain([&self.run_id]) {
            if !seen.insert(l) {
                return refuse(format!("lineage of run {} visits {l} twice", self.run_id));
            }
        }
        Ok(())
    }

    pub fn file(&self, rel: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == rel)
    }

    /// Hash of the manifest's own content, ignoring the timestamp.
    pub fn content_hash(&self) -> String {
        let mut m = self.clone();
        m.created_unix = 0;
        sha256_bytes(serde_json::to_string(&m).expect("manifest serializes").as_bytes())
    }
}

/// Input entry for another directory's manifest.
pub fn input_entry(dir: &Path) -> Result<(RunManifest, FileEntry)> {
    let m = RunManifest::load(dir)?;
    let entry = FileEntry {
        path: dir.display().to_string(),
        sha256: m.content_hash(),
        bytes: 0,
    };
    Ok((m, entry))
}

/// Short stable identifier from a list of parts.
pub fn derive_run_id(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Creates `dir` and empties the named subdirectories so reruns start clean.
pub fn prepare_dir(dir: &Path, subdirs: &[&str]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    for s in subdirs {
        let p = dir.join(s);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(io_at(&p))?;
        }
        fs::create_dir_all(&p).map_err(io_at(&p))?;
    }
    let m = dir.join(MANIFEST_FILE);
    if m.exists() {
        fs::remove_file(&m).map_err(io_at(&m))?;
    }
    Ok(dir.to_path_buf())
}
