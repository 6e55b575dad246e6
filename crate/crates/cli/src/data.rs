//! Dataset directories written by `gen-world` and read by everything else.

use std::path::{Path, PathBuf};

use toponav::world::{read_episodes, read_worlds, Episode, WorldSet};

use crate::error::{CliError, Result};
use crate::manifest::{input_entry, FileEntry, RunManifest};

pub const WORLDS_FILE: &str = "worlds.jsonl";
/// Episode files by role. `train` is the task dataset split 90/10 between
/// fine-tuning stages; `extra` and `aug` only feed pretraining.
pub const SPLITS: [&str; 5] = ["train", "extra", "aug", "val", "test"];

pub fn split_file(split: &str) -> String {
    format!("{split}.jsonl")
}

pub struct DataDir {
    pub root: PathBuf,
    pub manifest: RunManifest,
    /// Input record for manifests of runs that consume this directory.
    pub entry: FileEntry,
    pub worlds: WorldSet,
}

impl DataDir {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(CliError::Io(format!("data directory {} does not exist", root.display())));
        }
        let (manifest, entry) = input_entry(root)?;
        if manifest.kind != "data" {
            return Err(CliError::Usage(format!(
                "{} holds a {} manifest, not a dataset",
                root.display(),
                manifest.kind
            )));
        }
        let worlds = read_worlds(&root.join(WORLDS_FILE))?;
        Ok(DataDir {
            root: root.to_path_buf(),
            manifest,
            entry,
            worlds,
        })
    }

    /// Seed the directory was generated with; fixes the SFT/RFT split.
    pub fn seed(&self) -> u64 {
        self.manifest.seeds.get("data").copied().unwrap_or(0)
    }

    pub fn has(&self, split: &str) -> bool {
        self.manifest.file(&split_file(split)).is_some()
    }

    /// Episodes of `split`; an absent optional split reads as empty.
    pub fn episodes(&self, split: &str) -> Result<Vec<Episode>> {
        if !SPLITS.contains(&split) {
            return Err(CliError::Usage(format!("unknown split {split:?}; expected one of {SPLITS:?}")));
        }
        if !self.has(split) {
            return Ok(Vec::new());
        }
        Ok(read_episodes(&self.root.join(split_file(split)))?)
    }

    pub fn require(&self, split: &str) -> Result<Vec<Episode>> {
        let eps = self.episodes(split)?;
        if eps.is_empty() {
            return Err(CliError::Contract(format!("{} has no {split} episodes", self.root.display())));
        }
        Ok(eps)
    }
}
