//! Dataset manifests: JSON lists of volume files with body-part labels
//! and train/val/test split assignments.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VtsError};
use crate::phantom::BodyPart;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub body_part: BodyPart,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn body_part_counts(&self) -> HashMap<BodyPart, usize> {
        let mut counts = HashMap::new();
        for e in &self.entries {
            *counts.entry(e.body_part).or_insert(0) += 1;
        }
        counts
    }
}

/// Load and validate a manifest. Paths are resolved relative to the
/// manifest file's directory and must exist; each path may appear in
/// only one split.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| VtsError::io(path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.entries.is_empty() {
        return Err(VtsError::Data(format!(
            "{}: empty manifest",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen: HashMap<PathBuf, Split> = HashMap::new();
    for e in &mut manifest.entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
        if !e.path.exists() {
            return Err(VtsError::Data(format!(
                "manifest entry not found: {}",
                e.path.display()
            )));
        }
        if let Some(prev) = seen.insert(e.path.clone(), e.split) {
            if prev != e.split {
                return Err(VtsError::Data(format!(
                    "{} assigned to more than one split",
                    e.path.display()
                )));
            }
        }
    }
    Ok(manifest)
}
