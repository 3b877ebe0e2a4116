use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{read_features_as, HiddenStack};
use crate::error::{Error, Result};

/// Trial class. The discriminant is the logit index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide = 0,
    Spoof = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Bonafide),
            1 => Ok(Label::Spoof),
            other => Err(Error::data(format!("label index {other} outside {{0, 1}}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::data(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub utt_id: String,
    pub path: String,
    pub label: Label,
    #[serde(default)]
    pub conditions: BTreeMap<String, String>,
}

/// A JSON Lines dataset index. Relative feature paths resolve against the
/// directory holding the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, rows: Vec<ManifestRow>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            rows,
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::data(format!("duplicate utt_id {:?} in manifest", r.utt_id)));
            }
        }
        Ok(())
    }

    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(line)
                .map_err(|e| Error::data(format!("manifest line {}: {e}", lineno + 1)))?;
            rows.push(row);
        }
        Self::new(root, rows)
    }

    /// Loads a manifest and checks that every feature path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(root, &text)?;
        for r in &m.rows {
            let p = m.resolve(r);
            if !p.is_file() {
                return Err(Error::data(format!(
                    "feature file for {:?} not found at {}",
                    r.utt_id,
                    p.display()
                )));
            }
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes the manifest; refuses to overwrite.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_new(path, self.to_jsonl()?.as_bytes())
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_stack(&self, row: &ManifestRow) -> Result<HiddenStack> {
        read_features_as(&self.resolve(row), row.utt_id.clone())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.utt_id == utt_id)
    }

    pub fn count(&self, label: Label) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }
}
