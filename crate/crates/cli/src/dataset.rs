//! On-disk dataset layout.
//!
//! ```text
//! <data>/vocabulary.json        category table
//! <data>/train_names.json       training-category names
//! <data>/bundles/<image>/       feature bundle per image
//! <data>/gt/<image>.png|.json   ground-truth panoptic map
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ovseg::dataio::{read_panoptic, write_panoptic, PanopticMap, Synonyms, Vocabulary};

use crate::error::{io_err, CliError};

pub struct Dataset {
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn vocabulary_path(&self) -> PathBuf {
        self.root.join("vocabulary.json")
    }

    pub fn train_names_path(&self) -> PathBuf {
        self.root.join("train_names.json")
    }

    pub fn bundle_dir(&self, image: &str) -> PathBuf {
        self.root.join("bundles").join(image)
    }

    pub fn gt_paths(&self, image: &str) -> (PathBuf, PathBuf) {
        panoptic_paths(&self.root.join("gt"), image)
    }

    /// Image names in sorted order, taken from the bundle directories.
    pub fn images(&self) -> Result<Vec<String>, CliError> {
        let dir = self.root.join("bundles");
        let entries = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| io_err(&dir, e))?;
            if entry.path().is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        if names.is_empty() {
            return Err(CliError::Io(format!("{}: no images", dir.display())));
        }
        Ok(names)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, CliError> {
        let vocab = Vocabulary::read_json(&self.vocabulary_path())?;
        let path = self.train_names_path();
        if !path.exists() {
            return Ok(vocab);
        }
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let names: Vec<String> =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(vocab.with_seen_names(names))
    }

    pub fn read_gt(&self, image: &str) -> Result<PanopticMap, CliError> {
        let (png, json) = self.gt_paths(image);
        Ok(read_panoptic(&png, &json)?)
    }
}

pub fn panoptic_paths(dir: &Path, image: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{image}.png")), dir.join(format!("{image}.json")))
}

pub fn write_map(dir: &Path, image: &str, map: &PanopticMap) -> Result<(), CliError> {
    let (png, json) = panoptic_paths(dir, image);
    Ok(write_panoptic(map, &png, &json)?)
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn synonyms(path: Option<&Path>) -> Result<Synonyms, CliError> {
    match path {
        Some(p) => Ok(Synonyms::read_json(p)?),
        None => Ok(Synonyms::default()),
    }
}
