use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: u32,
    pub name: String,
    #[serde(rename = "isthing")]
    pub is_thing: bool,
}

/// Test-time category list, optionally carrying the training category names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    categories: Vec<Category>,
    seen_names: Option<Vec<String>>,
}

/// Lowercased and trimmed.
pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

impl Vocabulary {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for c in &categories {
            if !ids.insert(c.id) {
                return Err(Error::InvalidData(format!("duplicate category id {}", c.id)));
            }
            let n = normalize_name(&c.name);
            if n.is_empty() {
                return Err(Error::InvalidData(format!("category {} has an empty name", c.id)));
            }
            if !names.insert(n) {
                return Err(Error::InvalidData(format!("duplicate category name {:?}", c.name)));
            }
        }
        Ok(Self {
            categories,
            seen_names: None,
        })
    }

    pub fn with_seen_names(mut self, names: Vec<String>) -> Self {
        self.seen_names = Some(names);
        self
    }

    pub fn seen_names(&self) -> Option<&[String]> {
        self.seen_names.as_deref()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Category> {
        self.categories.get(index)
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    pub fn by_id(&self, id: u32) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cats: Vec<Category> =
            serde_json::from_str(text).map_err(|e| Error::InvalidData(format!("vocabulary JSON: {e}")))?;
        Self::new(cats)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cats: Vec<Category> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::new(cats)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.categories).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// User-supplied name equivalences, e.g. `{"sofa": "couch"}`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Synonyms(BTreeMap<String, String>);

impl Synonyms {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        Self(
            map.into_iter()
                .map(|(a, b)| (normalize_name(&a), normalize_name(&b)))
                .collect(),
        )
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok(Self::new(map))
    }

    fn lookup(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    fn reverse<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0
            .iter()
            .filter(move |(_, v)| v.as_str() == name)
            .map(|(k, _)| k.as_str())
    }
}

/// `M[c]` is true when test category `c` also belongs to the training set,
/// by exact normalized name or through one synonym-table hop (either way).
pub fn overlap_mask(test_vocab: &Vocabulary, train_names: &[String], synonyms: &Synonyms) -> Vec<bool> {
    let train: HashSet<String> = train_names.iter().map(|n| normalize_name(n)).collect();
    test_vocab
        .categories()
        .iter()
        .map(|c| {
            let n = normalize_name(&c.name);
            train.contains(&n)
                || synonyms.lookup(&n).is_some_and(|s| train.contains(s))
                || synonyms.reverse(&n).any(|s| train.contains(s))
        })
        .collect()
}
