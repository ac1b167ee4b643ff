use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Drug,
    Cell,
    Disease,
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::Drug => "drug",
            EntityKind::Cell => "cell line",
            EntityKind::Disease => "disease",
        })
    }
}

/// Interned entity ids; row `i` of an embedding matrix belongs to `ids()[i]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityIndex {
    ids: Vec<String>,
    #[serde(skip)]
    rows: HashMap<String, usize>,
}

impl EntityIndex {
    pub fn new() -> Self {
        EntityIndex::default()
    }

    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut index = EntityIndex::new();
        for id in ids {
            index.intern(id);
        }
        index
    }

    /// Row of `id`, registering it if new.
    pub fn intern(&mut self, id: impl Into<String>) -> usize {
        let id = id.into();
        if let Some(&row) = self.rows.get(&id) {
            return row;
        }
        self.ids.push(id.clone());
        self.rows.insert(id, self.ids.len() - 1);
        self.ids.len() - 1
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.rows.get(id).copied()
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.rows = self.ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    }
}
