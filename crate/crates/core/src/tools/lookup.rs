use std::collections::BTreeMap;
use std::path::Path;

/// Deterministic key to document map behind the `lookup` tool. Keys are
/// matched case-insensitively after trimming.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LookupTable {
    docs: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl LookupTable {
    pub fn from_pairs<K: AsRef<str>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        Self {
            docs: pairs
                .into_iter()
                .map(|(k, v)| (normalize(k.as_ref()), v.into()))
                .collect(),
        }
    }

    /// Loads a JSON object mapping keys to documents.
    pub fn from_json_str(text: &str) -> Result<Self, serde_json::Error> {
        let raw: BTreeMap<String, String> = serde_json::from_str(text)?;
        Ok(Self::from_pairs(raw))
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, query: &str) -> Option<&str> {
        self.docs.get(&normalize(query)).map(String::as_str)
    }

    pub fn answer(&self, query: &str) -> String {
        match self.get(query) {
            Some(doc) => doc.to_string(),
            None => format!("No results found for '{}'.", query.trim()),
        }
    }
}
