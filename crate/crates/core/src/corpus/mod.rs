//! Interaction corpora: ingestion with count filtering, leave-one-out splits and
//! a synthetic two-domain generator with a controllable domain offset.

mod ingest;
mod split;
mod synth;

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use ingest::{
    ingest, ingest_readers, ingest_with_report, load_prepared, IngestOptions, IngestReport,
    INTERACTIONS_FILE, METADATA_FILE,
};
pub use split::{read_split_manifest, split, write_split_manifest, SplitSpec, UserSplit};
pub use synth::{synthesize, SynthConfig};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("corpus-empty: no users or items survive filtering")]
    Empty,
    #[error("invalid corpus: {0}")]
    Invalid(String),
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("invalid synthesis config: {0}")]
    Config(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainId(pub u32);

impl DomainId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// Raw metadata fields as they appear in the metadata file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFields {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub features: String,
    #[serde(default)]
    pub description: String,
}

impl ItemFields {
    pub fn has_text(&self) -> bool {
        !(self.title.trim().is_empty()
            && self.features.trim().is_empty()
            && self.description.trim().is_empty())
    }

    /// The unified metadata string fed to the semantic encoder.
    pub fn render(&self) -> String {
        format!(
            "Title: {}. Features: {}. Description: {}.",
            self.title.trim(),
            self.features.trim(),
            self.description.trim()
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemRecord {
    pub item_id: String,
    pub domain: DomainId,
    pub text: String,
    pub fields: ItemFields,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    /// Item indices, oldest first.
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainMeta {
    pub name: String,
}

/// Interned users, items and domains with time-ordered interaction sequences.
///
/// Immutable once built; every constructor goes through [`Corpus::from_parts`]
/// which checks the structural invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    items: Vec<ItemRecord>,
    users: Vec<UserSequence>,
    domains: Vec<DomainMeta>,
    item_index: HashMap<String, usize>,
    user_index: HashMap<String, usize>,
    domain_index: HashMap<String, DomainId>,
}

impl Corpus {
    pub fn from_parts(
        domains: Vec<DomainMeta>,
        items: Vec<ItemRecord>,
        users: Vec<UserSequence>,
    ) -> Result<Self, CorpusError> {
        let mut domain_index = HashMap::with_capacity(domains.len());
        for (i, d) in domains.iter().enumerate() {
            if domain_index.insert(d.name.clone(), DomainId(i as u32)).is_some() {
                return Err(CorpusError::Invalid(format!("duplicate domain {:?}", d.name)));
            }
        }
        let mut item_index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if it.domain.index() >= domains.len() {
                return Err(CorpusError::Invalid(format!(
                    "item {:?} references unknown domain {}",
                    it.item_id, it.domain
                )));
            }
            if it.text.trim().is_empty() {
                return Err(CorpusError::Invalid(format!("item {:?} has no text", it.item_id)));
            }
            if item_index.insert(it.item_id.clone(), i).is_some() {
                return Err(CorpusError::Invalid(format!("duplicate item {:?}", it.item_id)));
            }
        }
        let mut user_index = HashMap::with_capacity(users.len());
        for (u, seq) in users.iter().enumerate() {
            if seq.items.len() != seq.timestamps.len() {
                return Err(CorpusError::Invalid(format!(
                    "user {:?}: items and timestamps differ in length",
                    seq.user_id
                )));
            }
            if let Some(&bad) = seq.items.iter().find(|&&i| i >= items.len()) {
                return Err(CorpusError::Invalid(format!(
                    "user {:?} references missing item index {bad}",
                    seq.user_id
                )));
            }
            if seq.timestamps.windows(2).any(|w| w[1] < w[0]) {
                return Err(CorpusError::Invalid(format!(
                    "user {:?}: timestamps are not time-ordered",
                    seq.user_id
                )));
            }
            if user_index.insert(seq.user_id.clone(), u).is_some() {
                return Err(CorpusError::Invalid(format!("duplicate user {:?}", seq.user_id)));
            }
        }
        Ok(Self {
            items,
            users,
            domains,
            item_index,
            user_index,
            domain_index,
        })
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn users(&self) -> &[UserSequence] {
        &self.users
    }

    pub fn domains(&self) -> &[DomainMeta] {
        &self.domains
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn item(&self, idx: usize) -> &ItemRecord {
        &self.items[idx]
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.item_index.get(item_id).copied()
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.user_index.get(user_id).copied()
    }

    pub fn domain_id(&self, name: &str) -> Option<DomainId> {
        self.domain_index.get(name).copied()
    }

    pub fn domain_name(&self, id: DomainId) -> &str {
        &self.domains[id.index()].name
    }

    pub fn item_domain(&self, idx: usize) -> DomainId {
        self.items[idx].domain
    }

    pub fn items_in_domain(&self, domain: DomainId) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].domain == domain)
            .collect()
    }

    /// Sub-corpus holding only `domain_name`'s items; user sequences are
    /// filtered to those items and users left with fewer than three
    /// interactions are dropped.
    pub fn restrict_to_domain(&self, domain_name: &str) -> Result<Corpus, CorpusError> {
        let domain = self
            .domain_id(domain_name)
            .ok_or_else(|| CorpusError::UnknownDomain(domain_name.to_string()))?;
        let mut remap = vec![usize::MAX; self.items.len()];
        let mut items = Vec::new();
        for (i, it) in self.items.iter().enumerate() {
            if it.domain == domain {
                remap[i] = items.len();
                items.push(ItemRecord {
                    domain: DomainId(0),
                    ..it.clone()
                });
            }
        }
        let mut users = Vec::new();
        for seq in &self.users {
            let (kept_items, kept_ts): (Vec<usize>, Vec<i64>) = seq
                .items
                .iter()
                .zip(&seq.timestamps)
                .filter(|(&i, _)| remap[i] != usize::MAX)
                .map(|(&i, &t)| (remap[i], t))
                .unzip();
            if kept_items.len() >= 3 {
                users.push(UserSequence {
                    user_id: seq.user_id.clone(),
                    items: kept_items,
                    timestamps: kept_ts,
                });
            }
        }
        if items.is_empty() {
            return Err(CorpusError::Empty);
        }
        Corpus::from_parts(
            vec![DomainMeta {
                name: domain_name.to_string(),
            }],
            items,
            users,
        )
    }

    /// SHA-256 over a canonical rendering of items, domains and sequences.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"items\n");
        for it in &self.items {
            h.update(it.item_id.as_bytes());
            h.update(b"\t");
            h.update(self.domain_name(it.domain).as_bytes());
            h.update(b"\n");
        }
        h.update(b"users\n");
        for seq in &self.users {
            h.update(seq.user_id.as_bytes());
            for (&i, &t) in seq.items.iter().zip(&seq.timestamps) {
                h.update(b"\t");
                h.update(self.items[i].item_id.as_bytes());
                h.update(b"@");
                h.update(t.to_le_bytes());
            }
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn write_interactions(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for seq in &self.users {
            for (&i, &t) in seq.items.iter().zip(&seq.timestamps) {
                writeln!(w, "{}\t{}\t{}", seq.user_id, self.items[i].item_id, t)
                    .map_err(|e| CorpusError::io(path, e))?;
            }
        }
        w.flush().map_err(|e| CorpusError::io(path, e))
    }

    pub fn write_metadata(&self, path: &Path) -> Result<(), CorpusError> {
        #[derive(Serialize)]
        struct Row<'a> {
            item_id: &'a str,
            domain: &'a str,
            title: &'a str,
            features: &'a str,
            description: &'a str,
        }
        let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for it in &self.items {
            let row = Row {
                item_id: &it.item_id,
                domain: self.domain_name(it.domain),
                title: &it.fields.title,
                features: &it.fields.features,
                description: &it.fields.description,
            };
            let line = serde_json::to_string(&row).expect("metadata row serializes");
            writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
        }
        w.flush().map_err(|e| CorpusError::io(path, e))
    }

    /// Writes `interactions.tsv` and `metadata.jsonl` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        self.write_interactions(&dir.join(INTERACTIONS_FILE))?;
        self.write_metadata(&dir.join(METADATA_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> Corpus {
        let domains = vec![
            DomainMeta { name: "A".into() },
            DomainMeta { name: "B".into() },
        ];
        let mk = |id: &str, d: u32| ItemRecord {
            item_id: id.into(),
            domain: DomainId(d),
            text: format!("Title: {id}. Features: . Description: ."),
            fields: ItemFields {
                title: id.into(),
                ..Default::default()
            },
        };
        let items = vec![mk("a1", 0), mk("a2", 0), mk("a3", 0), mk("b1", 1), mk("b2", 1), mk("b3", 1)];
        let users = vec![
            UserSequence {
                user_id: "u1".into(),
                items: vec![0, 1, 2, 0],
                timestamps: vec![1, 2, 3, 4],
            },
            UserSequence {
                user_id: "u2".into(),
                items: vec![3, 4, 5],
                timestamps: vec![1, 1, 2],
            },
        ];
        Corpus::from_parts(domains, items, users).unwrap()
    }

    #[test]
    fn template_renders_all_fields() {
        let f = ItemFields {
            title: "Lamp".into(),
            features: "LED".into(),
            description: "Bright".into(),
        };
        assert_eq!(f.render(), "Title: Lamp. Features: LED. Description: Bright.");
        assert!(!ItemFields::default().has_text());
    }

    #[test]
    fn restrict_keeps_only_domain_items_and_renumbers() {
        let c = toy();
        let b = c.restrict_to_domain("B").unwrap();
        assert_eq!(b.n_items(), 3);
        assert_eq!(b.n_users(), 1);
        assert_eq!(b.users()[0].items, vec![0, 1, 2]);
        assert_eq!(b.domains().len(), 1);
        assert!(matches!(
            c.restrict_to_domain("C"),
            Err(CorpusError::UnknownDomain(_))
        ));
    }

    #[test]
    fn from_parts_rejects_out_of_order_timestamps() {
        let c = toy();
        let mut users = c.users().to_vec();
        users[0].timestamps = vec![3, 2, 1, 0];
        let err = Corpus::from_parts(c.domains().to_vec(), c.items().to_vec(), users);
        assert!(matches!(err, Err(CorpusError::Invalid(_))));
    }

    #[test]
    fn digest_changes_with_sequences() {
        let c = toy();
        let mut users = c.users().to_vec();
        users[1].items.swap(0, 1);
        let c2 = Corpus::from_parts(c.domains().to_vec(), c.items().to_vec(), users).unwrap();
        assert_ne!(c.digest(), c2.digest());
        assert_eq!(c.digest(), toy().digest());
    }
}
