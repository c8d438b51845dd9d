use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError};

/// Leave-one-out partition of one user's sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub val: usize,
    pub test: usize,
}

impl UserSplit {
    /// Training prefix followed by the validation item; the history used when
    /// predicting the test item.
    pub fn test_history(&self) -> Vec<usize> {
        let mut h = self.prefix.clone();
        h.push(self.val);
        h
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub users: Vec<UserSplit>,
    /// Users skipped because their sequence was shorter than three.
    pub excluded: usize,
}

impl SplitSpec {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Last interaction is the test item, the penultimate one validation, the rest
/// the training prefix.
pub fn split(corpus: &Corpus) -> SplitSpec {
    let mut out = SplitSpec::default();
    for (u, seq) in corpus.users().iter().enumerate() {
        let n = seq.items.len();
        if n < 3 {
            out.excluded += 1;
            continue;
        }
        out.users.push(UserSplit {
            user: u,
            prefix: seq.items[..n - 2].to_vec(),
            val: seq.items[n - 2],
            test: seq.items[n - 1],
        });
    }
    if out.excluded > 0 {
        log::warn!("{} users shorter than 3 interactions excluded from split", out.excluded);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    user: String,
    prefix_len: usize,
    val: String,
    test: String,
}

pub fn write_split_manifest(corpus: &Corpus, spec: &SplitSpec, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &spec.users {
        let row = ManifestRow {
            user: corpus.users()[s.user].user_id.clone(),
            prefix_len: s.prefix.len(),
            val: corpus.item(s.val).item_id.clone(),
            test: corpus.item(s.test).item_id.clone(),
        };
        let line = serde_json::to_string(&row).expect("manifest row serializes");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

/// Reads a manifest back against the corpus it was produced from, checking
/// that every row is consistent with the user's sequence.
pub fn read_split_manifest(corpus: &Corpus, path: &Path) -> Result<SplitSpec, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let name = path.display().to_string();
    let mut out = SplitSpec::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let err = |message: String| CorpusError::Parse {
            file: name.clone(),
            line: lineno + 1,
            message,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let u = corpus
            .user_index(&row.user)
            .ok_or_else(|| err(format!("unknown user {:?}", row.user)))?;
        let seq = &corpus.users()[u].items;
        if row.prefix_len + 2 != seq.len()
            || corpus.item(seq[row.prefix_len]).item_id != row.val
            || corpus.item(seq[row.prefix_len + 1]).item_id != row.test
        {
            return Err(err(format!("row for {:?} does not match the corpus", row.user)));
        }
        out.users.push(UserSplit {
            user: u,
            prefix: seq[..row.prefix_len].to_vec(),
            val: seq[row.prefix_len],
            test: seq[row.prefix_len + 1],
        });
    }
    Ok(out)
}
