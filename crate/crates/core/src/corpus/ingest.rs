use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use super::{Corpus, CorpusError, DomainId, DomainMeta, ItemFields, ItemRecord, UserSequence};

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const METADATA_FILE: &str = "metadata.jsonl";

#[derive(Clone, Debug)]
pub struct IngestOptions {
    /// Users and items with fewer interactions are removed, iterated to a
    /// fixed point. Zero disables count filtering of items.
    pub min_interactions: usize,
    /// Collapse consecutive repeats of the same item in a user's sequence.
    pub collapse_consecutive_duplicates: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_interactions: 10,
            collapse_consecutive_duplicates: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub textless_items: usize,
    pub unknown_item_rows: usize,
    pub filter_passes: usize,
    pub dropped_users: usize,
    pub dropped_items: usize,
}

#[derive(Deserialize)]
struct MetaRow {
    item_id: String,
    domain: String,
    #[serde(flatten)]
    fields: ItemFields,
}

pub fn ingest(
    interactions_path: &Path,
    metadata_path: &Path,
    opts: &IngestOptions,
) -> Result<Corpus, CorpusError> {
    ingest_with_report(interactions_path, metadata_path, opts).map(|(c, _)| c)
}

pub fn ingest_with_report(
    interactions_path: &Path,
    metadata_path: &Path,
    opts: &IngestOptions,
) -> Result<(Corpus, IngestReport), CorpusError> {
    let inter = File::open(interactions_path).map_err(|e| CorpusError::io(interactions_path, e))?;
    let meta = File::open(metadata_path).map_err(|e| CorpusError::io(metadata_path, e))?;
    ingest_readers(
        BufReader::new(inter),
        &interactions_path.display().to_string(),
        BufReader::new(meta),
        &metadata_path.display().to_string(),
        opts,
    )
}

/// Loads a directory previously written by [`Corpus::write_dir`] without
/// count filtering.
pub fn load_prepared(dir: &Path) -> Result<Corpus, CorpusError> {
    let opts = IngestOptions {
        min_interactions: 0,
        collapse_consecutive_duplicates: false,
    };
    ingest(&dir.join(INTERACTIONS_FILE), &dir.join(METADATA_FILE), &opts)
}

pub fn ingest_readers<R1: BufRead, R2: BufRead>(
    interactions: R1,
    interactions_name: &str,
    metadata: R2,
    metadata_name: &str,
    opts: &IngestOptions,
) -> Result<(Corpus, IngestReport), CorpusError> {
    let mut report = IngestReport::default();

    // Metadata, in file order. Items without any text are dropped up front.
    let mut meta_rows: Vec<MetaRow> = Vec::new();
    let mut meta_index: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in metadata.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Parse {
            file: metadata_name.to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: MetaRow = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            file: metadata_name.to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if meta_index.contains_key(&row.item_id) {
            return Err(CorpusError::Parse {
                file: metadata_name.to_string(),
                line: lineno + 1,
                message: format!("duplicate item_id {:?}", row.item_id),
            });
        }
        if !row.fields.has_text() {
            report.textless_items += 1;
            continue;
        }
        meta_index.insert(row.item_id.clone(), meta_rows.len());
        meta_rows.push(row);
    }

    // Interactions grouped per user in first-appearance order.
    let mut user_order: Vec<String> = Vec::new();
    let mut user_slot: HashMap<String, usize> = HashMap::new();
    let mut raw: Vec<Vec<(i64, usize)>> = Vec::new();
    for (lineno, line) in interactions.lines().enumerate() {
        let parse_err = |message: String| CorpusError::Parse {
            file: interactions_name.to_string(),
            line: lineno + 1,
            message,
        };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        let (user, item) = (cols[0], cols[1]);
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let ts: i64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("invalid timestamp {:?}", cols[2])))?;
        let Some(&meta) = meta_index.get(item) else {
            report.unknown_item_rows += 1;
            continue;
        };
        let slot = *user_slot.entry(user.to_string()).or_insert_with(|| {
            user_order.push(user.to_string());
            raw.push(Vec::new());
            raw.len() - 1
        });
        raw[slot].push((ts, meta));
    }

    // Stable sort keeps file order among equal timestamps.
    let mut seqs: Vec<Vec<(i64, usize)>> = raw
        .into_iter()
        .map(|mut s| {
            s.sort_by_key(|&(ts, _)| ts);
            if opts.collapse_consecutive_duplicates {
                s.dedup_by_key(|&mut (_, item)| item);
            }
            s
        })
        .collect();

    let (passes, dropped_users, dropped_items) =
        filter_to_fixed_point(&mut seqs, meta_rows.len(), opts.min_interactions);
    report.filter_passes = passes;
    report.dropped_users = dropped_users;
    report.dropped_items = dropped_items;

    // Surviving items: those still referenced, or every text-bearing item when
    // count filtering is off.
    let mut item_alive = vec![opts.min_interactions == 0; meta_rows.len()];
    for s in &seqs {
        for &(_, m) in s {
            item_alive[m] = true;
        }
    }

    let mut domains: Vec<DomainMeta> = Vec::new();
    let mut domain_ids: HashMap<String, DomainId> = HashMap::new();
    let mut remap = vec![usize::MAX; meta_rows.len()];
    let mut items = Vec::new();
    for (m, row) in meta_rows.iter().enumerate() {
        if !item_alive[m] {
            continue;
        }
        let domain = *domain_ids.entry(row.domain.clone()).or_insert_with(|| {
            domains.push(DomainMeta {
                name: row.domain.clone(),
            });
            DomainId(domains.len() as u32 - 1)
        });
        remap[m] = items.len();
        items.push(ItemRecord {
            item_id: row.item_id.clone(),
            domain,
            text: row.fields.render(),
            fields: row.fields.clone(),
        });
    }

    let users: Vec<UserSequence> = user_order
        .into_iter()
        .zip(seqs)
        .filter(|(_, s)| !s.is_empty())
        .map(|(user_id, s)| UserSequence {
            user_id,
            items: s.iter().map(|&(_, m)| remap[m]).collect(),
            timestamps: s.iter().map(|&(t, _)| t).collect(),
        })
        .collect();

    if users.is_empty() || items.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok((Corpus::from_parts(domains, items, users)?, report))
}

/// Alternately removes items and users below the threshold until nothing
/// changes. Users always need at least three interactions so that a
/// leave-one-out split exists. Returns (passes, dropped users, dropped items).
fn filter_to_fixed_point(
    seqs: &mut [Vec<(i64, usize)>],
    n_items: usize,
    min_interactions: usize,
) -> (usize, usize, usize) {
    let user_min = min_interactions.max(3);
    let initial_users = seqs.iter().filter(|s| !s.is_empty()).count();
    let mut item_dead = vec![false; n_items];
    let initially_seen = {
        let mut seen = vec![false; n_items];
        for s in seqs.iter() {
            for &(_, m) in s {
                seen[m] = true;
            }
        }
        seen
    };
    let mut passes = 0;
    loop {
        passes += 1;
        let mut changed = false;

        if min_interactions > 0 {
            let mut counts = vec![0usize; n_items];
            for s in seqs.iter() {
                for &(_, m) in s {
                    counts[m] += 1;
                }
            }
            for (m, &c) in counts.iter().enumerate() {
                if c > 0 && c < min_interactions && !item_dead[m] {
                    item_dead[m] = true;
                    changed = true;
                }
            }
            for s in seqs.iter_mut() {
                s.retain(|&(_, m)| !item_dead[m]);
            }
        }

        for s in seqs.iter_mut() {
            if !s.is_empty() && s.len() < user_min {
                s.clear();
                changed = true;
            }
        }

        if !changed {
            break;
        }
    }
    let final_users = seqs.iter().filter(|s| !s.is_empty()).count();
    let mut alive = vec![false; n_items];
    for s in seqs.iter() {
        for &(_, m) in s {
            alive[m] = true;
        }
    }
    let dropped_items = (0..n_items).filter(|&m| initially_seen[m] && !alive[m]).count();
    (passes, initial_users - final_users, dropped_items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn meta_line(id: &str, domain: &str, title: &str) -> String {
        format!(
            r#"{{"item_id":"{id}","domain":"{domain}","title":"{title}","features":"","description":""}}"#
        )
    }

    fn run(inter: &str, meta: &str, opts: &IngestOptions) -> Result<(Corpus, IngestReport), CorpusError> {
        ingest_readers(
            Cursor::new(inter.to_string()),
            "inter.tsv",
            Cursor::new(meta.to_string()),
            "meta.jsonl",
            opts,
        )
    }

    /// 3 users each interact 4 times with each of 12 items: every user has
    /// 48 interactions and every item 12, so nothing is removed and the first
    /// pass is already the fixed point.
    fn shared_items_instance() -> (String, String) {
        let meta: Vec<String> = (0..12).map(|i| meta_line(&format!("i{i}"), "D", "t")).collect();
        let mut inter = String::new();
        let mut ts = 0;
        for u in 0..3 {
            for _ in 0..4 {
                for i in 0..12 {
                    ts += 1;
                    inter.push_str(&format!("u{u}\ti{i}\t{ts}\n"));
                }
            }
        }
        (inter, meta.join("\n"))
    }

    #[test]
    fn shared_items_are_retained_in_one_pass() {
        let (inter, meta) = shared_items_instance();
        let (c, rep) = run(&inter, &meta, &IngestOptions::default()).unwrap();
        assert_eq!(c.n_users(), 3);
        assert_eq!(c.n_items(), 12);
        assert_eq!(rep.filter_passes, 1);
        assert_eq!(rep.dropped_users, 0);
    }

    #[test]
    fn user_with_nine_interactions_is_dropped() {
        let (mut inter, meta) = shared_items_instance();
        for i in 0..9 {
            inter.push_str(&format!("short\ti{i}\t{}\n", 10_000 + i));
        }
        let (c, rep) = run(&inter, &meta, &IngestOptions::default()).unwrap();
        assert!(c.user_index("short").is_none());
        assert_eq!(c.n_users(), 3);
        assert_eq!(rep.dropped_users, 1);
    }

    #[test]
    fn item_removal_cascades_to_users() {
        // u3 has exactly 10 interactions, one of which is the rare item "r";
        // removing "r" leaves u3 with 9, so u3 goes too. The second pass
        // confirms the fixed point.
        let (mut inter, mut meta) = shared_items_instance();
        meta.push('\n');
        meta.push_str(&meta_line("r", "D", "rare"));
        for i in 0..9 {
            inter.push_str(&format!("u3\ti{i}\t{}\n", 20_000 + i));
        }
        inter.push_str("u3\tr\t30000\n");
        let (c, rep) = run(&inter, &meta, &IngestOptions::default()).unwrap();
        assert!(c.user_index("u3").is_none());
        assert!(c.item_index("r").is_none());
        assert_eq!(rep.filter_passes, 2);
    }

    #[test]
    fn empty_input_is_corpus_empty() {
        let err = run("", "", &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Empty));
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let meta = meta_line("i0", "D", "t");
        let err = run("u\ti0\t1\nu\ti0\n", &meta, &IngestOptions::default()).unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = run("u\ti0\tyesterday\n", &meta, &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
    }

    #[test]
    fn textless_items_are_dropped_before_counting() {
        let meta = format!("{}\n{}", meta_line("i0", "D", "t"), meta_line("blank", "D", "  "));
        let inter = "u\ti0\t1\nu\tblank\t2\nu\ti0\t3\nu\ti0\t4\n";
        let opts = IngestOptions {
            min_interactions: 0,
            ..Default::default()
        };
        let (c, rep) = run(inter, &meta, &opts).unwrap();
        assert_eq!(rep.textless_items, 1);
        assert_eq!(c.n_items(), 1);
        assert_eq!(c.users()[0].len(), 3);
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let meta = (0..3).map(|i| meta_line(&format!("i{i}"), "D", "t")).collect::<Vec<_>>().join("\n");
        let inter = "u\ti2\t5\nu\ti0\t5\nu\ti1\t1\n";
        let opts = IngestOptions {
            min_interactions: 0,
            ..Default::default()
        };
        let (c, _) = run(inter, &meta, &opts).unwrap();
        let ids: Vec<&str> = c.users()[0].items.iter().map(|&i| c.item(i).item_id.as_str()).collect();
        assert_eq!(ids, ["i1", "i2", "i0"]);
    }

    #[test]
    fn duplicate_collapse_is_opt_in() {
        let meta = (0..2).map(|i| meta_line(&format!("i{i}"), "D", "t")).collect::<Vec<_>>().join("\n");
        let inter = "u\ti0\t1\nu\ti0\t2\nu\ti1\t3\nu\ti0\t4\n";
        let keep = IngestOptions {
            min_interactions: 0,
            collapse_consecutive_duplicates: false,
        };
        assert_eq!(run(inter, &meta, &keep).unwrap().0.users()[0].len(), 4);
        let collapse = IngestOptions {
            collapse_consecutive_duplicates: true,
            ..keep
        };
        assert_eq!(run(inter, &meta, &collapse).unwrap().0.users()[0].len(), 3);
    }

    #[test]
    fn filtering_is_a_fixed_point() {
        let (mut inter, meta) = shared_items_instance();
        inter.push_str("v\ti0\t1\nv\ti1\t2\n");
        let (c, _) = run(&inter, &meta, &IngestOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_dir(dir.path()).unwrap();
        let again = ingest(
            &dir.path().join(INTERACTIONS_FILE),
            &dir.path().join(METADATA_FILE),
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(c, again);
        assert_eq!(load_prepared(dir.path()).unwrap(), c);
    }
}
