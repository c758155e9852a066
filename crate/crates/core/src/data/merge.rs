use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{DatasetManifest, RemapTable, SampleRecord, UNLABELED};
use crate::error::{Error, Result};

pub const DEFAULT_BACKGROUND_SYNONYMS: [&str; 3] = ["background", "unlabeled", "clutter"];

#[derive(Clone, Debug)]
pub struct MergeOptions {
    pub name: String,
    /// Names (compared after normalization) that collapse to the sentinel.
    pub background_synonyms: Vec<String>,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            name: "merged".into(),
            background_synonyms: DEFAULT_BACKGROUND_SYNONYMS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Trimmed, internal whitespace collapsed to single spaces, lowercased.
pub fn normalize_class_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Unions the vocabularies of `manifests`.
///
/// Names equal after [`normalize_class_name`] share one index (first spelling
/// and first-seen order win); background synonyms map to the sentinel. Each
/// source gets a table from its raw mask values to merged indices, composed
/// with any table the input manifest already carried. Two inputs that give
/// the same source different tables, or a vocabulary that would need index
/// 255, are collisions. Identical sample records are kept once.
pub fn merge_datasets(manifests: &[DatasetManifest], opts: &MergeOptions) -> Result<DatasetManifest> {
    if manifests.is_empty() {
        return Err(Error::Usage("merge needs at least one manifest".into()));
    }
    let background: BTreeSet<String> = opts.background_synonyms.iter().map(|s| normalize_class_name(s)).collect();
    let mut classes: Vec<String> = Vec::new();
    let mut index_of: HashMap<String, u8> = HashMap::new();
    let mut remap: BTreeMap<String, RemapTable> = BTreeMap::new();
    let mut samples: Vec<SampleRecord> = Vec::new();
    let mut seen_samples = BTreeSet::new();

    for m in manifests {
        let mut to_merged = Vec::with_capacity(m.classes.len());
        for name in &m.classes {
            let key = normalize_class_name(name);
            let idx = if background.contains(&key) {
                UNLABELED
            } else if let Some(&i) = index_of.get(&key) {
                i
            } else {
                if classes.len() >= UNLABELED as usize {
                    return Err(Error::RemapCollision(format!(
                        "class `{name}` would take index {}, reserved for unlabeled",
                        classes.len()
                    )));
                }
                let i = classes.len() as u8;
                classes.push(name.trim().to_string());
                index_of.insert(key, i);
                i
            };
            to_merged.push(idx);
        }

        let sources: BTreeSet<&str> = m.samples.iter().map(|s| s.source.as_str()).chain(m.remap.keys().map(String::as_str)).collect();
        for source in sources {
            let mut table = RemapTable::new();
            for (raw, local) in m.table_for(source) {
                let merged = if local == UNLABELED {
                    UNLABELED
                } else {
                    *to_merged.get(local as usize).ok_or_else(|| {
                        Error::RemapCollision(format!(
                            "{}: source `{source}` maps {raw} to index {local} outside {} classes",
                            m.name,
                            m.classes.len()
                        ))
                    })?
                };
                table.insert(raw, merged);
            }
            match remap.get(source) {
                Some(prev) if *prev != table => {
                    return Err(Error::RemapCollision(format!(
                        "source `{source}` has conflicting tables across manifests"
                    )));
                }
                Some(_) => {}
                None => {
                    remap.insert(source.to_string(), table);
                }
            }
        }

        for s in &m.samples {
            let rec = SampleRecord {
                image: m.resolve(&s.image),
                mask: m.resolve(&s.mask),
                source: s.source.clone(),
            };
            if seen_samples.insert(rec.clone()) {
                samples.push(rec);
            }
        }
    }

    Ok(DatasetManifest { name: opts.name.clone(), classes, samples, remap, root: Default::default() })
}
