//! File formats: pool ingest, split export and canonical snapshots.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use distal_core::pool::{Instance, Pool, Provenance};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a pool file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
}

/// One line of an exported split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLine {
    pub id: String,
    pub input: String,
    pub target: String,
    pub provenance: Provenance,
    pub iteration: u32,
}

/// Parses pool lines; blank lines are skipped but still count toward line
/// numbers and generated ids.
pub fn parse_pool(reader: impl BufRead) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Ingest {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PoolLine = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            line: lineno,
            message: e.to_string(),
        })?;
        let id = parsed.id.unwrap_or_else(|| format!("{idx:06}"));
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId { id, line: lineno });
        }
        let mut inst = Instance::new(id, parsed.text);
        inst.subgroup = parsed.subgroup;
        inst.validate().map_err(|e| Error::Ingest {
            line: lineno,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

/// Adds every instance in a pool file; the pool is unchanged on error.
pub fn ingest(pool: &mut Pool, path: &Path) -> Result<usize> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let instances = parse_pool(BufReader::new(file))?;
    for (i, inst) in instances.iter().enumerate() {
        if pool.get(&inst.id).is_some() {
            return Err(Error::Ingest {
                line: i + 1,
                message: format!("id {} already in pool", inst.id),
            });
        }
    }
    let n = instances.len();
    for inst in instances {
        pool.insert(inst)?;
    }
    Ok(n)
}

/// Pairs whose provenance is in `filter`, sorted by instance id.
pub fn split_lines(pool: &Pool, filter: &[Provenance]) -> Vec<PairLine> {
    pool.pairs()
        .filter(|p| filter.contains(&p.provenance))
        .map(|p| PairLine {
            id: p.instance_id.clone(),
            input: p.input_text.clone(),
            target: p.target_text.clone(),
            provenance: p.provenance,
            iteration: p.iteration,
        })
        .collect()
}

pub fn write_lines<T: Serialize>(path: &Path, lines: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the matching pairs as JSONL and returns how many were written.
/// An empty result still produces a (zero-length) file.
pub fn export_split(pool: &Pool, filter: &[Provenance], path: &Path) -> Result<usize> {
    let lines = split_lines(pool, filter);
    if lines.is_empty() {
        tracing::warn!(path = %path.display(), "no pairs match the split filter");
    }
    write_lines(path, &lines)?;
    Ok(lines.len())
}

/// Serializes with every object's keys sorted, so equal values always yield
/// identical bytes.
pub fn to_canonical<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Writes via a temporary file and rename so readers never see a partial
/// document.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_canonical<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_canonical(value)?.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::state(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use distal_core::pool::{Decision, InstanceState, LabeledPair};

    fn parse(s: &str) -> Result<Vec<Instance>> {
        parse_pool(s.as_bytes())
    }

    #[test]
    fn ids_default_to_line_index() {
        let v = parse("{\"text\":\"a\"}\n{\"text\":\"b\"}\n{\"text\":\"c\",\"subgroup\":\"g\"}\n")
            .unwrap();
        let ids: Vec<&str> = v.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["000000", "000001", "000002"]);
        assert_eq!(v[2].subgroup.as_deref(), Some("g"));
        assert!(v.iter().all(|i| i.state == InstanceState::Unlabeled));
    }

    #[test]
    fn empty_input() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn duplicate_and_malformed_lines() {
        let doc = "{\"id\":\"x1\",\"text\":\"a\"}\n{\"text\":\"b\"}\n{\"text\":\"c\"}\n{\"id\":\"x1\",\"text\":\"d\"}\n";
        assert_eq!(
            parse(doc).unwrap_err().to_string(),
            "duplicate id x1 at line 4"
        );
        let err = parse("{\"text\":\"a\"}\n{oops\n").unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
        let err = parse("{\"id\":\"q\"}\n").unwrap_err();
        assert!(err.to_string().starts_with("line 1:"), "{err}");
        let err = parse("{\"text\":\"\"}\n").unwrap_err();
        assert!(err.to_string().contains("empty source text"), "{err}");
    }

    #[test]
    fn export_sorted_and_filtered() {
        let mut pool = Pool::new();
        for (id, prov) in [
            ("b", Provenance::Cluster),
            ("a", Provenance::Cluster),
            ("c", Provenance::Bootstrap),
        ] {
            pool.insert(Instance::new(id, format!("src {id}"))).unwrap();
            for s in [
                InstanceState::Selected,
                InstanceState::Distilled,
                InstanceState::PendingVerification,
                InstanceState::Labeled,
            ] {
                pool.transition(id, s, 1, 0).unwrap();
            }
            pool.add_pair(LabeledPair {
                instance_id: id.into(),
                input_text: format!("src {id}"),
                target_text: format!("tgt {id}"),
                provenance: prov,
                iteration: 1,
                decision: Decision::Approved,
                editor_note: None,
            })
            .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        assert_eq!(
            export_split(&pool, &[Provenance::Cluster], &path).unwrap(),
            2
        );
        let text = fs::read_to_string(&path).unwrap();
        let first: PairLine = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.id, "a");
        assert_eq!(first.target, "tgt a");

        let empty = dir.path().join("none.jsonl");
        assert_eq!(
            export_split(&pool, &[Provenance::Random], &empty).unwrap(),
            0
        );
        assert_eq!(fs::metadata(&empty).unwrap().len(), 0);
    }
}
