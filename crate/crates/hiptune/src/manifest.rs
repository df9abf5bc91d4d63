//! Dataset manifest: one UTF-8 line per record with tab-separated fields
//! `(file, identity_id, is_live, l1, l2, l3, method_id, split)` under a
//! schema-version header line. Live records carry `-` for the path and
//! method fields.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::AttackTaxonomy;

pub const MANIFEST_HEADER: &str = "#hiptune-manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split tag {other}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub identity_id: u32,
    pub is_live: bool,
    /// (level1, level2, level3) node ids; None for live samples.
    pub path: Option<(u16, u16, u16)>,
    pub method_id: Option<u16>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Check every record against the taxonomy and the live/path/method
    /// consistency rule; errors name the offending record index.
    pub fn validate(&self, taxonomy: &AttackTaxonomy) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            validate_record(taxonomy, i, rec)?;
        }
        Ok(())
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

fn validate_record(taxonomy: &AttackTaxonomy, index: usize, rec: &ManifestRecord) -> Result<()> {
    let fail = |msg: String| Error::ManifestValidation { record: index, msg };
    match (rec.is_live, rec.path, rec.method_id) {
        (true, None, None) => Ok(()),
        (false, Some(path), Some(method)) => {
            taxonomy
                .validate_path(path)
                .map_err(|e| fail(e.to_string()))?;
            let l3 = taxonomy
                .method_node(method)
                .map_err(|e| fail(e.to_string()))?;
            if l3 != path.2 {
                return Err(fail(format!(
                    "method {method} belongs to node {l3}, record claims {}",
                    path.2
                )));
            }
            Ok(())
        }
        _ => Err(fail(
            "is_live must coincide with absent path and method".to_string(),
        )),
    }
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for rec in &manifest.records {
        let (l1, l2, l3) = match rec.path {
            Some((a, b, c)) => (a.to_string(), b.to_string(), c.to_string()),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let method = rec
            .method_id
            .map(|m| m.to_string())
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            rec.file, rec.identity_id, rec.is_live as u8, l1, l2, l3, method, rec.split
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines();
    let header = match lines.next() {
        None => return Ok(Manifest::default()),
        Some(h) => h,
    };
    if !header.starts_with("#hiptune-manifest") {
        return Err(Error::ManifestValidation {
            record: 0,
            msg: format!("missing manifest header, found {header:?}"),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(Error::ManifestValidation {
                record: i,
                msg: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let fail = |msg: String| Error::ManifestValidation { record: i, msg };
        let identity_id: u32 = fields[1].parse().map_err(|_| fail("bad identity".into()))?;
        let is_live = match fields[2] {
            "1" => true,
            "0" => false,
            other => return Err(fail(format!("bad is_live flag {other}"))),
        };
        let parse_opt = |s: &str| -> Result<Option<u16>> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse::<u16>()
                    .map(Some)
                    .map_err(|_| fail(format!("bad node id {s}")))
            }
        };
        let l1 = parse_opt(fields[3])?;
        let l2 = parse_opt(fields[4])?;
        let l3 = parse_opt(fields[5])?;
        let path = match (l1, l2, l3) {
            (None, None, None) => None,
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => return Err(fail("partial path ids".into())),
        };
        let method_id = parse_opt(fields[6])?;
        let split = Split::from_str(fields[7]).map_err(fail)?;
        records.push(ManifestRecord {
            file: fields[0].to_string(),
            identity_id,
            is_live,
            path,
            method_id,
            split,
        });
    }
    Ok(Manifest { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::build_taxonomy;

    fn sample_manifest() -> Manifest {
        let tax = build_taxonomy();
        let path = tax.path_for_method(7).unwrap();
        Manifest {
            records: vec![
                ManifestRecord {
                    file: "samples/000000.bin".into(),
                    identity_id: 0,
                    is_live: true,
                    path: None,
                    method_id: None,
                    split: Split::Train,
                },
                ManifestRecord {
                    file: "samples/000001.bin".into(),
                    identity_id: 0,
                    is_live: false,
                    path: Some(path),
                    method_id: Some(7),
                    split: Split::Unassigned,
                },
            ],
        }
    }

    #[test]
    fn round_trip_identity() {
        let m = sample_manifest();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        std::fs::write(&path, "").unwrap();
        assert_eq!(load_manifest(&path).unwrap(), Manifest::default());
        std::fs::write(&path, format!("{MANIFEST_HEADER}\n")).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), Manifest::default());
    }

    #[test]
    fn dangling_node_id_names_the_record() {
        let tax = build_taxonomy();
        let mut m = sample_manifest();
        m.records[1].path = Some((1, 3, 999));
        let err = m.validate(&tax).unwrap_err();
        match err {
            Error::ManifestValidation { record, .. } => assert_eq!(record, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn live_with_method_rejected() {
        let tax = build_taxonomy();
        let mut m = sample_manifest();
        m.records[0].method_id = Some(3);
        assert!(m.validate(&tax).is_err());
    }
}
