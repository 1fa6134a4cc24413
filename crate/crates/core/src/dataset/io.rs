//! File formats: interactions as TSV, item and user metadata as JSON lines.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeedbackKind, Interaction};
use crate::error::{Error, Result};

pub const INTERACTIONS_HEADER: &str = "user_id\titem_id\trating\ttimestamp";

/// One line of the item metadata file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub numeric: Vec<f64>,
}

/// One line of the user metadata file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMeta {
    pub user_id: String,
    pub group: String,
    #[serde(default)]
    pub profile: Vec<f64>,
}

pub fn parse_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let file = fs::File::open(path)?;
    parse_interactions_from(BufReader::new(file))
}

pub fn parse_interactions_from<R: BufRead>(reader: R) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if idx == 0 {
            if line.trim_end() != INTERACTIONS_HEADER {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected header `{INTERACTIONS_HEADER}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let it = parse_row(&line).map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        if !seen.insert((it.user_id.clone(), it.item_id.clone(), it.timestamp)) {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "duplicate interaction ({}, {}, {})",
                    it.user_id, it.item_id, it.timestamp
                ),
            });
        }
        out.push(it);
    }
    Ok(out)
}

fn parse_row(line: &str) -> std::result::Result<Interaction, String> {
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", fields.len()));
    }
    let (user_id, item_id) = (fields[0].trim(), fields[1].trim());
    if user_id.is_empty() || item_id.is_empty() {
        return Err("empty user or item id".into());
    }
    let rating = match fields[2].trim() {
        "-" => None,
        s => {
            let r: f64 = s.parse().map_err(|_| format!("bad rating `{s}`"))?;
            if !(0.0..=5.0).contains(&r) {
                return Err(format!("rating {r} outside [0, 5]"));
            }
            Some(r)
        }
    };
    let ts_field = fields[3].trim();
    let timestamp: i64 = ts_field
        .parse()
        .map_err(|_| format!("bad timestamp `{ts_field}`"))?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    Ok(Interaction {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        rating,
        timestamp,
        feedback_kind: if rating.is_some() {
            FeedbackKind::Explicit
        } else {
            FeedbackKind::Implicit
        },
    })
}

pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{INTERACTIONS_HEADER}")?;
    for it in interactions {
        let rating = match it.rating {
            Some(r) => format!("{r:?}"),
            None => "-".to_string(),
        };
        writeln!(f, "{}\t{}\t{}\t{}", it.user_id, it.item_id, rating, it.timestamp)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
