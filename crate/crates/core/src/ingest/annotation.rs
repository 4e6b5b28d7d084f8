use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Base {
    A,
    C,
    G,
    T,
}

impl Base {
    pub const ORDER: [Base; 4] = [Base::A, Base::C, Base::G, Base::T];

    pub fn parse(s: &str) -> Option<Base> {
        match s.trim() {
            "A" | "a" => Some(Base::A),
            "C" | "c" => Some(Base::C),
            "G" | "g" => Some(Base::G),
            "T" | "t" => Some(Base::T),
            _ => None,
        }
    }

    pub fn one_hot_index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        ["A", "C", "G", "T"][self as usize]
    }
}

/// Genomic context of one CpG site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpGAnnotation {
    pub cpg_id: String,
    pub chromosome: String,
    pub map_info: u64,
    pub gene: Option<String>,
    pub in_island: bool,
    pub island_start: Option<u64>,
    pub island_end: Option<u64>,
    pub next_base: Base,
    /// Absolute distance to the nearest transcription start site.
    pub tss_distance: Option<u64>,
}

impl CpGAnnotation {
    pub fn island_len(&self) -> Option<u64> {
        match (self.island_start, self.island_end) {
            (Some(s), Some(e)) => Some(e - s),
            _ => None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match (self.in_island, self.island_start, self.island_end) {
            (true, Some(s), Some(e)) if s <= e => Ok(()),
            (true, Some(s), Some(e)) => Err(format!("island start {s} after end {e}")),
            (true, _, _) => Err("in_island without island bounds".into()),
            (false, None, None) => Ok(()),
            (false, _, _) => Err("island bounds given for a site outside any island".into()),
        }
    }
}

pub const ANNOTATION_COLUMNS: [&str; 9] = [
    "cpg_id",
    "chromosome",
    "map_info",
    "gene",
    "in_island",
    "island_start",
    "island_end",
    "next_base",
    "tss_distance",
];

fn opt(s: &str) -> Option<&str> {
    let t = s.trim();
    if t.is_empty() || t == "NA" {
        None
    } else {
        Some(t)
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" | "" => Some(false),
        _ => None,
    }
}

/// Parses the annotation table. File order defines node indices.
pub fn parse_annotations(path: &Path) -> Result<Vec<CpGAnnotation>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(f);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    let mut idx = [0usize; 9];
    for (k, name) in ANNOTATION_COLUMNS.iter().enumerate() {
        idx[k] = headers
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| Error::parse(path, format!("missing column {name}")))?;
    }

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let row = line + 2;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("");
        let bad = |msg: String| Error::parse(path, format!("row {row}: {msg}"));
        let int = |k: usize| -> Result<Option<u64>> {
            match opt(get(k)) {
                None => Ok(None),
                Some(t) => t
                    .parse::<i64>()
                    .map(|v| Some(v.unsigned_abs()))
                    .map_err(|_| bad(format!("{} is not an integer: {t:?}", ANNOTATION_COLUMNS[k]))),
            }
        };

        let cpg_id = get(0).trim().to_string();
        if cpg_id.is_empty() {
            return Err(bad("empty cpg_id".into()));
        }
        let chromosome = opt(get(1))
            .ok_or_else(|| bad(format!("{cpg_id} has no chromosome")))?
            .to_string();
        let map_info = int(2)?.ok_or_else(|| bad(format!("{cpg_id} has no map_info")))?;
        let in_island =
            parse_bool(get(4)).ok_or_else(|| bad(format!("bad in_island {:?}", get(4))))?;
        let next_base =
            Base::parse(get(7)).ok_or_else(|| bad(format!("unknown base symbol {:?}", get(7))))?;
        let a = CpGAnnotation {
            gene: opt(get(3)).map(str::to_string),
            island_start: int(5)?,
            island_end: int(6)?,
            tss_distance: int(8)?,
            cpg_id,
            chromosome,
            map_info,
            in_island,
            next_base,
        };
        a.validate().map_err(|m| bad(format!("{}: {m}", a.cpg_id)))?;
        if !seen.insert(a.cpg_id.clone()) {
            return Err(bad(format!("duplicate cpg_id {}", a.cpg_id)));
        }
        out.push(a);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annots: &[CpGAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(ANNOTATION_COLUMNS).map_err(err)?;
    let o = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    for a in annots {
        w.write_record([
            a.cpg_id.clone(),
            a.chromosome.clone(),
            a.map_info.to_string(),
            a.gene.clone().unwrap_or_default(),
            if a.in_island { "1" } else { "0" }.to_string(),
            o(a.island_start),
            o(a.island_end),
            a.next_base.as_str().to_string(),
            o(a.tss_distance),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
