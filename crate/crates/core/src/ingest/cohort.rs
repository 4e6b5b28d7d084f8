use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::annotation::CpGAnnotation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl Sex {
    fn parse(s: &str) -> Option<Sex> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Some(Sex::Male),
            "female" | "f" => Some(Sex::Female),
            "" | "unknown" | "na" | "u" => Some(Sex::Unknown),
            _ => None,
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "unknown",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiseaseStatus {
    Healthy,
    Disease(String),
}

impl DiseaseStatus {
    pub fn parse(s: &str) -> DiseaseStatus {
        let t = s.trim();
        if t.is_empty() || t.eq_ignore_ascii_case("healthy") || t.eq_ignore_ascii_case("control") {
            DiseaseStatus::Healthy
        } else {
            DiseaseStatus::Disease(t.to_string())
        }
    }

    pub fn is_healthy(&self) -> bool {
        matches!(self, DiseaseStatus::Healthy)
    }

    pub fn label(&self) -> &str {
        match self {
            DiseaseStatus::Healthy => "healthy",
            DiseaseStatus::Disease(l) => l,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub age: f64,
    pub sex: Sex,
    pub disease: DiseaseStatus,
    pub dataset_id: String,
}

/// Samples × CpG beta-value matrix with per-sample metadata.
///
/// Missing beta values are stored as `NaN` until imputation.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortTable {
    pub cpg_ids: Vec<String>,
    pub samples: Vec<SampleMeta>,
    pub beta: Array2<f64>,
}

pub(crate) fn is_missing_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

impl CohortTable {
    pub fn new(cpg_ids: Vec<String>, samples: Vec<SampleMeta>, beta: Array2<f64>) -> Result<Self> {
        if beta.dim() != (samples.len(), cpg_ids.len()) {
            return Err(Error::Invalid(format!(
                "beta matrix is {:?} but there are {} samples and {} sites",
                beta.dim(),
                samples.len(),
                cpg_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate sample id {}", s.id)));
            }
            if !(s.age >= 0.0 && s.age.is_finite()) {
                return Err(Error::Invalid(format!("sample {} has invalid age {}", s.id, s.age)));
            }
        }
        Ok(CohortTable {
            cpg_ids,
            samples,
            beta,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_cpgs(&self) -> usize {
        self.cpg_ids.len()
    }

    pub fn missing_count(&self) -> usize {
        self.beta.iter().filter(|v| v.is_nan()).count()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.age).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    pub fn healthy_indices(&self) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&i| self.samples[i].disease.is_healthy())
            .collect()
    }

    pub fn disease_indices(&self) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&i| !self.samples[i].disease.is_healthy())
            .collect()
    }

    /// Reorders columns to follow `annots`, the node order of the pipeline.
    pub fn align_to(&self, annots: &[CpGAnnotation]) -> Result<CohortTable> {
        let col: HashMap<&str, usize> = self
            .cpg_ids
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let order = annots
            .iter()
            .map(|a| {
                col.get(a.cpg_id.as_str()).copied().ok_or_else(|| {
                    Error::Invalid(format!("annotated site {} missing from cohort", a.cpg_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let beta = Array2::from_shape_fn((self.n_samples(), order.len()), |(s, j)| {
            self.beta[[s, order[j]]]
        });
        Ok(CohortTable {
            cpg_ids: annots.iter().map(|a| a.cpg_id.clone()).collect(),
            samples: self.samples.clone(),
            beta,
        })
    }

    /// Rows `rows` of the beta matrix.
    pub fn beta_rows(&self, rows: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), self.n_cpgs()), |(i, j)| self.beta[[rows[i], j]])
    }

    pub fn write_csv(&self, beta_path: &Path, metadata_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(beta_path)
            .map_err(|e| Error::parse(beta_path, e.to_string()))?;
        let werr = |e: csv::Error| Error::parse(beta_path, e.to_string());
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.cpg_ids.iter().cloned());
        w.write_record(&header).map_err(werr)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut rec = vec![s.id.clone()];
            rec.extend(self.beta.row(i).iter().map(|v| {
                if v.is_nan() {
                    "NA".to_string()
                } else {
                    v.to_string()
                }
            }));
            w.write_record(&rec).map_err(werr)?;
        }
        w.flush().map_err(|e| Error::io(beta_path, e))?;

        let mut w = csv::Writer::from_path(metadata_path)
            .map_err(|e| Error::parse(metadata_path, e.to_string()))?;
        let merr = |e: csv::Error| Error::parse(metadata_path, e.to_string());
        w.write_record(["sample_id", "age", "sex", "disease", "dataset_id"])
            .map_err(merr)?;
        for s in &self.samples {
            w.write_record([
                s.id.clone(),
                s.age.to_string(),
                s.sex.to_string(),
                s.disease.label().to_string(),
                s.dataset_id.clone(),
            ])
            .map_err(merr)?;
        }
        w.flush().map_err(|e| Error::io(metadata_path, e))?;
        Ok(())
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn parse_metadata(path: &Path) -> Result<Vec<SampleMeta>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::parse(path, format!("missing column {name}")))
    };
    let (c_id, c_age, c_sex, c_dis, c_ds) = (
        col("sample_id")?,
        col("age")?,
        col("sex")?,
        col("disease")?,
        col("dataset_id")?,
    );
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let age: f64 = field(c_age).parse().map_err(|_| {
            Error::parse(path, format!("row {}: bad age {:?}", line + 2, field(c_age)))
        })?;
        if !(age >= 0.0 && age.is_finite()) {
            return Err(Error::parse(path, format!("row {}: negative age {age}", line + 2)));
        }
        let sex = Sex::parse(field(c_sex)).ok_or_else(|| {
            Error::parse(path, format!("row {}: bad sex {:?}", line + 2, field(c_sex)))
        })?;
        out.push(SampleMeta {
            id: field(c_id).to_string(),
            age,
            sex,
            disease: DiseaseStatus::parse(field(c_dis)),
            dataset_id: field(c_ds).to_string(),
        });
    }
    Ok(out)
}

/// Reads a beta matrix (first row CpG ids, first column sample id) and its
/// metadata table. Sample order follows the beta file.
pub fn parse_cohort(beta_file: &Path, metadata_file: &Path) -> Result<CohortTable> {
    let meta = parse_metadata(metadata_file)?;
    let mut meta_by_id: HashMap<String, SampleMeta> = HashMap::new();
    for m in meta {
        let id = m.id.clone();
        if meta_by_id.insert(id.clone(), m).is_some() {
            return Err(Error::parse(metadata_file, format!("duplicate sample id {id}")));
        }
    }

    let mut rdr = open_csv(beta_file)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(beta_file, e.to_string()))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::parse(beta_file, "header must list at least one CpG id"));
    }
    let cpg_ids: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut seen_cpg = HashSet::new();
    for c in &cpg_ids {
        if !seen_cpg.insert(c.as_str()) {
            return Err(Error::parse(beta_file, format!("duplicate CpG id {c}")));
        }
    }

    let mut samples = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashSet::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(beta_file, e.to_string()))?;
        let row = line + 2;
        if rec.len() != cpg_ids.len() + 1 {
            return Err(Error::parse(
                beta_file,
                format!("row {row}: expected {} fields, found {}", cpg_ids.len() + 1, rec.len()),
            ));
        }
        let id = rec[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::parse(beta_file, format!("duplicate sample id {id}")));
        }
        for (j, cell) in rec.iter().skip(1).enumerate() {
            if is_missing_token(cell) {
                values.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::parse(beta_file, format!("row {row}, {}: not a number {cell:?}", cpg_ids[j]))
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::parse(
                    beta_file,
                    format!("row {row}, {}: beta value {v} outside [0,1]", cpg_ids[j]),
                ));
            }
            values.push(v);
        }
        let m = meta_by_id.remove(&id).ok_or_else(|| {
            Error::parse(metadata_file, format!("no metadata for sample {id}"))
        })?;
        samples.push(m);
    }
    if let Some(orphan) = meta_by_id.keys().min() {
        return Err(Error::parse(
            metadata_file,
            format!("metadata sample {orphan} has no beta row"),
        ));
    }
    let beta = Array2::from_shape_vec((samples.len(), cpg_ids.len()), values)
        .map_err(|e| Error::parse(beta_file, e.to_string()))?;
    CohortTable::new(cpg_ids, samples, beta)
}
