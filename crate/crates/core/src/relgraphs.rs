//! The three relational graphs over the shared CpG node set.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{hash_f64s, hash_ids, sha256_hex};
use crate::ingest::{CpGAnnotation, NodeFeatureTemplate};

pub const BUNDLE_VERSION: &str = "relage-graphs/1";
pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Comethylation,
    SameChromosome,
    SameGene,
}

impl Relation {
    pub const ALL: [Relation; 3] = [
        Relation::Comethylation,
        Relation::SameChromosome,
        Relation::SameGene,
    ];

    /// Short label, `G1`..`G3`.
    pub fn label(self) -> &'static str {
        match self {
            Relation::Comethylation => "G1",
            Relation::SameChromosome => "G2",
            Relation::SameGene => "G3",
        }
    }
}

/// One edge relation stored as symmetric directed arcs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationalGraph {
    pub relation: Relation,
    pub n_nodes: usize,
    /// `(src, dst)` pairs.
    pub arcs: Vec<(usize, usize)>,
    pub edge_attr: Vec<f64>,
    /// In-degree per node.
    pub degrees: Vec<usize>,
    /// Mean over nodes of `ln(degree + 1)`.
    pub delta: f64,
}

pub fn degree_delta(degrees: &[usize]) -> f64 {
    if degrees.is_empty() {
        return 0.0;
    }
    degrees.iter().map(|&d| (d as f64 + 1.0).ln()).sum::<f64>() / degrees.len() as f64
}

impl RelationalGraph {
    pub fn new(
        relation: Relation,
        n_nodes: usize,
        arcs: Vec<(usize, usize)>,
        edge_attr: Vec<f64>,
    ) -> Result<Self> {
        if arcs.len() != edge_attr.len() {
            return Err(Error::Invalid(format!(
                "{} arcs but {} attributes",
                arcs.len(),
                edge_attr.len()
            )));
        }
        let mut degrees = vec![0usize; n_nodes];
        for &(s, d) in &arcs {
            if s >= n_nodes || d >= n_nodes {
                return Err(Error::Invalid(format!(
                    "arc ({s},{d}) out of range for {n_nodes} nodes"
                )));
            }
            degrees[d] += 1;
        }
        let delta = degree_delta(&degrees);
        let g = RelationalGraph {
            relation,
            n_nodes,
            arcs,
            edge_attr,
            degrees,
            delta,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn empty(relation: Relation, n_nodes: usize) -> Self {
        RelationalGraph {
            relation,
            n_nodes,
            arcs: Vec::new(),
            edge_attr: Vec::new(),
            degrees: vec![0; n_nodes],
            delta: 0.0,
        }
    }

    pub fn n_arcs(&self) -> usize {
        self.arcs.len()
    }

    /// Checks symmetry, absence of self-loops and duplicates, degree
    /// bookkeeping, and the attribute convention of the relation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("{}: {m}", self.relation.label())));
        let mut seen = BTreeMap::new();
        for (&(s, d), &a) in self.arcs.iter().zip(&self.edge_attr) {
            if s == d {
                return bad(format!("self-loop at node {s}"));
            }
            if seen.insert((s, d), a).is_some() {
                return bad(format!("duplicate arc ({s},{d})"));
            }
            if !a.is_finite() {
                return bad(format!("non-finite attribute on arc ({s},{d})"));
            }
            if self.relation != Relation::Comethylation && a != 1.0 {
                return bad(format!("attribute {a} on arc ({s},{d}), expected 1"));
            }
        }
        for (&(s, d), &a) in &seen {
            match seen.get(&(d, s)) {
                Some(&b) if b == a => {}
                _ => return bad(format!("arc ({s},{d}) has no matching reverse arc")),
            }
        }
        let mut deg = vec![0usize; self.n_nodes];
        for &(_, d) in &self.arcs {
            deg[d] += 1;
        }
        if deg != self.degrees {
            return bad("degree list does not match arcs".into());
        }
        if (degree_delta(&deg) - self.delta).abs() > 1e-12 {
            return bad("degree statistic does not match degrees".into());
        }
        Ok(())
    }

    pub fn arc_set(&self) -> HashSet<(usize, usize)> {
        self.arcs.iter().copied().collect()
    }
}

/// Co-methylation graph: arc (i, j) iff |pearson(beta[:, i], beta[:, j])| ≥
/// `threshold`, carrying the signed correlation.
///
/// `beta` holds the training samples only (samples × sites, imputed).
pub fn build_comethylation_graph(beta: &Array2<f64>, threshold: f64) -> Result<RelationalGraph> {
    let (m, n) = beta.dim();
    if m < 3 {
        return Err(Error::Invalid(format!(
            "co-methylation needs at least 3 samples, got {m}"
        )));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Invalid(format!("threshold {threshold} outside (0,1]")));
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("beta matrix has missing values; impute first".into()));
    }
    let mean = beta.mean_axis(Axis(0)).expect("m >= 3");
    let centered = beta - &mean;
    let gram = centered.t().dot(&centered);
    let usable: Vec<bool> = (0..n)
        .map(|j| {
            let scale = beta.column(j).iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
            let ok = gram[[j, j]] > 1e-24 * scale * scale * m as f64;
            if !ok {
                log::warn!("site {j} has zero variance; it gets no co-methylation edges");
            }
            ok
        })
        .collect();

    let mut weighted = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if !(usable[i] && usable[j]) {
                continue;
            }
            let r = (gram[[i, j]] / (gram[[i, i]] * gram[[j, j]]).sqrt()).clamp(-1.0, 1.0);
            if r.abs() >= threshold {
                weighted.push(((i, j), r));
                weighted.push(((j, i), r));
            }
        }
    }
    weighted.sort_by_key(|&(arc, _)| arc);
    let (arcs, attrs) = weighted.into_iter().unzip();
    RelationalGraph::new(Relation::Comethylation, n, arcs, attrs)
}

fn clique_graph<'a>(
    relation: Relation,
    labels: impl Iterator<Item = Option<&'a str>>,
) -> Result<RelationalGraph> {
    let labels: Vec<Option<&str>> = labels.collect();
    let n = labels.len();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            groups.entry(l).or_default().push(i);
        }
    }
    let mut arcs = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let Some(l) = l else { continue };
        for &j in &groups[l] {
            if j != i {
                arcs.push((i, j));
            }
        }
    }
    let attrs = vec![1.0; arcs.len()];
    RelationalGraph::new(relation, n, arcs, attrs)
}

/// One clique per chromosome.
pub fn build_chromosome_graph(annots: &[CpGAnnotation]) -> Result<RelationalGraph> {
    clique_graph(
        Relation::SameChromosome,
        annots.iter().map(|a| Some(a.chromosome.as_str())),
    )
}

/// One clique per gene label; sites without a gene stay isolated.
pub fn build_gene_graph(annots: &[CpGAnnotation]) -> Result<RelationalGraph> {
    clique_graph(Relation::SameGene, annots.iter().map(|a| a.gene.as_deref()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub threshold: f64,
    /// Digest of the training beta matrix used for correlations.
    pub beta_hash: String,
    /// Digest of the ordered sample ids used for correlations.
    pub sample_ids_hash: String,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphBundle {
    pub version: String,
    pub node_ids: Vec<String>,
    pub graphs: Vec<RelationalGraph>,
    pub provenance: Provenance,
}

impl GraphBundle {
    /// Builds all three graphs. `train_beta` rows are the training samples
    /// named by `train_ids`, columns follow `annots`.
    pub fn build(
        annots: &[CpGAnnotation],
        train_beta: &Array2<f64>,
        train_ids: &[String],
        threshold: f64,
    ) -> Result<GraphBundle> {
        if train_beta.ncols() != annots.len() {
            return Err(Error::Invalid(format!(
                "beta has {} sites, annotations list {}",
                train_beta.ncols(),
                annots.len()
            )));
        }
        if train_beta.nrows() != train_ids.len() {
            return Err(Error::Invalid("train ids do not match beta rows".into()));
        }
        let graphs = vec![
            build_comethylation_graph(train_beta, threshold)?,
            build_chromosome_graph(annots)?,
            build_gene_graph(annots)?,
        ];
        Ok(GraphBundle {
            version: BUNDLE_VERSION.into(),
            node_ids: annots.iter().map(|a| a.cpg_id.clone()).collect(),
            graphs,
            provenance: Provenance {
                threshold,
                beta_hash: hash_f64s(train_beta.iter()),
                sample_ids_hash: hash_ids(train_ids),
                n_samples: train_ids.len(),
            },
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn graph(&self, r: Relation) -> &RelationalGraph {
        &self.graphs[r as usize]
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != BUNDLE_VERSION {
            return Err(Error::Version {
                expected: BUNDLE_VERSION.into(),
                found: self.version.clone(),
            });
        }
        if self.graphs.len() != 3 {
            return Err(Error::Invalid(format!("bundle has {} graphs, expected 3", self.graphs.len())));
        }
        for (g, r) in self.graphs.iter().zip(Relation::ALL) {
            if g.relation != r {
                return Err(Error::Invalid(format!("graph slot {} holds {:?}", r.label(), g.relation)));
            }
            if g.n_nodes != self.n_nodes() {
                return Err(Error::Invalid(format!(
                    "{} has {} nodes, bundle lists {}",
                    r.label(),
                    g.n_nodes,
                    self.n_nodes()
                )));
            }
            g.validate()?;
        }
        Ok(())
    }

    /// Errors unless the bundle's node list matches the feature template.
    pub fn check_template(&self, template: &NodeFeatureTemplate) -> Result<()> {
        if self.n_nodes() != template.n_nodes() {
            return Err(Error::Invalid(format!(
                "graph bundle has {} nodes, feature template {}",
                self.n_nodes(),
                template.n_nodes()
            )));
        }
        if self.node_ids != template.cpg_ids {
            return Err(Error::Invalid("graph bundle node ids differ from annotations".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Content digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().expect("bundle serializes").as_bytes())
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(f), Compression::default());
        enc.write_all(text.as_bytes()).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = BufWriter::new(f);
        w.write_all(text.as_bytes()).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    let res = if is_gz(path) {
        GzDecoder::new(BufReader::new(f)).read_to_string(&mut s)
    } else {
        BufReader::new(f).read_to_string(&mut s)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(s)
}

/// Writes the bundle as JSON, gzip-compressed when the path ends in `.gz`.
pub fn save_graphs(path: &Path, bundle: &GraphBundle) -> Result<()> {
    write_text(path, &bundle.to_json()?)
}

pub fn load_graphs(path: &Path) -> Result<GraphBundle> {
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("<none>");
    if found != BUNDLE_VERSION {
        return Err(Error::Version {
            expected: BUNDLE_VERSION.into(),
            found: found.into(),
        });
    }
    let bundle: GraphBundle =
        serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))?;
    bundle.validate()?;
    Ok(bundle)
}
