use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView1};

use super::annotation::CpGAnnotation;
use crate::error::{Error, Result};

/// Column names of the node feature matrix, methylation first.
pub const FEATURE_NAMES: [&str; 11] = [
    "methylation",
    "cpg_island",
    "cpg_island_len",
    "next_base_a",
    "next_base_c",
    "next_base_g",
    "next_base_t",
    "island_start",
    "island_end",
    "tss_distance",
    "map_info",
];

pub const N_FEATURES: usize = FEATURE_NAMES.len();
pub const METHYLATION_COL: usize = 0;

/// Static per-site features plus one dynamic methylation slot.
///
/// Normalization: island length by the cohort's longest island, island
/// bounds by the largest island end, TSS distance by the largest observed
/// distance (missing maps to 1), and map position by the largest position on
/// the same chromosome.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatureTemplate {
    pub cpg_ids: Vec<String>,
    /// N × 10 static block (every column of [`FEATURE_NAMES`] but the first).
    pub static_features: Array2<f64>,
}

fn ratio(v: u64, max: u64) -> f64 {
    if max == 0 {
        0.0
    } else {
        v as f64 / max as f64
    }
}

pub fn build_node_features(annots: &[CpGAnnotation]) -> NodeFeatureTemplate {
    let max_len = annots.iter().filter_map(|a| a.island_len()).max().unwrap_or(0);
    let max_end = annots.iter().filter_map(|a| a.island_end).max().unwrap_or(0);
    let max_tss = annots.iter().filter_map(|a| a.tss_distance).max().unwrap_or(0);
    let mut max_pos: HashMap<&str, u64> = HashMap::new();
    for a in annots {
        let e = max_pos.entry(a.chromosome.as_str()).or_insert(0);
        *e = (*e).max(a.map_info);
    }

    let mut x = Array2::zeros((annots.len(), N_FEATURES - 1));
    for (i, a) in annots.iter().enumerate() {
        let mut row = x.row_mut(i);
        if a.in_island {
            row[0] = 1.0;
            row[1] = ratio(a.island_len().unwrap_or(0), max_len);
            row[6] = ratio(a.island_start.unwrap_or(0), max_end);
            row[7] = ratio(a.island_end.unwrap_or(0), max_end);
        }
        row[2 + a.next_base.one_hot_index()] = 1.0;
        row[8] = match a.tss_distance {
            Some(d) => ratio(d, max_tss),
            None => 1.0,
        };
        row[9] = ratio(a.map_info, max_pos[a.chromosome.as_str()]);
    }
    NodeFeatureTemplate {
        cpg_ids: annots.iter().map(|a| a.cpg_id.clone()).collect(),
        static_features: x,
    }
}

impl NodeFeatureTemplate {
    pub fn n_nodes(&self) -> usize {
        self.cpg_ids.len()
    }

    /// Node feature matrix X (N × 11) for one sample's methylation profile.
    pub fn instantiate(&self, methylation: ArrayView1<f64>) -> Result<Array2<f64>> {
        if methylation.len() != self.n_nodes() {
            return Err(Error::Shape {
                op: "instantiate",
                detail: format!("{} values for {} nodes", methylation.len(), self.n_nodes()),
            });
        }
        if methylation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("methylation profile has missing values".into()));
        }
        let mut x = Array2::zeros((self.n_nodes(), N_FEATURES));
        x.column_mut(METHYLATION_COL).assign(&methylation);
        x.slice_mut(s![.., 1..]).assign(&self.static_features);
        Ok(x)
    }
}
