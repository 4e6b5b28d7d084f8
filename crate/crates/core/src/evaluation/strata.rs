use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open age interval `[lo, hi)`; `hi = None` is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeBin {
    pub lo: f64,
    pub hi: Option<f64>,
}

impl AgeBin {
    pub fn contains(&self, age: f64) -> bool {
        age >= self.lo && self.hi.is_none_or(|h| age < h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("[{}, {})", self.lo, h),
            None => format!("[{}, inf)", self.lo),
        }
    }
}

pub fn default_age_bins() -> Vec<AgeBin> {
    let edges = [0.0, 20.0, 45.0, 55.0, 65.0, 80.0];
    let mut bins: Vec<AgeBin> = edges
        .windows(2)
        .map(|w| AgeBin {
            lo: w[0],
            hi: Some(w[1]),
        })
        .collect();
    bins.push(AgeBin { lo: 80.0, hi: None });
    bins
}

pub fn validate_bins(bins: &[AgeBin]) -> Result<()> {
    for b in bins {
        if !b.lo.is_finite() || b.hi.is_some_and(|h| h.partial_cmp(&b.lo) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::Invalid(format!("age bin {} is empty or malformed", b.label())));
        }
    }
    for (i, a) in bins.iter().enumerate() {
        for b in &bins[i + 1..] {
            let a_hi = a.hi.unwrap_or(f64::INFINITY);
            let b_hi = b.hi.unwrap_or(f64::INFINITY);
            if a.lo < b_hi && b.lo < a_hi {
                return Err(Error::Invalid(format!(
                    "age bins {} and {} overlap",
                    a.label(),
                    b.label()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub bin: AgeBin,
    pub group: String,
    pub count: usize,
    /// Absent for empty cells.
    pub mean_aa: Option<f64>,
}

/// Mean AA per (bin, group); groups keep first-appearance order.
pub fn stratified_aa(ages: &[f64], groups: &[String], aa: &[f64], bins: &[AgeBin]) -> Result<Vec<StratumRow>> {
    if ages.len() != aa.len() || groups.len() != aa.len() {
        return Err(Error::Shape {
            op: "stratified_aa",
            detail: format!("{} ages, {} groups, {} AA values", ages.len(), groups.len(), aa.len()),
        });
    }
    validate_bins(bins)?;
    let mut order: Vec<&str> = Vec::new();
    for g in groups {
        if !order.contains(&g.as_str()) {
            order.push(g);
        }
    }
    let mut rows = Vec::with_capacity(bins.len() * order.len());
    for bin in bins {
        for &g in &order {
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..aa.len() {
                if groups[i] == g && bin.contains(ages[i]) {
                    sum += aa[i];
                    count += 1;
                }
            }
            rows.push(StratumRow {
                bin: *bin,
                group: g.to_string(),
                count,
                mean_aa: (count > 0).then(|| sum / count as f64),
            });
        }
    }
    Ok(rows)
}
