//! Synthetic cohorts with a planted, invertible aging signal.
//!
//! Clock sites follow `beta = logistic(a_c + b_c · age_eff) + noise`, clipped
//! to [0,1]; every other site is noise around a site-specific level. Disease
//! samples age faster: `age_eff = age + disease_shift_years`.

use ndarray::{Array2, ArrayView1};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotation::{Base, CpGAnnotation};
use super::cohort::{CohortTable, DiseaseStatus, SampleMeta, Sex};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cpg: usize,
    pub n_samples: usize,
    pub n_clock_sites: usize,
    pub noise_sd: f64,
    pub n_chromosomes: usize,
    pub n_genes: usize,
    /// Share of sites annotated with a gene.
    pub gene_fraction: f64,
    pub island_fraction: f64,
    pub tss_missing_fraction: f64,
    pub disease_shift_years: f64,
    pub disease_fraction: f64,
    pub disease_label: String,
    pub age_min: f64,
    pub age_max: f64,
    /// Range of |b_c|, the per-year logit slope of a clock site.
    pub slope_min: f64,
    pub slope_max: f64,
    /// Share of beta cells blanked out to exercise imputation.
    pub missing_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cpg: 300,
            n_samples: 1250,
            n_clock_sites: 60,
            noise_sd: 0.03,
            n_chromosomes: 22,
            n_genes: 60,
            gene_fraction: 0.5,
            island_fraction: 0.4,
            tss_missing_fraction: 0.2,
            disease_shift_years: 5.0,
            disease_fraction: 0.2,
            disease_label: "disease".into(),
            age_min: 18.0,
            age_max: 90.0,
            slope_min: 0.01,
            slope_max: 0.03,
            missing_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn n_disease(&self) -> usize {
        (self.n_samples as f64 * self.disease_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_clock_sites > self.n_cpg {
            return bad(format!(
                "n_clock_sites {} exceeds n_cpg {}",
                self.n_clock_sites, self.n_cpg
            ));
        }
        if !(0.0..=1.0).contains(&self.disease_fraction) {
            return bad(format!("disease_fraction {} outside [0,1]", self.disease_fraction));
        }
        for (name, v) in [
            ("gene_fraction", self.gene_fraction),
            ("island_fraction", self.island_fraction),
            ("tss_missing_fraction", self.tss_missing_fraction),
            ("missing_fraction", self.missing_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0,1]"));
            }
        }
        if self.n_cpg == 0 || self.n_samples == 0 || self.n_chromosomes == 0 {
            return bad("n_cpg, n_samples and n_chromosomes must be positive".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd {} must be a non-negative number", self.noise_sd));
        }
        if !(self.age_min >= 0.0 && self.age_max > self.age_min) {
            return bad(format!("age range [{}, {}] is invalid", self.age_min, self.age_max));
        }
        if !(self.slope_min > 0.0 && self.slope_max >= self.slope_min) {
            return bad(format!(
                "slope range [{}, {}] is invalid",
                self.slope_min, self.slope_max
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SiteModel {
    Clock { intercept: f64, slope: f64 },
    Static { level: f64 },
}

/// The generator parameters behind a synthetic cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTruth {
    pub sites: Vec<SiteModel>,
    pub clock_sites: Vec<usize>,
    pub disease_shift_years: f64,
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl GeneratorTruth {
    /// Noise-free beta of `site` at an effective age.
    pub fn expected_beta(&self, site: usize, age_effective: f64) -> f64 {
        match self.sites[site] {
            SiteModel::Clock { intercept, slope } => logistic(intercept + slope * age_effective),
            SiteModel::Static { level } => level,
        }
    }

    /// Age estimate that inverts every clock site's curve and averages.
    pub fn invert_age(&self, beta: ArrayView1<f64>) -> f64 {
        let est: Vec<f64> = self
            .clock_sites
            .iter()
            .map(|&c| match self.sites[c] {
                SiteModel::Clock { intercept, slope } => {
                    let p = beta[c].clamp(1e-6, 1.0 - 1e-6);
                    ((p / (1.0 - p)).ln() - intercept) / slope
                }
                SiteModel::Static { .. } => unreachable!("clock site list holds clock sites"),
            })
            .collect();
        est.iter().sum::<f64>() / est.len() as f64
    }
}

pub struct SynthCohort {
    pub cohort: CohortTable,
    pub annotations: Vec<CpGAnnotation>,
    pub truth: GeneratorTruth,
}

pub fn synth_cohort(config: &SynthConfig, seed: u64) -> Result<SynthCohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_cpg;
    let m = config.n_samples;

    let mut clock_sites = index::sample(&mut rng, n, config.n_clock_sites).into_vec();
    clock_sites.sort_unstable();
    let mut is_clock = vec![false; n];
    for &c in &clock_sites {
        is_clock[c] = true;
    }
    let age_mid = 0.5 * (config.age_min + config.age_max);
    let sites: Vec<SiteModel> = (0..n)
        .map(|c| {
            if is_clock[c] {
                let magnitude = rng.random_range(config.slope_min..=config.slope_max);
                let slope = if rng.random_bool(0.5) { magnitude } else { -magnitude };
                let mid: f64 = rng.random_range(0.25..0.75);
                SiteModel::Clock {
                    intercept: (mid / (1.0 - mid)).ln() - slope * age_mid,
                    slope,
                }
            } else {
                SiteModel::Static {
                    level: rng.random_range(0.05..0.95),
                }
            }
        })
        .collect();
    let truth = GeneratorTruth {
        sites,
        clock_sites,
        disease_shift_years: config.disease_shift_years,
    };

    let annotations = synth_annotations(config, &mut rng);

    let n_disease = config.n_disease();
    let mut status: Vec<bool> = (0..m).map(|i| i < n_disease).collect();
    status.shuffle(&mut rng);
    let noise = Normal::new(0.0, config.noise_sd)
        .map_err(|e| Error::Invalid(format!("noise_sd: {e}")))?;

    let mut samples = Vec::with_capacity(m);
    let mut beta = Array2::zeros((m, n));
    for (s, &diseased) in status.iter().enumerate() {
        let age: f64 = rng.random_range(config.age_min..=config.age_max);
        let age = (age * 10.0).round() / 10.0;
        let sex = if rng.random_bool(0.5) { Sex::Male } else { Sex::Female };
        let age_eff = if diseased {
            age + config.disease_shift_years
        } else {
            age
        };
        for c in 0..n {
            let v = truth.expected_beta(c, age_eff) + noise.sample(&mut rng);
            beta[[s, c]] = v.clamp(0.0, 1.0);
        }
        samples.push(SampleMeta {
            id: format!("S{:05}", s + 1),
            age,
            sex,
            disease: if diseased {
                DiseaseStatus::Disease(config.disease_label.clone())
            } else {
                DiseaseStatus::Healthy
            },
            dataset_id: "synthetic".into(),
        });
    }
    if config.missing_fraction > 0.0 {
        for v in beta.iter_mut() {
            if rng.random_bool(config.missing_fraction) {
                *v = f64::NAN;
            }
        }
    }

    let cohort = CohortTable::new(
        annotations.iter().map(|a| a.cpg_id.clone()).collect(),
        samples,
        beta,
    )?;
    Ok(SynthCohort {
        cohort,
        annotations,
        truth,
    })
}

fn synth_annotations(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<CpGAnnotation> {
    (0..config.n_cpg)
        .map(|c| {
            let chromosome = format!("chr{}", rng.random_range(1..=config.n_chromosomes));
            let map_info = rng.random_range(10_000u64..250_000_000);
            let gene = (config.n_genes > 0 && rng.random_bool(config.gene_fraction))
                .then(|| format!("GENE{}", rng.random_range(1..=config.n_genes)));
            let in_island = rng.random_bool(config.island_fraction);
            let (island_start, island_end) = if in_island {
                let len = rng.random_range(200u64..3_000);
                let start = map_info.saturating_sub(rng.random_range(0..len));
                (Some(start), Some(start + len))
            } else {
                (None, None)
            };
            let next_base = Base::ORDER[rng.random_range(0..4)];
            let tss_distance = (!rng.random_bool(config.tss_missing_fraction))
                .then(|| rng.random_range(0u64..200_000));
            CpGAnnotation {
                cpg_id: format!("cg{:08}", c + 1),
                chromosome,
                map_info,
                gene,
                in_island,
                island_start,
                island_end,
                next_base,
                tss_distance,
            }
        })
        .collect()
}
