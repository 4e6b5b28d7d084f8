use std::fs;
use std::path::{Path, PathBuf};

use relage_core::evaluation::{
    ablation_table, age_acceleration, cohort_sensitivity, mixed_precision, regression_metrics,
    stratified_aa, MetricReport,
};
use relage_core::explain::{aggregate_explanations, explain_samples};
use relage_core::ingest::{
    build_node_features, knn_impute, parse_annotations, parse_cohort, synth_cohort,
    write_annotations, CohortTable, CpGAnnotation, NodeFeatureTemplate, FEATURE_NAMES,
};
use relage_core::model::{GraphSet, ModelParams};
use relage_core::relgraphs::{load_graphs, save_graphs, GraphBundle, Relation};
use relage_core::training::{
    initial_params, make_split, predict_batch, train_on_split, write_log_csv, SampleSet, SplitPlan,
    StopReason,
};
use relage_core::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Config;

/// Resolved configuration plus the run directory every artifact lives in.
pub struct Run {
    pub cfg: Config,
    pub dir: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Run {
    pub fn new(cfg: Config) -> Self {
        let dir = cfg.run_dir();
        Run { cfg, dir }
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        Ok(self.dir.join(name))
    }

    /// Configured path, else the run-directory default; must exist.
    fn input(&self, configured: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let p = configured.clone().unwrap_or_else(|| self.dir.join(default));
        if !p.exists() {
            return Err(io_err(
                &p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "required input is missing"),
            ));
        }
        Ok(p)
    }

    fn graphs_path(&self) -> PathBuf {
        self.cfg.paths.graphs.clone().unwrap_or_else(|| self.dir.join("graphs.json.gz"))
    }

    fn params_path(&self) -> PathBuf {
        self.cfg.paths.params.clone().unwrap_or_else(|| self.dir.join("params.json"))
    }

    /// Annotations, node feature template and the aligned, imputed cohort.
    fn load_data(&self) -> Result<(Vec<CpGAnnotation>, NodeFeatureTemplate, CohortTable)> {
        self.cfg.check_impute()?;
        let p = &self.cfg.paths;
        let annots = parse_annotations(&self.input(&p.annotations, "annotations.csv")?)?;
        let cohort = parse_cohort(
            &self.input(&p.beta, "beta.csv")?,
            &self.input(&p.metadata, "metadata.csv")?,
        )?
        .align_to(&annots)?;
        let cohort = if cohort.missing_count() > 0 {
            log::info!("imputing {} missing values", cohort.missing_count());
            knn_impute(&cohort, self.cfg.impute.k)?
        } else {
            cohort
        };
        let template = build_node_features(&annots);
        Ok((annots, template, cohort))
    }

    fn load_split(&self) -> Result<SplitPlan> {
        let path = self.input(&None, "split.json")?;
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            message: e.to_string(),
        })
    }

    fn load_bundle(&self, template: &NodeFeatureTemplate) -> Result<GraphBundle> {
        let bundle = load_graphs(&self.input(&self.cfg.paths.graphs, "graphs.json.gz")?)?;
        bundle.check_template(template)?;
        Ok(bundle)
    }

    fn load_params(&self, bundle: &GraphBundle) -> Result<ModelParams> {
        let path = self.input(&self.cfg.paths.params, "params.json")?;
        let (params, hash) = ModelParams::load(&path)?;
        if hash.as_deref() != Some(bundle.hash().as_str()) {
            return Err(Error::Invalid(format!(
                "{} was trained against a different graph bundle",
                path.display()
            )));
        }
        if params.arch.n_nodes != bundle.n_nodes() {
            return Err(Error::Invalid("parameter node count differs from graph bundle".into()));
        }
        Ok(params)
    }

    pub fn synth(&self) -> Result<Value> {
        let s = synth_cohort(&self.cfg.synth, self.cfg.training.seed)?;
        let (beta, meta, annots) = (self.out("beta.csv")?, self.out("metadata.csv")?, self.out("annotations.csv")?);
        s.cohort.write_csv(&beta, &meta)?;
        write_annotations(&annots, &s.annotations)?;
        write_json(&self.out("synth_truth.json")?, &s.truth)?;
        Ok(json!({
            "n_samples": s.cohort.n_samples(),
            "n_cpgs": s.cohort.n_cpgs(),
            "n_disease": s.cohort.disease_indices().len(),
            "missing": s.cohort.missing_count(),
        }))
    }

    pub fn build_graphs(&self) -> Result<Value> {
        self.cfg.check_graph()?;
        let (annots, _, cohort) = self.load_data()?;
        let split = make_split(&cohort, self.cfg.training.seed)?;
        let index = cohort.id_index();
        let rows: Vec<usize> = split.train_ids.iter().map(|id| index[id.as_str()]).collect();
        let bundle = GraphBundle::build(&annots, &cohort.beta_rows(&rows), &split.train_ids, self.cfg.graph.threshold)?;
        write_json(&self.out("split.json")?, &split)?;
        let path = self.graphs_path();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        save_graphs(&path, &bundle)?;
        let arcs: Vec<Value> = Relation::ALL
            .iter()
            .map(|&r| json!({"graph": r.label(), "arcs": bundle.graph(r).n_arcs()}))
            .collect();
        Ok(json!({
            "graphs": path,
            "bundle_hash": bundle.hash(),
            "arcs": arcs,
            "split": {"test": split.test_ids.len(), "train": split.train_ids.len(), "val": split.val_ids.len()},
        }))
    }

    pub fn train(&self) -> Result<Value> {
        self.cfg.training.validate()?;
        let (_, template, cohort) = self.load_data()?;
        let split = self.load_split()?;
        let bundle = self.load_bundle(&template)?;
        let arch = self.cfg.architecture(bundle.n_nodes())?;
        let train_set = SampleSet::from_cohort(&template, &cohort, &split.train_ids)?;
        let init = initial_params(arch, &train_set.ages)?;
        let out = train_on_split(init, &bundle, &template, &cohort, &split, &self.cfg.training, [true; 3])?;
        let params_path = self.params_path();
        if let Some(parent) = params_path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        out.params.save(&params_path, Some(&bundle.hash()))?;
        write_log_csv(&self.out("training_log.csv")?, &out.log)?;
        if let StopReason::Diverged { epoch } = out.stop {
            return Err(Error::Diverged { epoch });
        }
        let best = out.best_epoch.checked_sub(1).map(|i| &out.log[i]);
        Ok(json!({
            "params": params_path,
            "epochs": out.log.len(),
            "best_epoch": out.best_epoch,
            "val_mae": best.map(|r| r.val_mae),
            "stop": out.stop,
        }))
    }

    fn test_predictions(&self) -> Result<(CohortTable, NodeFeatureTemplate, GraphBundle, ModelParams, SplitPlan)> {
        let (_, template, cohort) = self.load_data()?;
        let split = self.load_split()?;
        let bundle = self.load_bundle(&template)?;
        let params = self.load_params(&bundle)?;
        Ok((cohort, template, bundle, params, split))
    }

    pub fn evaluate(&self) -> Result<Value> {
        let (cohort, template, bundle, params, split) = self.test_predictions()?;
        let graphs = GraphSet::from_bundle(&bundle)?;
        let preds = predict_batch(&params, &graphs, &template, &cohort, &split.test_ids)?;
        let index = cohort.id_index();
        let ages: Vec<f64> = split.test_ids.iter().map(|id| cohort.samples[index[id.as_str()]].age).collect();
        let m = regression_metrics(&ages, &preds)?;
        write_json(&self.out("metrics.json")?, &m)?;
        write_csv(
            &self.out("metrics.csv")?,
            &["n", "mae", "mse", "frc"],
            &[vec![m.n.to_string(), m.mae.to_string(), m.mse.to_string(), opt(m.frc)]],
        )?;
        let rows: Vec<Vec<String>> = split
            .test_ids
            .iter()
            .zip(ages.iter().zip(&preds))
            .map(|(id, (y, p))| vec![id.clone(), y.to_string(), p.to_string()])
            .collect();
        write_csv(&self.out("test_predictions.csv")?, &["sample_id", "age", "predicted_age"], &rows)?;
        Ok(serde_json::to_value(m)?)
    }

    pub fn aa_report(&self) -> Result<Value> {
        self.cfg.check_bins()?;
        let (cohort, template, bundle, params, split) = self.test_predictions()?;
        let graphs = GraphSet::from_bundle(&bundle)?;
        let disease_ids: Vec<String> = cohort
            .disease_indices()
            .into_iter()
            .map(|i| cohort.samples[i].id.clone())
            .collect();
        let ids: Vec<String> = split.test_ids.iter().chain(&disease_ids).cloned().collect();
        let preds = predict_batch(&params, &graphs, &template, &cohort, &ids)?;
        let index = cohort.id_index();
        let metas: Vec<_> = ids.iter().map(|id| &cohort.samples[index[id.as_str()]]).collect();
        let ages: Vec<f64> = metas.iter().map(|m| m.age).collect();
        let groups: Vec<String> = metas.iter().map(|m| m.disease.label().to_string()).collect();
        let aa = age_acceleration(&ages, &preds)?;
        let n_h = split.test_ids.len();
        let (healthy_aa, disease_aa) = aa.split_at(n_h);

        let rows: Vec<Vec<String>> = (0..ids.len())
            .map(|i| {
                vec![
                    ids[i].clone(),
                    ages[i].to_string(),
                    preds[i].to_string(),
                    aa[i].to_string(),
                    groups[i].clone(),
                ]
            })
            .collect();
        write_csv(&self.out("aa_samples.csv")?, &["sample_id", "age", "predicted_age", "aa", "group"], &rows)?;
        let strata = stratified_aa(&ages, &groups, &aa, &self.cfg.age_bins)?;
        let rows: Vec<Vec<String>> = strata
            .iter()
            .map(|r| vec![r.bin.label(), r.group.clone(), r.count.to_string(), opt(r.mean_aa)])
            .collect();
        write_csv(&self.out("aa_stratified.csv")?, &["age_bin", "group", "count", "mean_aa"], &rows)?;
        let summary = json!({
            "n_healthy": healthy_aa.len(),
            "n_disease": disease_aa.len(),
            "healthy_positive_fraction": if healthy_aa.is_empty() { None } else { Some(cohort_sensitivity(healthy_aa)?) },
            "disease_sensitivity": if disease_aa.is_empty() { None } else { Some(cohort_sensitivity(disease_aa)?) },
            "mixed_precision": mixed_precision(healthy_aa, disease_aa),
        });
        write_json(&self.out("aa_summary.json")?, &summary)?;
        Ok(summary)
    }

    pub fn explain(&self) -> Result<Value> {
        self.cfg.check_explain()?;
        let (cohort, template, bundle, params, split) = self.test_predictions()?;
        let graphs = GraphSet::from_bundle(&bundle)?;
        let mut ids = split.test_ids.clone();
        if let Some(cap) = self.cfg.explain.max_samples {
            ids.truncate(cap);
        }
        let data = SampleSet::from_cohort(&template, &cohort, &ids)?;
        let reports = explain_samples(&params, &graphs, &data.ids, &data.features, self.cfg.explain.ig_steps)?;
        let agg = aggregate_explanations(&reports, &data.ages, self.cfg.explain.top_k)?;

        let dir = self.out("explanations")?;
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for r in &reports {
            write_json(&dir.join(format!("{}.json", r.sample_id)), &r.to_json())?;
        }
        let rows: Vec<Vec<String>> = FEATURE_NAMES
            .iter()
            .zip(&agg.feature_importance)
            .map(|(n, v)| vec![n.to_string(), v.to_string()])
            .collect();
        write_csv(&self.out("feature_importance.csv")?, &["feature", "importance"], &rows)?;
        let rows: Vec<Vec<String>> = Relation::ALL
            .iter()
            .zip(&agg.graph_importance)
            .map(|(r, v)| vec![r.label().to_string(), v.to_string()])
            .collect();
        write_csv(&self.out("graph_importance.csv")?, &["graph", "importance"], &rows)?;
        let rows: Vec<Vec<String>> = (0..template.n_nodes())
            .map(|i| {
                vec![
                    template.cpg_ids[i].clone(),
                    agg.node_importance[i].to_string(),
                    agg.node_age_slope[i].to_string(),
                ]
            })
            .collect();
        write_csv(&self.out("node_trends.csv")?, &["cpg_id", "mean_importance", "age_slope"], &rows)?;
        let names = |v: &[usize]| -> Vec<String> { v.iter().map(|&i| template.cpg_ids[i].clone()).collect() };
        let summary = json!({
            "n_samples": reports.len(),
            "top_nodes": names(&agg.top_nodes),
            "top_increasing": names(&agg.top_increasing),
            "top_decreasing": names(&agg.top_decreasing),
            "graph_importance": agg.graph_importance,
            "max_completeness_gap": reports.iter().map(|r| r.ig.completeness_gap).fold(0.0, f64::max),
        });
        write_json(&self.out("explain_summary.json")?, &summary)?;
        Ok(summary)
    }

    pub fn ablate(&self) -> Result<Value> {
        self.cfg.training.validate()?;
        let (_, template, cohort) = self.load_data()?;
        let split = self.load_split()?;
        let bundle = self.load_bundle(&template)?;
        let arch = self.cfg.architecture(bundle.n_nodes())?;
        let table = ablation_table(&bundle, &template, &cohort, &split, &arch, &self.cfg.training)?;
        let rows: Vec<Vec<String>> = table
            .iter()
            .map(|r| {
                let MetricReport { mae, mse, frc, n } = r.metrics;
                vec![r.variant.clone(), n.to_string(), mae.to_string(), mse.to_string(), opt(frc)]
            })
            .collect();
        write_csv(&self.out("ablation.csv")?, &["variant", "n", "mae", "mse", "frc"], &rows)?;
        Ok(json!({ "rows": table.len(), "variants": table }))
    }
}
