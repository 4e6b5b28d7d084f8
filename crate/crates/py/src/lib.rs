//! Python bindings for relage-core: cohorts, splits, graph bundles, models,
//! training, metrics and explanations.

use pyo3::exceptions::{PyOSError, PyTypeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyList, PyString};
use relage_core::evaluation::{self, ablation_table};
use relage_core::explain::{aggregate_explanations, explain_samples, DEFAULT_IG_STEPS};
use relage_core::ingest::{
    build_node_features, knn_impute, parse_annotations, parse_cohort, synth_cohort,
    write_annotations, CohortTable, CpGAnnotation, NodeFeatureTemplate, SynthConfig, FEATURE_NAMES,
};
use relage_core::model::{Architecture, BranchMask, GraphSet, ModelParams, ALL_BRANCHES};
use relage_core::relgraphs::{load_graphs, save_graphs, GraphBundle, DEFAULT_THRESHOLD};
use relage_core::training::{
    initial_params, make_split, predict_samples, train_on_split, SampleSet, SplitPlan, TrainConfig,
};
use relage_core::Error;
use serde_json::{json, Map, Value};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for relage_core::Result<T> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => PyFloat::new(py, n.as_f64().unwrap_or(f64::NAN)).into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let items = items.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

/// Keyword arguments as a JSON object of scalars.
fn kwargs_to_json(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Value> {
    let mut map = Map::new();
    let Some(kwargs) = kwargs else {
        return Ok(Value::Object(map));
    };
    for (k, v) in kwargs.iter() {
        let key: String = k.extract()?;
        let value = if v.is_none() {
            Value::Null
        } else if v.is_instance_of::<PyBool>() {
            Value::Bool(v.extract()?)
        } else if let Ok(i) = v.extract::<i64>() {
            json!(i)
        } else if let Ok(x) = v.extract::<f64>() {
            json!(x)
        } else if let Ok(s) = v.extract::<String>() {
            Value::String(s)
        } else {
            return Err(PyTypeError::new_err(format!("{key}: expected a number, bool or string")));
        };
        map.insert(key, value);
    }
    Ok(Value::Object(map))
}

fn from_kwargs<T: serde::de::DeserializeOwned>(what: &str, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    serde_json::from_value(kwargs_to_json(kwargs)?).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn branch_mask(branches: Option<Vec<bool>>) -> PyResult<BranchMask> {
    match branches {
        None => Ok(ALL_BRANCHES),
        Some(b) => <BranchMask>::try_from(b.as_slice())
            .map_err(|_| PyValueError::new_err("branches must list three flags")),
    }
}

/// Methylation cohort aligned to its CpG annotations.
#[pyclass(name = "Cohort", module = "relage", frozen)]
struct PyCohort {
    cohort: CohortTable,
    annots: Vec<CpGAnnotation>,
    template: NodeFeatureTemplate,
}

impl PyCohort {
    fn new(cohort: CohortTable, annots: Vec<CpGAnnotation>) -> Self {
        let template = build_node_features(&annots);
        PyCohort { cohort, annots, template }
    }

    fn samples(&self, ids: &[String]) -> PyResult<SampleSet> {
        SampleSet::from_cohort(&self.template, &self.cohort, ids).or_raise()
    }
}

#[pymethods]
impl PyCohort {
    /// Simulated cohort; keyword arguments override generator settings.
    #[staticmethod]
    #[pyo3(signature = (seed=0, **config))]
    fn synthetic(seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: SynthConfig = from_kwargs("synthetic", config)?;
        let s = synth_cohort(&cfg, seed).or_raise()?;
        Ok(PyCohort::new(s.cohort, s.annotations))
    }

    /// Reads CSV files and fills missing values by KNN when any are present.
    #[staticmethod]
    #[pyo3(signature = (beta, metadata, annotations, impute_k=5))]
    fn load(beta: std::path::PathBuf, metadata: std::path::PathBuf, annotations: std::path::PathBuf, impute_k: usize) -> PyResult<Self> {
        let annots = parse_annotations(&annotations).or_raise()?;
        let mut cohort = parse_cohort(&beta, &metadata).or_raise()?.align_to(&annots).or_raise()?;
        if cohort.missing_count() > 0 {
            cohort = knn_impute(&cohort, impute_k).or_raise()?;
        }
        Ok(PyCohort::new(cohort, annots))
    }

    fn save(&self, beta: std::path::PathBuf, metadata: std::path::PathBuf, annotations: std::path::PathBuf) -> PyResult<()> {
        self.cohort.write_csv(&beta, &metadata).or_raise()?;
        write_annotations(&annotations, &self.annots).or_raise()
    }

    #[pyo3(signature = (k=5))]
    fn impute(&self, k: usize) -> PyResult<Self> {
        let cohort = knn_impute(&self.cohort, k).or_raise()?;
        Ok(PyCohort::new(cohort, self.annots.clone()))
    }

    #[getter]
    fn sample_ids(&self) -> Vec<String> {
        self.cohort.samples.iter().map(|s| s.id.clone()).collect()
    }

    #[getter]
    fn cpg_ids(&self) -> Vec<String> {
        self.cohort.cpg_ids.clone()
    }

    #[getter]
    fn ages(&self) -> Vec<f64> {
        self.cohort.ages()
    }

    #[getter]
    fn healthy_ids(&self) -> Vec<String> {
        self.cohort.healthy_indices().into_iter().map(|i| self.cohort.samples[i].id.clone()).collect()
    }

    #[getter]
    fn disease_ids(&self) -> Vec<String> {
        self.cohort.disease_indices().into_iter().map(|i| self.cohort.samples[i].id.clone()).collect()
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.cohort.n_samples()
    }

    #[getter]
    fn n_cpgs(&self) -> usize {
        self.cohort.n_cpgs()
    }

    #[getter]
    fn missing_count(&self) -> usize {
        self.cohort.missing_count()
    }

    fn age(&self, sample_id: &str) -> PyResult<f64> {
        let i = self.index(sample_id)?;
        Ok(self.cohort.samples[i].age)
    }

    /// Beta values of one sample in CpG order; missing values are NaN.
    fn beta(&self, sample_id: &str) -> PyResult<Vec<f64>> {
        let i = self.index(sample_id)?;
        Ok(self.cohort.beta.row(i).to_vec())
    }

    fn index(&self, sample_id: &str) -> PyResult<usize> {
        self.cohort
            .index_of(sample_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown sample id {sample_id}")))
    }

    fn __len__(&self) -> usize {
        self.cohort.n_samples()
    }

    fn __repr__(&self) -> String {
        format!(
            "Cohort(samples={}, cpgs={}, healthy={})",
            self.cohort.n_samples(),
            self.cohort.n_cpgs(),
            self.cohort.healthy_indices().len()
        )
    }
}

/// Healthy samples partitioned into train, validation and test ids.
#[pyclass(name = "Split", module = "relage", frozen)]
struct PySplit {
    plan: SplitPlan,
}

#[pymethods]
impl PySplit {
    #[getter]
    fn seed(&self) -> u64 {
        self.plan.seed
    }

    #[getter]
    fn train_ids(&self) -> Vec<String> {
        self.plan.train_ids.clone()
    }

    #[getter]
    fn val_ids(&self) -> Vec<String> {
        self.plan.val_ids.clone()
    }

    #[getter]
    fn test_ids(&self) -> Vec<String> {
        self.plan.test_ids.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.plan).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let plan = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PySplit { plan })
    }

    fn __repr__(&self) -> String {
        format!(
            "Split(train={}, val={}, test={}, seed={})",
            self.plan.train_ids.len(),
            self.plan.val_ids.len(),
            self.plan.test_ids.len(),
            self.plan.seed
        )
    }
}

#[pyfunction]
#[pyo3(signature = (cohort, seed=0))]
fn split(cohort: &PyCohort, seed: u64) -> PyResult<PySplit> {
    Ok(PySplit {
        plan: make_split(&cohort.cohort, seed).or_raise()?,
    })
}

/// Co-methylation, same-chromosome and same-gene graphs over the CpG sites.
#[pyclass(name = "Graphs", module = "relage", frozen)]
struct PyGraphs {
    bundle: GraphBundle,
    set: GraphSet,
}

impl PyGraphs {
    fn new(bundle: GraphBundle) -> PyResult<Self> {
        let set = GraphSet::from_bundle(&bundle).or_raise()?;
        Ok(PyGraphs { bundle, set })
    }
}

#[pymethods]
impl PyGraphs {
    /// Builds the graphs from the split's training samples.
    #[staticmethod]
    #[pyo3(signature = (cohort, split, threshold=DEFAULT_THRESHOLD))]
    fn build(cohort: &PyCohort, split: &PySplit, threshold: f64) -> PyResult<Self> {
        let index = cohort.cohort.id_index();
        let rows = split
            .plan
            .train_ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| PyValueError::new_err(format!("unknown sample id {id}")))
            })
            .collect::<PyResult<Vec<_>>>()?;
        let beta = cohort.cohort.beta_rows(&rows);
        PyGraphs::new(GraphBundle::build(&cohort.annots, &beta, &split.plan.train_ids, threshold).or_raise()?)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        PyGraphs::new(load_graphs(&path).or_raise()?)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        save_graphs(&path, &self.bundle).or_raise()
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.bundle.n_nodes()
    }

    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.bundle.node_ids.clone()
    }

    /// Directed arc count per relation.
    fn n_arcs<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for g in &self.bundle.graphs {
            d.set_item(g.relation.label(), g.n_arcs())?;
        }
        Ok(d)
    }

    fn hash(&self) -> String {
        self.bundle.hash()
    }

    fn __repr__(&self) -> String {
        let arcs: Vec<String> = self.bundle.graphs.iter().map(|g| g.n_arcs().to_string()).collect();
        format!("Graphs(nodes={}, arcs=[{}])", self.bundle.n_nodes(), arcs.join(", "))
    }
}

/// Model parameters plus the hash of the graphs they were trained with.
#[pyclass(name = "Model", module = "relage", frozen)]
struct PyModel {
    params: ModelParams,
    graphs_hash: Option<String>,
}

#[pymethods]
impl PyModel {
    /// Fresh parameters with the output bias at the mean training age.
    #[staticmethod]
    #[pyo3(signature = (cohort, split, graphs, d_mid=None, head_hidden=None, dropout=None, seed=0))]
    fn init(
        cohort: &PyCohort,
        split: &PySplit,
        graphs: &PyGraphs,
        d_mid: Option<usize>,
        head_hidden: Option<usize>,
        dropout: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let base = Architecture::new(graphs.bundle.n_nodes());
        let arch = Architecture {
            d_mid: d_mid.unwrap_or(base.d_mid),
            head_hidden: head_hidden.unwrap_or(base.head_hidden),
            dropout: dropout.unwrap_or(base.dropout),
            seed,
            ..base
        };
        arch.validate().or_raise()?;
        let train = cohort.samples(&split.plan.train_ids)?;
        Ok(PyModel {
            params: initial_params(arch, &train.ages).or_raise()?,
            graphs_hash: None,
        })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let (params, graphs_hash) = ModelParams::load(&path).or_raise()?;
        Ok(PyModel { params, graphs_hash })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.params.save(&path, self.graphs_hash.as_deref()).or_raise()
    }

    /// Eval-mode predicted ages; every sample when `ids` is omitted.
    #[pyo3(signature = (cohort, graphs, ids=None, branches=None))]
    fn predict(
        &self,
        py: Python<'_>,
        cohort: &PyCohort,
        graphs: &PyGraphs,
        ids: Option<Vec<String>>,
        branches: Option<Vec<bool>>,
    ) -> PyResult<Vec<f64>> {
        let mask = branch_mask(branches)?;
        graphs.bundle.check_template(&cohort.template).or_raise()?;
        let ids = ids.unwrap_or_else(|| cohort.sample_ids());
        let data = cohort.samples(&ids)?;
        py.detach(|| predict_samples(&self.params, &graphs.set, &data, mask)).or_raise()
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.params.n_parameters()
    }

    #[getter]
    fn graphs_hash(&self) -> Option<String> {
        self.graphs_hash.clone()
    }

    fn architecture<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let v = serde_json::to_value(&self.params.arch).map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_to_py(py, &v)
    }

    fn __repr__(&self) -> String {
        format!("Model(nodes={}, parameters={})", self.params.arch.n_nodes, self.params.n_parameters())
    }
}

/// Trains `model` on the split and returns the best checkpoint with its
/// epoch log. Keyword arguments override training settings.
#[pyfunction]
#[pyo3(signature = (cohort, graphs, split, model, branches=None, **config))]
fn train<'py>(
    py: Python<'py>,
    cohort: &PyCohort,
    graphs: &PyGraphs,
    split: &PySplit,
    model: &PyModel,
    branches: Option<Vec<bool>>,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let cfg: TrainConfig = from_kwargs("train", config)?;
    let mask = branch_mask(branches)?;
    let init = model.params.clone();
    let out = py
        .detach(|| train_on_split(init, &graphs.bundle, &cohort.template, &cohort.cohort, &split.plan, &cfg, mask))
        .or_raise()?;
    let summary = json!({
        "best_epoch": out.best_epoch,
        "stop": out.stop,
        "log": out.log,
    });
    let trained = PyModel {
        params: out.params,
        graphs_hash: Some(graphs.bundle.hash()),
    };
    Ok((trained, json_to_py(py, &summary)?))
}

/// Retrains every branch subset with `model`'s architecture and scores each
/// on the test ids.
#[pyfunction]
#[pyo3(signature = (cohort, graphs, split, model, **config))]
fn ablate<'py>(
    py: Python<'py>,
    cohort: &PyCohort,
    graphs: &PyGraphs,
    split: &PySplit,
    model: &PyModel,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TrainConfig = from_kwargs("ablate", config)?;
    let rows = py
        .detach(|| ablation_table(&graphs.bundle, &cohort.template, &cohort.cohort, &split.plan, &model.params.arch, &cfg))
        .or_raise()?;
    json_to_py(py, &serde_json::to_value(rows).map_err(|e| PyValueError::new_err(e.to_string()))?)
}

/// MAE, MSE and the regression slope of predictions on ages.
#[pyfunction]
fn regression_metrics<'py>(py: Python<'py>, y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let m = evaluation::regression_metrics(&y, &y_hat).or_raise()?;
    json_to_py(py, &json!({ "mae": m.mae, "mse": m.mse, "frc": m.frc, "n": m.n }))
}

#[pyfunction]
fn age_acceleration(y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<Vec<f64>> {
    evaluation::age_acceleration(&y, &y_hat).or_raise()
}

#[pyfunction]
fn cohort_sensitivity(aa: Vec<f64>) -> PyResult<f64> {
    evaluation::cohort_sensitivity(&aa).or_raise()
}

/// Integrated gradients and branch occlusion for each sample, plus the
/// cohort aggregate with the top CpG ids.
#[pyfunction]
#[pyo3(signature = (model, graphs, cohort, ids, steps=DEFAULT_IG_STEPS, top_k=20))]
fn explain<'py>(
    py: Python<'py>,
    model: &PyModel,
    graphs: &PyGraphs,
    cohort: &PyCohort,
    ids: Vec<String>,
    steps: usize,
    top_k: usize,
) -> PyResult<Bound<'py, PyAny>> {
    graphs.bundle.check_template(&cohort.template).or_raise()?;
    let data = cohort.samples(&ids)?;
    let (reports, agg) = py
        .detach(|| {
            let reports = explain_samples(&model.params, &graphs.set, &data.ids, &data.features, steps)?;
            let agg = aggregate_explanations(&reports, &data.ages, top_k)?;
            Ok::<_, Error>((reports, agg))
        })
        .or_raise()?;
    let names = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| graphs.bundle.node_ids[i].clone()).collect() };
    let summary = json!({
        "samples": reports.iter().map(|r| r.to_json()).collect::<Vec<_>>(),
        "feature_names": FEATURE_NAMES,
        "feature_importance": agg.feature_importance,
        "graph_importance": agg.graph_importance,
        "node_importance": agg.node_importance,
        "node_age_slope": agg.node_age_slope,
        "top_nodes": names(&agg.top_nodes),
        "top_increasing": names(&agg.top_increasing),
        "top_decreasing": names(&agg.top_decreasing),
    });
    json_to_py(py, &summary)
}

#[pymodule]
fn relage(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCohort>()?;
    m.add_class::<PySplit>()?;
    m.add_class::<PyGraphs>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(regression_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(age_acceleration, m)?)?;
    m.add_function(wrap_pyfunction!(cohort_sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add("FEATURE_NAMES", FEATURE_NAMES.to_vec())?;
    m.add("DEFAULT_IG_STEPS", DEFAULT_IG_STEPS)?;
    Ok(())
}
