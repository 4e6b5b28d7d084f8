use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::ingest::N_FEATURES;
use crate::relgraphs::{read_text, write_text};

pub const PARAMS_VERSION: &str = "relage-params/1";
pub const N_AGGREGATORS: usize = 4;
pub const N_SCALERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub n_nodes: usize,
    pub n_features: usize,
    /// Width of PNA messages.
    pub d_mid: usize,
    /// Width of each branch representation.
    pub d_hidden: usize,
    pub gate_hidden: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Architecture {
    pub fn new(n_nodes: usize) -> Self {
        Architecture {
            n_nodes,
            n_features: N_FEATURES,
            d_mid: 16,
            d_hidden: 64,
            gate_hidden: 64,
            head_hidden: 512,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn pre_in(&self) -> usize {
        2 * self.n_features + 1
    }

    pub fn post_in(&self) -> usize {
        self.n_features + N_AGGREGATORS * N_SCALERS * self.d_mid
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.n_features == 0 || self.d_mid == 0 || self.d_hidden == 0 {
            return Err(Error::Invalid("architecture dimensions must be positive".into()));
        }
        if self.gate_hidden == 0 || self.head_hidden == 0 {
            return Err(Error::Invalid("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Affine map `x · weight + bias` with `weight` stored in × out.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            weight: Matrix::zeros((n_in, n_out)),
            bias: Matrix::zeros((1, n_out)),
        }
    }

    /// Uniform in ±1/sqrt(fan_in) for weights and bias.
    fn uniform(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        Linear {
            weight: Matrix::from_shape_simple_fn((n_in, n_out), &mut draw),
            bias: Matrix::from_shape_simple_fn((1, n_out), &mut draw),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnaBranchParams {
    /// `[x_target ‖ x_source ‖ edge_attr]` → message.
    pub pre: Linear,
    /// `[x_i ‖ 12 scaled aggregates]` → branch representation.
    pub post: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// Per-node compression of the fused representation to one channel.
    pub merge: Linear,
    pub hidden: Linear,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub branches: [PnaBranchParams; 3],
    pub gate: GateParams,
    pub head: HeadParams,
}

#[derive(Serialize, Deserialize)]
struct StoredBlock {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredParams {
    version: String,
    architecture: Architecture,
    graph_bundle_hash: Option<String>,
    blocks: Vec<StoredBlock>,
}

impl ModelParams {
    pub fn init(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let branch = |rng: &mut ChaCha8Rng| PnaBranchParams {
            pre: Linear::uniform(arch.pre_in(), arch.d_mid, rng),
            post: Linear::uniform(arch.post_in(), arch.d_hidden, rng),
        };
        let branches = [branch(&mut rng), branch(&mut rng), branch(&mut rng)];
        let gate = GateParams {
            hidden: Linear::uniform(3 * arch.d_hidden, arch.gate_hidden, &mut rng),
            out: Linear::uniform(arch.gate_hidden, 3, &mut rng),
        };
        let head = HeadParams {
            merge: Linear::uniform(arch.d_hidden, 1, &mut rng),
            hidden: Linear::uniform(arch.n_nodes, arch.head_hidden, &mut rng),
            ln_gain: Matrix::ones((1, arch.head_hidden)),
            ln_bias: Matrix::zeros((1, arch.head_hidden)),
            out: Linear::uniform(arch.head_hidden, 1, &mut rng),
        };
        Ok(ModelParams {
            arch,
            branches,
            gate,
            head,
        })
    }

    /// Every weight zero, layer-norm gain included.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let branch = || PnaBranchParams {
            pre: Linear::zeros(arch.pre_in(), arch.d_mid),
            post: Linear::zeros(arch.post_in(), arch.d_hidden),
        };
        Ok(ModelParams {
            branches: [branch(), branch(), branch()],
            gate: GateParams {
                hidden: Linear::zeros(3 * arch.d_hidden, arch.gate_hidden),
                out: Linear::zeros(arch.gate_hidden, 3),
            },
            head: HeadParams {
                merge: Linear::zeros(arch.d_hidden, 1),
                hidden: Linear::zeros(arch.n_nodes, arch.head_hidden),
                ln_gain: Matrix::zeros((1, arch.head_hidden)),
                ln_bias: Matrix::zeros((1, arch.head_hidden)),
                out: Linear::zeros(arch.head_hidden, 1),
            },
            arch,
        })
    }

    /// Parameter blocks in canonical order with stable names.
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(20);
        for (k, b) in self.branches.iter().enumerate() {
            let p = format!("branch{}", k + 1);
            out.push((format!("{p}.pre.weight"), &b.pre.weight));
            out.push((format!("{p}.pre.bias"), &b.pre.bias));
            out.push((format!("{p}.post.weight"), &b.post.weight));
            out.push((format!("{p}.post.bias"), &b.post.bias));
        }
        let g = &self.gate;
        out.push(("gate.hidden.weight".into(), &g.hidden.weight));
        out.push(("gate.hidden.bias".into(), &g.hidden.bias));
        out.push(("gate.out.weight".into(), &g.out.weight));
        out.push(("gate.out.bias".into(), &g.out.bias));
        let h = &self.head;
        out.push(("head.merge.weight".into(), &h.merge.weight));
        out.push(("head.merge.bias".into(), &h.merge.bias));
        out.push(("head.hidden.weight".into(), &h.hidden.weight));
        out.push(("head.hidden.bias".into(), &h.hidden.bias));
        out.push(("head.ln.gain".into(), &h.ln_gain));
        out.push(("head.ln.bias".into(), &h.ln_bias));
        out.push(("head.out.weight".into(), &h.out.weight));
        out.push(("head.out.bias".into(), &h.out.bias));
        out
    }

    /// Mutable view of the blocks, same order as [`ModelParams::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::with_capacity(20);
        for b in self.branches.iter_mut() {
            out.push(&mut b.pre.weight);
            out.push(&mut b.pre.bias);
            out.push(&mut b.post.weight);
            out.push(&mut b.post.bias);
        }
        let g = &mut self.gate;
        out.extend([&mut g.hidden.weight, &mut g.hidden.bias, &mut g.out.weight, &mut g.out.bias]);
        let h = &mut self.head;
        out.extend([
            &mut h.merge.weight,
            &mut h.merge.bias,
            &mut h.hidden.weight,
            &mut h.hidden.bias,
            &mut h.ln_gain,
            &mut h.ln_bias,
            &mut h.out.weight,
            &mut h.out.bias,
        ]);
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn to_json(&self, graph_bundle_hash: Option<&str>) -> Result<String> {
        let stored = StoredParams {
            version: PARAMS_VERSION.into(),
            architecture: self.arch.clone(),
            graph_bundle_hash: graph_bundle_hash.map(str::to_string),
            blocks: self
                .blocks()
                .into_iter()
                .map(|(name, m)| StoredBlock {
                    name,
                    rows: m.nrows(),
                    cols: m.ncols(),
                    data: m.iter().copied().collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    /// Parses parameters, returning them with the recorded graph bundle hash.
    pub fn from_json(text: &str) -> Result<(ModelParams, Option<String>)> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("<none>");
        if found != PARAMS_VERSION {
            return Err(Error::Version {
                expected: PARAMS_VERSION.into(),
                found: found.into(),
            });
        }
        let stored: StoredParams = serde_json::from_value(value)?;
        let mut params = ModelParams::zeros(stored.architecture)?;
        let names: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
        if stored.blocks.len() != names.len() {
            return Err(Error::Invalid(format!(
                "parameter file has {} blocks, expected {}",
                stored.blocks.len(),
                names.len()
            )));
        }
        for ((slot, name), block) in params.blocks_mut().into_iter().zip(&names).zip(stored.blocks) {
            if &block.name != name || (block.rows, block.cols) != slot.dim() {
                return Err(Error::Invalid(format!(
                    "block {} ({}x{}) does not fit {} {:?}",
                    block.name,
                    block.rows,
                    block.cols,
                    name,
                    slot.dim()
                )));
            }
            *slot = Matrix::from_shape_vec((block.rows, block.cols), block.data)
                .map_err(|e| Error::Invalid(e.to_string()))?;
        }
        Ok((params, stored.graph_bundle_hash))
    }

    pub fn save(&self, path: &Path, graph_bundle_hash: Option<&str>) -> Result<()> {
        write_text(path, &self.to_json(graph_bundle_hash)?)
    }

    pub fn load(path: &Path) -> Result<(ModelParams, Option<String>)> {
        let text = read_text(path)?;
        ModelParams::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::parse(path, j.to_string()),
            other => other,
        })
    }
}
