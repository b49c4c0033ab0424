//! Model checkpoints: `checkpoint.json` plus one ELST file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::elst;
use crate::optim::AdamState;
use crate::phantom::{read_json, write_json};
use crate::segnet::{ConstantSegmenter, GroundTruthOracle, NetConfig, SegNetwork, Segmenter};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelKind {
    Network,
    /// Returns each sample's stored mask; for testing the evaluation path.
    GroundTruth,
    Constant {
        class: u8,
    },
}

/// Enough to resume the trainer's deterministic streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub t: u64,
    pub m: Vec<String>,
    pub v: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelKind,
    pub net: Option<NetConfig>,
    pub stage: String,
    pub step: u64,
    pub rng: RngState,
    pub config_hash: String,
    pub param_hash: Option<String>,
    pub params: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub network: Option<SegNetwork<f32>>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn network(
        net: &SegNetwork<f32>,
        optimizer: Option<&AdamState<f32>>,
        stage: &str,
        rng: RngState,
        config_hash: &str,
    ) -> Self {
        Self {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                model: ModelKind::Network,
                net: Some(net.config().clone()),
                stage: stage.into(),
                step: rng.step,
                rng,
                config_hash: config_hash.into(),
                param_hash: Some(net.param_hash()),
                params: Vec::new(),
                optimizer: None,
            },
            network: Some(net.clone()),
            optimizer: optimizer.cloned(),
        }
    }

    /// A parameter-free checkpoint for one of the oracle models.
    pub fn oracle(model: ModelKind) -> Self {
        Self {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                model,
                net: None,
                stage: "oracle".into(),
                step: 0,
                rng: RngState { seed: 0, step: 0 },
                config_hash: String::new(),
                param_hash: None,
                params: Vec::new(),
                optimizer: None,
            },
            network: None,
            optimizer: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = self.manifest.clone();
        manifest.params.clear();
        manifest.optimizer = None;
        if let Some(net) = &self.network {
            fs::create_dir_all(dir.join("params")).map_err(|e| Error::io(dir, e))?;
            for (name, p) in net.names().iter().zip(net.params()) {
                let file = format!("params/{name}.elst");
                elst::write_tensor(&dir.join(&file), p)?;
                manifest.params.push(TensorEntry {
                    name: name.clone(),
                    file,
                    dims: p.dims().to_vec(),
                });
            }
            if let Some(opt) = &self.optimizer {
                fs::create_dir_all(dir.join("adam")).map_err(|e| Error::io(dir, e))?;
                let mut entry = OptimizerEntry {
                    t: opt.t,
                    m: Vec::new(),
                    v: Vec::new(),
                };
                for (i, (name, p)) in net.names().iter().zip(net.params()).enumerate() {
                    for (tag, buf, list) in [
                        ("m", &opt.m[i], &mut entry.m),
                        ("v", &opt.v[i], &mut entry.v),
                    ] {
                        let file = format!("adam/{tag}.{name}.elst");
                        elst::write_file(&dir.join(&file), p.dims(), buf)?;
                        list.push(file);
                    }
                }
                manifest.optimizer = Some(entry);
            }
        }
        write_json(&dir.join(CHECKPOINT_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_FILE))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint format version {} is not supported",
                manifest.format_version
            )));
        }
        let (network, optimizer) = match manifest.model {
            ModelKind::Network => {
                let cfg = manifest.net.clone().ok_or_else(|| {
                    Error::Validation("network checkpoint without architecture".into())
                })?;
                let named = manifest
                    .params
                    .iter()
                    .map(|e| {
                        let t = elst::read_tensor(&dir.join(&e.file))?;
                        if t.dims() != e.dims.as_slice() {
                            return Err(Error::Validation(format!(
                                "{} dims disagree with manifest",
                                e.name
                            )));
                        }
                        Ok((e.name.clone(), t))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let net = SegNetwork::from_parts(cfg, named)?;
                if manifest
                    .param_hash
                    .as_deref()
                    .is_some_and(|h| h != net.param_hash())
                {
                    return Err(Error::Validation(
                        "checkpoint parameters do not match their hash".into(),
                    ));
                }
                let opt = match &manifest.optimizer {
                    None => None,
                    Some(o) => {
                        let read = |files: &[String]| {
                            files
                                .iter()
                                .map(|f| elst::read_file::<f32>(&dir.join(f)).map(|(_, d)| d))
                                .collect::<Result<Vec<_>>>()
                        };
                        Some(AdamState {
                            t: o.t,
                            m: read(&o.m)?,
                            v: read(&o.v)?,
                        })
                    }
                };
                (Some(net), opt)
            }
            _ => (None, None),
        };
        Ok(Self {
            manifest,
            network,
            optimizer,
        })
    }

    pub fn segmenter(&self) -> Box<dyn Segmenter + '_> {
        match (self.manifest.model, &self.network) {
            (ModelKind::Network, Some(net)) => Box::new(net),
            (ModelKind::Constant { class }, _) => Box::new(ConstantSegmenter(class)),
            _ => Box::new(GroundTruthOracle),
        }
    }
}
