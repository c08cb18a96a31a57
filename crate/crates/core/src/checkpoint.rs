//! Checkpoint files: a magic line, one JSON header line, then every tensor
//! as raw little-endian `f32` in header order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compact::CompactionReport;
use crate::error::{Error, Result};
use crate::gates::{GateConfig, GateParam};
use crate::model::{Model, ModelConfig};
use crate::plan::{build_plan, GateSet, PlanOptions, PlanSummary, PrunePlan};
use crate::tensor::Tensor;

pub const MAGIC: &str = "PRUNEKIT CHECKPOINT";
pub const VERSION: u32 = 1;

/// Provenance of a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `pretrain`, `clone` or `compact`.
    pub kind: String,
    pub seed: u64,
    pub pipeline: Option<String>,
    /// Speaker row adapted by cloning.
    pub speaker: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub gate_config: GateConfig,
    pub plan_options: PlanOptions,
    /// Learned gates, if the model was ever trained with masks.
    pub gates: Option<GateSet<f32>>,
    pub step: u64,
    pub meta: CheckpointMeta,
    /// Set when this model was produced by compaction.
    pub compaction: Option<CompactionReport>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    gate_config: GateConfig,
    plan_options: PlanOptions,
    plan: PlanSummary,
    step: u64,
    meta: CheckpointMeta,
    compaction: Option<CompactionReport>,
    tensors: Vec<Entry>,
    gates: Vec<Entry>,
}

impl Checkpoint {
    pub fn plan(&self) -> Result<PrunePlan> {
        build_plan(&self.model.config, self.plan_options)
    }

    /// Learned gates, or fresh ones at the configured initial logit.
    pub fn gates_or_init(&self, plan: &PrunePlan) -> Result<GateSet<f32>> {
        match &self.gates {
            Some(g) => Ok(g.clone()),
            None => GateSet::new(plan, &self.gate_config),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let plan = self.plan()?;
        let entry = |name: &str, t: &Tensor<f32>| Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        };
        let gates: Vec<&GateParam<f32>> = self.gates.iter().flat_map(|g| g.iter()).collect();
        let header = Header {
            version: VERSION,
            model: self.model.config.clone(),
            gate_config: self.gate_config.clone(),
            plan_options: self.plan_options,
            plan: plan.summary(),
            step: self.step,
            meta: self.meta.clone(),
            compaction: self.compaction.clone(),
            tensors: self.model.params.iter().map(|(k, v)| entry(k, v)).collect(),
            gates: gates.iter().map(|g| entry(&g.name, &g.log_alpha)).collect(),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        writeln!(out, "{MAGIC} v{VERSION}").expect("write to vec");
        writeln!(out, "{json}").expect("write to vec");
        let tensors = self.model.params.values().chain(gates.iter().map(|g| &g.log_alpha));
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let bad = |m: String| Error::Checkpoint(m);
        let mut magic = String::new();
        r.read_line(&mut magic).map_err(|e| bad(e.to_string()))?;
        let version = magic
            .trim_end()
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .ok_or_else(|| bad("not a checkpoint file".into()))?;
        if version != VERSION.to_string() {
            return Err(bad(format!("format version {version} is not supported (expected {VERSION})")));
        }
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        let header: Header = serde_json::from_str(&line).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(bad(format!("header version {} is not supported", header.version)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| bad(e.to_string()))?;

        let mut cursor = 0usize;
        let mut take = |e: &Entry| -> Result<Tensor<f32>> {
            let n: usize = e.shape.iter().product();
            let bytes = payload
                .get(cursor..cursor + 4 * n)
                .ok_or_else(|| bad(format!("payload ends inside `{}`", e.name)))?;
            cursor += 4 * n;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(e.shape.clone(), data)
        };
        let mut params = indexmap::IndexMap::new();
        for e in &header.tensors {
            params.insert(e.name.clone(), take(e)?);
        }
        let model = Model {
            config: header.model,
            params,
        };
        model.config.validate()?;
        model.validate()?;

        let plan = build_plan(&model.config, header.plan_options)?;
        if plan.summary() != header.plan {
            return Err(bad("stored plan does not match the model configuration".into()));
        }
        let gates = if header.gates.is_empty() {
            None
        } else {
            let mut set = GateSet {
                gates: vec![None; plan.dims.len()],
            };
            for e in &header.gates {
                let d = plan
                    .dim_by_name(&e.name)
                    .filter(|&d| plan.dims[d].enabled)
                    .ok_or_else(|| bad(format!("gate `{}` matches no enabled dimension", e.name)))?;
                if e.shape != [plan.dims[d].extent] {
                    return Err(bad(format!("gate `{}` has shape {:?}", e.name, e.shape)));
                }
                set.gates[d] = Some(GateParam::with_logits(e.name.clone(), take(e)?, header.gate_config.clone())?);
            }
            if let Some((_, d)) = plan.enabled_dims().find(|(i, _)| set.gates[*i].is_none()) {
                return Err(bad(format!("gate `{}` is missing", d.name)));
            }
            Some(set)
        };
        if cursor != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - cursor)));
        }
        Ok(Self {
            model,
            gate_config: header.gate_config,
            plan_options: header.plan_options,
            gates,
            step: header.step,
            meta: header.meta,
            compaction: header.compaction,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn sample(with_gates: bool) -> Checkpoint {
        let config = ModelSpec {
            vocab_size: 7,
            d: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_k: 4,
            d_f: 6,
            adaptor_hidden: 3,
            postnet_hidden: 3,
            n_mel: 4,
            n_speakers: 2,
            ..ModelSpec::default()
        }
        .build()
        .unwrap();
        let model = Model::init(config, 3).unwrap();
        let plan_options = PlanOptions::default();
        let gates = with_gates.then(|| {
            let plan = build_plan(&model.config, plan_options).unwrap();
            let mut g = GateSet::new(&plan, &GateConfig::default()).unwrap();
            for (i, gp) in g.gates.iter_mut().flatten().enumerate() {
                gp.log_alpha.data_mut()[0] = -(i as f32) - 0.3;
            }
            g
        });
        Checkpoint {
            model,
            gate_config: GateConfig::default(),
            plan_options,
            gates,
            step: 42,
            meta: CheckpointMeta {
                kind: "clone".into(),
                seed: 5,
                pipeline: Some("joint".into()),
                speaker: Some(1),
            },
            compaction: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_gates in [false, true] {
            let ck = sample(with_gates);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_reader(bytes.as_slice()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let bytes = sample(true).to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes[..30]).replace("v1", "v9");
        let mut other = text.into_bytes();
        other.extend_from_slice(&bytes[30..]);
        let err = Checkpoint::from_reader(other.as_slice()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        assert!(Checkpoint::from_reader(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_reader(&b"hello\n"[..]).is_err());
    }
}
