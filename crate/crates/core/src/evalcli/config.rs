//! Run configuration, checked against the published JSON schema before
//! typed decoding.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::AttentionKernel;
use crate::dataio::{DatasetManifest, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::grid::RegionBox;
use crate::model::ModelConfig;
use crate::train::{TrainConfig, TrainMode};

/// The schema every configuration file must satisfy.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../../schema/run_config.schema.json");

pub const DESK_LEADS: [u32; 6] = [12, 24, 36, 48, 60, 72];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub attention: AttentionKernel,
    pub aggregation_attention: AttentionKernel,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    /// `None` selects every dataset variable.
    pub inputs: Option<Vec<String>>,
    pub targets: Option<Vec<String>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            depth: 2,
            n_heads: 4,
            mlp_ratio: 2,
            patch_size: 2,
            attention: AttentionKernel::default(),
            aggregation_attention: AttentionKernel::default(),
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            inputs: None,
            targets: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `None` evaluates the training leads.
    pub leads: Option<Vec<u32>>,
    pub max_windows: Option<usize>,
    pub split: Split,
    pub bias_maps: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            leads: None,
            max_windows: Some(64),
            split: Split::Test,
            bias_maps: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    /// `None` derives splits from the dataset years.
    pub split: Option<SplitSpec>,
    pub region: String,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let base = TrainConfig {
            steps_per_epoch: Some(100),
            max_val_windows: Some(64),
            ..TrainConfig::default()
        };
        Self {
            model: ModelSection::default(),
            split: None,
            region: "mena".into(),
            pretrain: TrainConfig {
                lead_times: DESK_LEADS.to_vec(),
                ..base.clone()
            },
            finetune: TrainConfig {
                mode: TrainMode::Lora,
                lead_times: vec![72],
                ..base
            },
            eval: EvalSection::default(),
        }
    }
}

fn schema_validator() -> &'static jsonschema::Validator {
    static V: OnceLock<jsonschema::Validator> = OnceLock::new();
    V.get_or_init(|| {
        let schema: Value = serde_json::from_str(RUN_CONFIG_SCHEMA).expect("schema is valid JSON");
        jsonschema::validator_for(&schema).expect("schema compiles")
    })
}

impl RunConfig {
    /// Rejects schema violations (listing every failing location), then
    /// decodes and checks cross-field constraints.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        Self::from_value(doc)
    }

    pub fn from_value(doc: Value) -> Result<Self> {
        let problems: Vec<String> = schema_validator()
            .iter_errors(&doc)
            .map(|e| {
                let at = e.instance_path().to_string();
                format!("{}: {e}", if at.is_empty() { "/" } else { at.as_str() })
            })
            .collect();
        if !problems.is_empty() {
            return Err(Error::Config(format!("config violates the schema:\n  {}", problems.join("\n  "))));
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.region_box()?;
        if let Some(s) = &self.split {
            s.validate()?;
        }
        if matches!(&self.eval.leads, Some(l) if l.is_empty() || l.contains(&0)) {
            return Err(Error::Config("eval.leads must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn region_box(&self) -> Result<RegionBox> {
        RegionBox::parse(&self.region)
    }

    /// Explicit splits, or the dataset's last year for test, the one before
    /// for validation and the rest for training.
    pub fn split_for(&self, manifest: &DatasetManifest) -> Result<SplitSpec> {
        if let Some(s) = &self.split {
            return Ok(s.clone());
        }
        let years: BTreeSet<i32> = (0..manifest.n_times()).map(|t| manifest.year_of(t)).collect();
        let y: Vec<i32> = years.into_iter().collect();
        if y.len() < 3 {
            return Err(Error::Config(format!(
                "dataset spans {} calendar year(s); deriving splits needs ≥ 3, otherwise set `split`",
                y.len()
            )));
        }
        let n = y.len();
        SplitSpec::new(y[..n - 2].iter().copied(), [y[n - 2]], [y[n - 1]])
    }

    /// Model configuration for a dataset; training leads become the model's
    /// declared leads.
    pub fn model_config(&self, manifest: &DatasetManifest) -> Result<ModelConfig> {
        let m = &self.model;
        let all = manifest.variables.clone();
        let cfg = ModelConfig {
            embed_dim: m.embed_dim,
            depth: m.depth,
            n_heads: m.n_heads,
            mlp_ratio: m.mlp_ratio,
            patch_size: m.patch_size,
            attention: m.attention,
            aggregation_attention: m.aggregation_attention,
            layer_norm_eps: m.layer_norm_eps,
            init_std: m.init_std,
            lead_times: self.pretrain.lead_times.clone(),
            ..ModelConfig::desk(
                manifest.grid.clone(),
                m.inputs.clone().unwrap_or_else(|| all.clone()),
                m.targets.clone().unwrap_or(all),
            )
        };
        cfg.validate()?;
        manifest.variable_indices(&cfg.input_variables)?;
        manifest.variable_indices(&cfg.target_variables)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
        if let Value::Object(m) = v {
            for (k, x) in m {
                let p = format!("{prefix}/{k}");
                out.push(p.clone());
                keys(x, &p, out);
            }
        }
    }

    #[test]
    fn defaults_satisfy_the_schema_and_cover_it() {
        let d = RunConfig::default();
        let v = d.to_value().unwrap();
        assert_eq!(RunConfig::from_value(v.clone()).unwrap(), d);
        assert_eq!(RunConfig::from_json("{}").unwrap(), d);
        // every serialized key is declared somewhere in the schema
        let mut ks = Vec::new();
        keys(&v, "", &mut ks);
        for k in ks {
            let leaf = k.rsplit('/').next().unwrap();
            if leaf.parse::<usize>().is_err() {
                assert!(RUN_CONFIG_SCHEMA.contains(&format!("\"{leaf}\"")), "schema misses {k}");
            }
        }
    }

    #[test]
    fn schema_rejects_bad_documents() {
        for bad in [
            json!({"unknown": 1}),
            json!({"model": {"embed_dim": 0}}),
            json!({"pretrain": {"mode": "sgd"}}),
            json!({"finetune": {"peft": {"glora_tags": [{"u": "lowrank0", "v": "none", "x": "none", "y": "none", "z": "none"}]}}}),
            json!({"eval": {"leads": []}}),
            json!({"model": {"attention": {"kind": "streaming"}}}),
        ] {
            let err = RunConfig::from_value(bad.clone()).unwrap_err();
            assert!(err.to_string().contains("schema"), "{bad}: {err}");
        }
        assert!(RunConfig::from_json("{not json").is_err());
        // schema-valid but semantically wrong
        assert!(RunConfig::from_value(json!({"region": "nowhere"})).is_err());
        assert!(RunConfig::from_value(json!({"split": {"train_years": [1], "val_years": [1], "test_years": [2]}})).is_err());
    }

    #[test]
    fn partial_documents_keep_defaults() {
        let c = RunConfig::from_value(json!({
            "finetune": {"mode": "glora", "peft": {"rank": 4, "targets": "attention+fc1", "search": {"budget": 10}}},
            "model": {"attention": {"kind": "naive"}}
        }))
        .unwrap();
        assert_eq!(c.finetune.mode, TrainMode::Glora);
        assert_eq!(c.finetune.peft.rank, 4);
        assert_eq!(c.finetune.peft.search.budget, 10);
        assert_eq!(c.finetune.peft.search.population, 8);
        assert_eq!(c.finetune.lead_times, vec![72]);
        assert_eq!(c.model.attention, AttentionKernel::Naive);
        assert_eq!(c.model.depth, 2);
    }
}
