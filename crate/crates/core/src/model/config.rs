use serde::{Deserialize, Serialize};

use crate::attention::AttentionKernel;
use crate::error::{Error, Result};
use crate::grid::GridSpec;

use super::params::ParamLayout;

/// Size and variable sets of a forecaster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    /// Hidden width of the block MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub input_variables: Vec<String>,
    pub target_variables: Vec<String>,
    pub grid: GridSpec,
    /// Hours.
    pub lead_times: Vec<u32>,
    pub attention: AttentionKernel,
    pub aggregation_attention: AttentionKernel,
    pub layer_norm_eps: f64,
    /// Standard deviation of the Gaussian weight init.
    pub init_std: f64,
}

impl ModelConfig {
    /// Laptop-scale default: embed 128, depth 4, 4 heads, patch 2.
    pub fn desk(grid: GridSpec, input_variables: Vec<String>, target_variables: Vec<String>) -> Self {
        Self {
            embed_dim: 128,
            depth: 4,
            n_heads: 4,
            mlp_ratio: 4,
            patch_size: 2,
            input_variables,
            target_variables,
            grid,
            lead_times: vec![12, 24, 36, 48, 60, 72],
            attention: AttentionKernel::default(),
            aggregation_attention: AttentionKernel::default(),
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// The 1024-wide, 48-input, 7-target configuration at 5.625°. Only used
    /// for parameter accounting; depth 8 and 16 heads are assumed values.
    pub fn full_scale() -> Self {
        let inputs = (0..48).map(|i| format!("feature_{i:02}")).collect();
        let targets = [
            "geopotential_500",
            "2m_temperature",
            "relative_humidity_850",
            "specific_humidity_850",
            "temperature_850",
            "10m_u_component_of_wind",
            "10m_v_component_of_wind",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Self {
            embed_dim: 1024,
            depth: 8,
            n_heads: 16,
            ..Self::desk(GridSpec::from_resolution(5.625).expect("valid resolution"), inputs, targets)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn patches_lat(&self) -> usize {
        self.grid.n_lat / self.patch_size
    }

    pub fn patches_lon(&self) -> usize {
        self.grid.n_lon / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_lat() * self.patches_lon()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.depth == 0 || self.n_heads == 0 || self.mlp_ratio == 0 {
            return bad("embed_dim, depth, n_heads and mlp_ratio must be ≥ 1".into());
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!("embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        self.grid.validate()?;
        let p = self.patch_size;
        if p == 0 || !self.grid.n_lat.is_multiple_of(p) || !self.grid.n_lon.is_multiple_of(p) {
            return bad(format!(
                "grid {}×{} not divisible by patch size {p}",
                self.grid.n_lat, self.grid.n_lon
            ));
        }
        for (what, list) in [("input", &self.input_variables), ("target", &self.target_variables)] {
            if list.is_empty() {
                return bad(format!("no {what} variables"));
            }
            for (i, v) in list.iter().enumerate() {
                if list[..i].contains(v) {
                    return bad(format!("duplicate {what} variable `{v}`"));
                }
                if v.is_empty() || v.contains(char::is_whitespace) {
                    return bad(format!("invalid {what} variable name `{v}`"));
                }
            }
        }
        if self.lead_times.is_empty() || self.lead_times.contains(&0) {
            return bad("lead times must be a non-empty set of positive hours".into());
        }
        for k in [self.attention, self.aggregation_attention] {
            if let AttentionKernel::Streaming { tile_k: 0 } = k {
                return bad("attention tile_k must be ≥ 1".into());
            }
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return bad("layer_norm_eps and init_std must be > 0".into());
        }
        Ok(())
    }

    /// Every base parameter path and shape, in registry order.
    pub fn layout(&self) -> ParamLayout {
        let e = self.embed_dim;
        let p2 = self.patch_size * self.patch_size;
        let mut l = ParamLayout::default();
        for v in &self.input_variables {
            l.linear(&format!("token_embed.{v}"), e, p2, true);
        }
        for v in &self.input_variables {
            l.push(format!("var_embed.{v}"), vec![e]);
        }
        l.push("pos_embed".into(), vec![self.n_patches(), e]);
        l.linear("lead_embed", e, 1, true);
        l.push("aggregate.query".into(), vec![1, e]);
        l.linear("aggregate.q_proj", e, e, true);
        l.linear("aggregate.k_proj", e, e, false);
        l.linear("aggregate.v_proj", e, e, true);
        l.linear("aggregate.out_proj", e, e, true);
        for b in 0..self.depth {
            l.norm(&format!("blocks.{b}.norm1"), e);
            l.linear(&format!("blocks.{b}.attn.q"), e, e, true);
            l.linear(&format!("blocks.{b}.attn.k"), e, e, false);
            l.linear(&format!("blocks.{b}.attn.v"), e, e, true);
            l.linear(&format!("blocks.{b}.attn.proj"), e, e, true);
            l.norm(&format!("blocks.{b}.norm2"), e);
            l.linear(&format!("blocks.{b}.mlp.fc1"), self.mlp_dim(), e, true);
            l.linear(&format!("blocks.{b}.mlp.fc2"), e, self.mlp_dim(), true);
        }
        l.norm("norm", e);
        l.linear("head", self.target_variables.len() * p2, e, true);
        l
    }
}
