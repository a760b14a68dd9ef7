//! Variable-tokenized vision-transformer forecaster.
//!
//! Each input variable is patchified and embedded with its own projection,
//! the per-variable tokens at each patch are collapsed by a single learned
//! query (cross-attention), position and lead-time embeddings are added, a
//! pre-norm transformer runs over patches, and a linear head maps every
//! patch token back to `D̂·p²` output values.

mod checkpoint;
mod config;
mod params;

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use crate::attention::attention;
use crate::error::{shape_err, Error, Result};
use crate::grid::{CropIndex, GridSpec};
use crate::numcore::init::{randn, seeded, Rng};
use crate::numcore::{Tape, Tensor, Var};
use crate::peft::{self, AdapterSet};

pub(crate) use checkpoint::{decode_container, decode_payload, encode_container, write_atomic, TensorEntry};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use params::{Bound, CountFilter, Param, ParamLayout, ParamRole, ParamStore};

/// Lead times enter the embedding as `Δ / LEAD_SCALE_HOURS`.
pub const LEAD_SCALE_HOURS: f64 = 24.0;

/// Rectangle of patches on the model's global patch grid. Columns may wrap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchWindow {
    pub rows: Range<usize>,
    pub cols: Vec<usize>,
}

impl PatchWindow {
    pub fn full(cfg: &ModelConfig) -> Self {
        Self {
            rows: 0..cfg.patches_lat(),
            cols: (0..cfg.patches_lon()).collect(),
        }
    }

    /// Window covering a patch-aligned crop of the model grid.
    pub fn from_crop(cfg: &ModelConfig, crop: &CropIndex) -> Result<Self> {
        let p = cfg.patch_size;
        let aligned = crop.rows.start.is_multiple_of(p)
            && crop.height().is_multiple_of(p)
            && crop.width().is_multiple_of(p)
            && crop
                .cols
                .chunks(p)
                .all(|c| c[0] % p == 0 && c.windows(2).all(|w| w[1] == w[0] + 1));
        if !aligned || crop.rows.end > cfg.grid.n_lat || crop.cols.iter().any(|&c| c >= cfg.grid.n_lon) {
            return Err(Error::Model(format!("crop {crop:?} is not aligned to patch size {p}")));
        }
        Ok(Self {
            rows: crop.rows.start / p..crop.rows.end / p,
            cols: crop.cols.chunks(p).map(|c| c[0] / p).collect(),
        })
    }

    pub fn n_patches(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    /// Global patch ids in row-major window order.
    pub fn patch_ids(&self, cfg: &ModelConfig) -> Vec<usize> {
        let wp = cfg.patches_lon();
        self.rows
            .clone()
            .flat_map(|r| self.cols.iter().map(move |&c| r * wp + c))
            .collect()
    }

    /// `(H', W')` in grid cells.
    pub fn cells(&self, patch: usize) -> (usize, usize) {
        (self.rows.len() * patch, self.cols.len() * patch)
    }
}

/// Per-forward scratch shared by adapter hooks (residual-LoRA caches).
#[derive(Debug, Default)]
pub struct ForwardState {
    pub(crate) branches: HashMap<String, Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastModel {
    cfg: ModelConfig,
    params: ParamStore,
    pub(crate) adapters: AdapterSet,
}

fn sincos(pos: f64, dim: usize, out: &mut [f64]) {
    for k in 0..dim / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * k as f64 / dim as f64);
        out[2 * k] = (pos * freq).sin();
        out[2 * k + 1] = (pos * freq).cos();
    }
}

impl ForecastModel {
    /// Fresh model with seeded initialization; every parameter trainable.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let mut params = ParamStore::default();
        for (path, shape) in cfg.layout().entries {
            let value = Self::init_value(&cfg, &path, &shape, &mut rng);
            params.insert(path, value, true, ParamRole::Base)?;
        }
        Ok(Self {
            cfg,
            params,
            adapters: AdapterSet::default(),
        })
    }

    fn init_value(cfg: &ModelConfig, path: &str, shape: &[usize], rng: &mut Rng) -> Tensor {
        let e = cfg.embed_dim;
        if let Some(var) = path.strip_prefix("var_embed.") {
            let idx = cfg.input_variables.iter().position(|v| v == var).unwrap_or(0);
            let mut row = vec![0.0; e];
            sincos(idx as f64, e, &mut row);
            return Tensor::new(shape, row).expect("embedding shape");
        }
        if path == "pos_embed" {
            // half the channels encode the patch row, half the column
            let (hp, wp) = (cfg.patches_lat(), cfg.patches_lon());
            let half = e / 2;
            let mut data = vec![0.0; hp * wp * e];
            for r in 0..hp {
                for c in 0..wp {
                    let row = &mut data[(r * wp + c) * e..(r * wp + c + 1) * e];
                    sincos(r as f64, half, &mut row[..half]);
                    sincos(c as f64, e - half, &mut row[half..]);
                }
            }
            return Tensor::new(shape, data).expect("pos shape");
        }
        if path.ends_with(".gamma") {
            return Tensor::full(shape, 1.0);
        }
        if path.ends_with(".bias") || path.ends_with(".beta") {
            return Tensor::zeros(shape);
        }
        randn(shape, cfg.init_std, rng)
    }

    /// Reassembles a model from a registry; validates paths and shapes.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore, adapters: AdapterSet) -> Result<Self> {
        cfg.validate()?;
        for (path, shape) in cfg.layout().entries {
            let have = params.value(&path)?.shape();
            if have != shape.as_slice() {
                return Err(Error::Model(format!(
                    "parameter `{path}` has shape {have:?}, config implies {shape:?}"
                )));
            }
        }
        let model = Self { cfg, params, adapters };
        model.adapters.validate(&model.params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut ParamStore, &mut AdapterSet) {
        (&mut self.params, &mut self.adapters)
    }

    pub fn count_parameters(&self, filter: CountFilter) -> usize {
        self.params.count(filter)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Names of the model's 2-D linear maps, e.g. `blocks.0.attn.q`.
    pub fn linear_paths(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(k, p)| p.role == ParamRole::Base && p.value.rank() == 2 && k.ends_with(".weight"))
            .map(|(k, _)| k.trim_end_matches(".weight").to_string())
            .collect()
    }

    /// `x Wᵀ + b` for the linear map at `path`, with any attached adapter.
    pub fn linear(&self, tape: &mut Tape, bound: &Bound, path: &str, x: Var, st: &mut ForwardState) -> Result<Var> {
        let w = bound.var(&format!("{path}.weight"))?;
        let b = bound.try_var(&format!("{path}.bias"));
        match self.adapters.get(path) {
            Some(a) if !a.merged => peft::adapted_linear(tape, bound, a, x, w, b, st),
            _ => tape.linear(x, w, b),
        }
    }

    fn check_variables(&self, variables: &[String]) -> Result<()> {
        let want = &self.cfg.input_variables;
        for v in variables {
            if !want.contains(v) {
                return Err(Error::UnknownVariable(v.clone()));
            }
        }
        if variables.len() != want.len() || want.iter().any(|v| !variables.contains(v)) {
            return Err(Error::Model(format!(
                "input variables {variables:?} do not match the configured set {want:?}"
            )));
        }
        Ok(())
    }

    /// Patch tokens per variable, each `[N_p × e]`, in the order of `variables`.
    pub fn tokenize(&self, tape: &mut Tape, bound: &Bound, input: &Tensor, variables: &[String], window: &PatchWindow) -> Result<Vec<Var>> {
        let p = self.cfg.patch_size;
        let (h, w) = window.cells(p);
        let d = variables.len();
        if input.shape() != [d, h, w] {
            return Err(shape_err("tokenize", input.shape(), &[d, h, w]));
        }
        for v in variables {
            if !self.cfg.input_variables.contains(v) {
                return Err(Error::UnknownVariable(v.clone()));
            }
        }
        let x = tape.constant(input.clone());
        let wp = window.cols.len();
        let n_p = window.n_patches();
        let mut tokens = Vec::with_capacity(d);
        for (vi, name) in variables.iter().enumerate() {
            let mut index = Vec::with_capacity(n_p * p * p);
            for pr in 0..window.rows.len() {
                for pc in 0..wp {
                    for ir in 0..p {
                        for ic in 0..p {
                            index.push((vi * h + pr * p + ir) * w + pc * p + ic);
                        }
                    }
                }
            }
            let patches = tape.gather(x, Arc::new(index), &[n_p, p * p])?;
            let wv = bound.var(&format!("token_embed.{name}.weight"))?;
            let bv = bound.try_var(&format!("token_embed.{name}.bias"));
            let emb = tape.linear(patches, wv, bv)?;
            let ve = bound.var(&format!("var_embed.{name}"))?;
            tokens.push(tape.add_row(emb, ve)?);
        }
        Ok(tokens)
    }

    /// Collapses `D` token sets `[N_p × e]` to one `[N_p × e]` by a learned
    /// query attending over the variables at each patch.
    pub fn aggregate(&self, tape: &mut Tape, bound: &Bound, tokens: &[Var], st: &mut ForwardState) -> Result<Var> {
        let Some(&first) = tokens.first() else {
            return Err(Error::Model("aggregation needs at least one variable".into()));
        };
        let [n_p, e] = tape.value(first).shape()[..] else {
            return Err(Error::Model("tokens must be [N_p, e]".into()));
        };
        let d = tokens.len();
        let stacked = tape.concat(tokens)?;
        let k = self.linear(tape, bound, "aggregate.k_proj", stacked, st)?;
        let v = self.linear(tape, bound, "aggregate.v_proj", stacked, st)?;
        let k = tape.reshape(k, &[d, n_p, e])?;
        let v = tape.reshape(v, &[d, n_p, e])?;
        let k = tape.swap01(k)?;
        let v = tape.swap01(v)?;
        let query = bound.var("aggregate.query")?;
        let q = self.linear(tape, bound, "aggregate.q_proj", query, st)?;
        let q = tape.gather(q, Arc::new((0..n_p).flat_map(|_| 0..e).collect()), &[n_p, 1, e])?;
        let out = attention(tape, q, k, v, self.cfg.aggregation_attention, None)?;
        let out = tape.reshape(out, &[n_p, e])?;
        self.linear(tape, bound, "aggregate.out_proj", out, st)
    }

    /// `[e]` embedding of the lead time.
    pub fn lead_embedding(&self, tape: &mut Tape, bound: &Bound, lead_hours: u32) -> Result<Var> {
        if lead_hours == 0 {
            return Err(Error::Model("lead time must be > 0 hours".into()));
        }
        let e = self.cfg.embed_dim;
        let x = tape.constant(Tensor::new(&[1, 1], vec![lead_hours as f64 / LEAD_SCALE_HOURS])?);
        let w = bound.var("lead_embed.weight")?;
        let b = bound.try_var("lead_embed.bias");
        let y = tape.linear(x, w, b)?;
        tape.reshape(y, &[e])
    }

    fn block(&self, tape: &mut Tape, bound: &Bound, i: usize, x: Var, st: &mut ForwardState) -> Result<Var> {
        let e = self.cfg.embed_dim;
        let (heads, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let n = tape.value(x).shape()[0];
        let pre = format!("blocks.{i}");
        let eps = self.cfg.layer_norm_eps;
        let h = tape.layer_norm(x, bound.var(&format!("{pre}.norm1.gamma"))?, bound.var(&format!("{pre}.norm1.beta"))?, eps)?;
        let mut qkv = Vec::with_capacity(3);
        for name in ["q", "k", "v"] {
            let y = self.linear(tape, bound, &format!("{pre}.attn.{name}"), h, st)?;
            let y = tape.reshape(y, &[n, heads, dh])?;
            qkv.push(tape.swap01(y)?);
        }
        let a = attention(tape, qkv[0], qkv[1], qkv[2], self.cfg.attention, None)?;
        let a = tape.swap01(a)?;
        let a = tape.reshape(a, &[n, e])?;
        let a = self.linear(tape, bound, &format!("{pre}.attn.proj"), a, st)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, bound.var(&format!("{pre}.norm2.gamma"))?, bound.var(&format!("{pre}.norm2.beta"))?, eps)?;
        let h = self.linear(tape, bound, &format!("{pre}.mlp.fc1"), h, st)?;
        let h = tape.gelu(h)?;
        let h = self.linear(tape, bound, &format!("{pre}.mlp.fc2"), h, st)?;
        tape.add(x, h)
    }

    /// Forecast `[D̂, H', W']` for the window; `input` is `[D, H', W']` with
    /// channels named by `variables` (any order).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &Tensor,
        variables: &[String],
        lead_hours: u32,
        window: &PatchWindow,
    ) -> Result<Var> {
        self.check_variables(variables)?;
        let mut st = ForwardState::default();
        let tokens = self.tokenize(tape, bound, input, variables, window)?;
        let mut x = self.aggregate(tape, bound, &tokens, &mut st)?;
        let n_p = window.n_patches();
        let pos = tape.gather(
            bound.var("pos_embed")?,
            Arc::new(
                window
                    .patch_ids(&self.cfg)
                    .into_iter()
                    .flat_map(|id| id * self.cfg.embed_dim..(id + 1) * self.cfg.embed_dim)
                    .collect(),
            ),
            &[n_p, self.cfg.embed_dim],
        )?;
        x = tape.add(x, pos)?;
        let lead = self.lead_embedding(tape, bound, lead_hours)?;
        x = tape.add_row(x, lead)?;
        for i in 0..self.cfg.depth {
            x = self.block(tape, bound, i, x, &mut st)?;
        }
        x = tape.layer_norm(x, bound.var("norm.gamma")?, bound.var("norm.beta")?, self.cfg.layer_norm_eps)?;
        let y = self.linear(tape, bound, "head", x, &mut st)?;
        let (h, w) = window.cells(self.cfg.patch_size);
        let index = unpatchify_index(self.cfg.target_variables.len(), self.cfg.patch_size, h, w);
        tape.gather(y, Arc::new(index), &[self.cfg.target_variables.len(), h, w])
    }

    /// Convenience: binds parameters and returns the output value.
    pub fn predict(&self, input: &Tensor, variables: &[String], lead_hours: u32, window: &PatchWindow) -> Result<Tensor> {
        let mut tape = Tape::new().with_finite_check(false);
        let bound = self.bind(&mut tape);
        let y = self.forward(&mut tape, &bound, input, variables, lead_hours, window)?;
        Ok(tape.value(y).clone())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.cfg.grid
    }
}

/// Gather index mapping head outputs `[N_p × D̂·p²]` to `[D̂, H, W]`.
pub fn unpatchify_index(d_out: usize, p: usize, h: usize, w: usize) -> Vec<usize> {
    let wp = w / p;
    let per = d_out * p * p;
    let mut index = Vec::with_capacity(d_out * h * w);
    for v in 0..d_out {
        for y in 0..h {
            for x in 0..w {
                let patch = (y / p) * wp + x / p;
                index.push(patch * per + v * p * p + (y % p) * p + x % p);
            }
        }
    }
    index
}

/// Inverse of [`unpatchify_index`]: `[D̂, H, W]` to `[N_p × D̂·p²]`.
pub fn patchify_index(d_out: usize, p: usize, h: usize, w: usize) -> Vec<usize> {
    let forward = unpatchify_index(d_out, p, h, w);
    let mut inverse = vec![0; forward.len()];
    for (dst, &src) in forward.iter().enumerate() {
        inverse[src] = dst;
    }
    inverse
}
