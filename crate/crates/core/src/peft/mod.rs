//! Parameter-efficient fine-tuning: low-rank, residual low-rank and
//! generalized adapters on frozen linear maps, plus targeting, freezing,
//! merging, accounting and adapter-only checkpoints.
//!
//! Adapter tensors live in the model's parameter registry under the target
//! path (`{target}.lora.a`, `{target}.glora.u`, ...) with role
//! [`ParamRole::Adapter`]; the [`AdapterSet`] records kind, rank or tags and
//! whether the update is currently folded into the base weight.

pub mod glora;
mod lora;
pub mod search;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    decode_container, decode_payload, encode_container, write_atomic, Bound, ForecastModel, ForwardState, ModelConfig,
    ParamRole, ParamStore, TensorEntry,
};
use crate::numcore::init::seeded;
use crate::numcore::{Tape, Tensor, Var};

pub use glora::{glora_forward, merge_glora, unmerge_glora, GloraSupports, GloraTags, Support, Tag};
pub use lora::LoraAdapter;
pub use search::{evolutionary_search, LayerSpace, SearchConfig, SearchGenome, SearchResult, SearchSpace};

pub const DEFAULT_RANK: usize = 16;
pub const ADAPTER_MAGIC: &[u8; 8] = b"RCADAPT\0";
pub const ADAPTER_VERSION: u32 = 1;

/// Closed-form trainable count of a rank-`r` update on a `[d × k]` map.
pub fn lora_param_count(rank: usize, d: usize, k: usize) -> usize {
    rank * (d + k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterKind {
    Lora {
        rank: usize,
        scaling: f64,
    },
    /// Adds the low-rank branch of `residual_from` (same layer, previous
    /// block) to this layer's output.
    ResLora {
        rank: usize,
        scaling: f64,
        residual_from: Option<String>,
    },
    Glora {
        tags: GloraTags,
    },
}

impl AdapterKind {
    pub fn name(&self) -> &'static str {
        match self {
            AdapterKind::Lora { .. } => "lora",
            AdapterKind::ResLora { .. } => "reslora",
            AdapterKind::Glora { .. } => "glora",
        }
    }
}

/// One adapter bound to the `[d × k]` linear map at `target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachedAdapter {
    pub target: String,
    pub d: usize,
    pub k: usize,
    pub kind: AdapterKind,
    pub merged: bool,
}

impl AttachedAdapter {
    /// Full registry paths and shapes of this adapter's tensors.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let t = &self.target;
        match &self.kind {
            AdapterKind::Lora { rank, .. } | AdapterKind::ResLora { rank, .. } => vec![
                (format!("{t}.lora.a"), vec![*rank, self.k]),
                (format!("{t}.lora.b"), vec![self.d, *rank]),
            ],
            AdapterKind::Glora { tags } => tags
                .param_shapes(self.d, self.k)
                .into_iter()
                .map(|(s, shape)| (format!("{t}.{s}"), shape))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn lora_factors(&self, store: &ParamStore) -> Result<LoraAdapter> {
        let (AdapterKind::Lora { scaling, .. } | AdapterKind::ResLora { scaling, .. }) = &self.kind else {
            return Err(Error::Adapter(format!("`{}` is not a low-rank adapter", self.target)));
        };
        LoraAdapter::from_factors(
            self.target.clone(),
            store.value(&format!("{}.lora.a", self.target))?.clone(),
            store.value(&format!("{}.lora.b", self.target))?.clone(),
            *scaling,
        )
    }
}

/// Adapters keyed by target path, in attach order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdapterSet {
    adapters: IndexMap<String, AttachedAdapter>,
}

impl AdapterSet {
    pub fn get(&self, target: &str) -> Option<&AttachedAdapter> {
        self.adapters.get(target)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AttachedAdapter> {
        self.adapters.values()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn targets(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.iter().map(AttachedAdapter::param_count).sum()
    }

    /// Checks every adapter against the registry: base weight shape, adapter
    /// tensor shapes, bias presence and residual ordering.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        for (i, (path, a)) in self.adapters.iter().enumerate() {
            if path != &a.target {
                return Err(Error::Adapter(format!("adapter keyed `{path}` targets `{}`", a.target)));
            }
            let w = store.get(&format!("{path}.weight"))?;
            if w.role != ParamRole::Base || w.value.shape() != [a.d, a.k] {
                return Err(Error::Adapter(format!(
                    "adapter on `{path}` expects a [{}, {}] base weight, found {:?}",
                    a.d,
                    a.k,
                    w.value.shape()
                )));
            }
            match &a.kind {
                AdapterKind::Lora { rank, .. } => lora::check_rank(*rank, a.d, a.k)?,
                AdapterKind::ResLora { rank, residual_from, .. } => {
                    lora::check_rank(*rank, a.d, a.k)?;
                    if let Some(from) = residual_from {
                        let pos = self.adapters.get_index_of(from);
                        let ok = matches!(pos, Some(j) if j < i)
                            && matches!(self.adapters[from].kind, AdapterKind::ResLora { .. })
                            && self.adapters[from].d == a.d;
                        if !ok {
                            return Err(Error::Adapter(format!(
                                "residual of `{path}` must come from an earlier residual adapter with {} outputs, got `{from}`",
                                a.d
                            )));
                        }
                    }
                }
                AdapterKind::Glora { tags } => tags.validate(a.d, a.k, store.contains(&format!("{path}.bias")))?,
            }
            for (p, shape) in a.param_shapes() {
                let have = store.get(&p)?;
                if have.value.shape() != shape.as_slice() || have.role != ParamRole::Adapter {
                    return Err(Error::Adapter(format!(
                        "adapter tensor `{p}` has shape {:?}, expected {shape:?}",
                        have.value.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which linear maps receive adapters.
/// Serialized as its string form: `attention`, `attention+fc1`,
/// `attention+fc1fc2` or a comma-separated path list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TargetSelector {
    /// `q`, `k`, `v` and output projection of every transformer block.
    Attention,
    AttentionFc1,
    AttentionFc1Fc2,
    Explicit(Vec<String>),
}

impl fmt::Display for TargetSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSelector::Attention => f.write_str("attention"),
            TargetSelector::AttentionFc1 => f.write_str("attention+fc1"),
            TargetSelector::AttentionFc1Fc2 => f.write_str("attention+fc1fc2"),
            TargetSelector::Explicit(p) => f.write_str(&p.join(",")),
        }
    }
}

impl FromStr for TargetSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attention" | "attn" => TargetSelector::Attention,
            "attention+fc1" | "+fc1" => TargetSelector::AttentionFc1,
            "attention+fc1fc2" | "+fc1fc2" | "attention+fc1+fc2" => TargetSelector::AttentionFc1Fc2,
            "" => return Err(Error::Adapter("empty target selector".into())),
            _ => TargetSelector::Explicit(s.split(',').map(|p| p.trim().to_string()).collect()),
        })
    }
}

impl TryFrom<String> for TargetSelector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TargetSelector> for String {
    fn from(t: TargetSelector) -> String {
        t.to_string()
    }
}

impl TargetSelector {
    /// Paths named by the selector for a configuration, block by block.
    pub fn paths(&self, cfg: &ModelConfig) -> Vec<String> {
        let per_block: &[&str] = match self {
            TargetSelector::Explicit(p) => return p.clone(),
            TargetSelector::Attention => &["attn.q", "attn.k", "attn.v", "attn.proj"],
            TargetSelector::AttentionFc1 => &["attn.q", "attn.k", "attn.v", "attn.proj", "mlp.fc1"],
            TargetSelector::AttentionFc1Fc2 => &["attn.q", "attn.k", "attn.v", "attn.proj", "mlp.fc1", "mlp.fc2"],
        };
        (0..cfg.depth)
            .flat_map(|b| per_block.iter().map(move |s| format!("blocks.{b}.{s}")))
            .collect()
    }
}

/// What to attach at every selected path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterSpec {
    /// `alpha = None` gives scaling 1.
    Lora { rank: usize, alpha: Option<f64> },
    ResLora { rank: usize, alpha: Option<f64> },
    /// One entry per target, or a single entry applied to all (with the bias
    /// supports dropped on bias-free targets).
    Glora { tags: Vec<GloraTags> },
}

impl AdapterSpec {
    pub fn lora(rank: usize) -> Self {
        AdapterSpec::Lora { rank, alpha: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachOptions {
    /// Keep the prediction head trainable alongside the adapters.
    pub train_head: bool,
    pub seed: u64,
}

impl Default for AttachOptions {
    fn default() -> Self {
        Self {
            train_head: true,
            seed: 0,
        }
    }
}

pub(crate) fn is_head(path: &str) -> bool {
    path == "head.weight" || path == "head.bias"
}

fn previous_block(path: &str) -> Option<String> {
    let rest = path.strip_prefix("blocks.")?;
    let (i, tail) = rest.split_once('.')?;
    let i: usize = i.parse().ok()?;
    (i > 0).then(|| format!("blocks.{}.{tail}", i - 1))
}

/// Attaches adapters, freezes every base parameter (except the head when
/// `train_head`) and returns the adapted paths. On error the model is
/// unchanged.
pub fn attach(model: &mut ForecastModel, spec: &AdapterSpec, targets: &TargetSelector, opts: &AttachOptions) -> Result<Vec<String>> {
    let paths = targets.paths(model.config());
    if paths.is_empty() {
        return Err(Error::Adapter("target selector matched no layers".into()));
    }
    if let AdapterSpec::Glora { tags } = spec {
        if tags.len() != 1 && tags.len() != paths.len() {
            return Err(Error::Adapter(format!("{} GLoRA tag sets for {} targets", tags.len(), paths.len())));
        }
    }
    let mut rng = seeded(opts.seed);
    let mut planned: Vec<(AttachedAdapter, Vec<(String, Tensor)>)> = Vec::with_capacity(paths.len());
    for (i, path) in paths.iter().enumerate() {
        let store = model.params();
        let w = store
            .get(&format!("{path}.weight"))
            .map_err(|_| Error::Adapter(format!("unknown target path `{path}`")))?;
        let [d, k] = w.value.shape()[..] else {
            return Err(Error::Adapter(format!("target `{path}` is not a 2-D linear map")));
        };
        if w.role != ParamRole::Base {
            return Err(Error::Adapter(format!("target `{path}` is not a base linear map")));
        }
        if model.adapters().get(path).is_some() || paths[..i].contains(path) {
            return Err(Error::Adapter(format!("an adapter is already attached to `{path}`")));
        }
        let has_bias = store.contains(&format!("{path}.bias"));
        let (kind, tensors) = match spec {
            AdapterSpec::Lora { rank, alpha } | AdapterSpec::ResLora { rank, alpha } => {
                lora::check_rank(*rank, d, k)?;
                let scaling = alpha.unwrap_or(*rank as f64) / *rank as f64;
                let (a, b) = lora::init_factors(*rank, d, k, &mut rng);
                let kind = if matches!(spec, AdapterSpec::Lora { .. }) {
                    AdapterKind::Lora { rank: *rank, scaling }
                } else {
                    let residual_from = previous_block(path).filter(|p| {
                        paths[..i].contains(p)
                            || matches!(model.adapters().get(p).map(|a| &a.kind), Some(AdapterKind::ResLora { .. }))
                    });
                    AdapterKind::ResLora {
                        rank: *rank,
                        scaling,
                        residual_from,
                    }
                };
                (kind, vec![(format!("{path}.lora.a"), a), (format!("{path}.lora.b"), b)])
            }
            AdapterSpec::Glora { tags } => {
                let t = match tags.len() {
                    1 if !has_bias => tags[0].without_bias_supports(),
                    1 => tags[0],
                    _ => tags[i],
                };
                t.validate(d, k, has_bias)?;
                let tensors = t
                    .param_shapes(d, k)
                    .into_iter()
                    .map(|(s, shape)| {
                        let value = if s.ends_with("_a") {
                            lora::init_factors(shape[0], d, k, &mut rng).0
                        } else {
                            Tensor::zeros(&shape)
                        };
                        (format!("{path}.{s}"), value)
                    })
                    .collect();
                (AdapterKind::Glora { tags: t }, tensors)
            }
        };
        let adapter = AttachedAdapter {
            target: path.clone(),
            d,
            k,
            kind,
            merged: false,
        };
        planned.push((adapter, tensors));
    }
    let (store, set) = model.parts_mut();
    store.set_trainable_where(|p, param| param.role == ParamRole::Adapter || (opts.train_head && is_head(p)));
    for (adapter, tensors) in planned {
        for (p, t) in tensors {
            store.insert(p, t, true, ParamRole::Adapter)?;
        }
        set.adapters.insert(adapter.target.clone(), adapter);
    }
    Ok(paths)
}

/// Removes every adapter (unmerging first) and returns them as a bundle.
/// Base trainability is left as is.
pub fn detach(model: &mut ForecastModel) -> Result<AdapterBundle> {
    unmerge_adapters(model)?;
    let bundle = AdapterBundle::from_model(model)?;
    let (store, set) = model.parts_mut();
    for a in set.adapters.values() {
        for (p, _) in a.param_shapes() {
            store.remove(&p);
        }
    }
    set.adapters.clear();
    Ok(bundle)
}

/// Adapter output on the tape; the base weight only enters as `x Wᵀ`.
pub(crate) fn adapted_linear(
    tape: &mut Tape,
    bound: &Bound,
    a: &AttachedAdapter,
    x: Var,
    w: Var,
    b: Option<Var>,
    st: &mut ForwardState,
) -> Result<Var> {
    let t = &a.target;
    match &a.kind {
        AdapterKind::Lora { scaling, .. } | AdapterKind::ResLora { scaling, .. } => {
            let base = tape.linear(x, w, b)?;
            let xa = tape.matmul_nt(x, bound.var(&format!("{t}.lora.a"))?)?;
            let br = tape.matmul_nt(xa, bound.var(&format!("{t}.lora.b"))?)?;
            let br = tape.scale(br, *scaling)?;
            let mut y = tape.add(base, br)?;
            if let AdapterKind::ResLora { residual_from, .. } = &a.kind {
                if let Some(from) = residual_from {
                    let prev = *st
                        .branches
                        .get(from)
                        .ok_or_else(|| Error::Adapter(format!("residual branch `{from}` not computed before `{t}`")))?;
                    if tape.value(prev).shape() != tape.value(y).shape() {
                        return Err(Error::Adapter(format!(
                            "residual from `{from}` has shape {:?}, `{t}` outputs {:?}",
                            tape.value(prev).shape(),
                            tape.value(y).shape()
                        )));
                    }
                    y = tape.add(y, prev)?;
                }
                st.branches.insert(t.clone(), br);
            }
            Ok(y)
        }
        AdapterKind::Glora { tags } => glora::glora_linear(tape, bound, t, tags, x, w, b),
    }
}

/// Folds every adapter into its base weight (and bias). Residual adapters
/// depend on another layer's input and cannot be folded.
pub fn merge_adapters(model: &mut ForecastModel) -> Result<()> {
    if let Some(a) = model.adapters().iter().find(|a| matches!(a.kind, AdapterKind::ResLora { .. })) {
        return Err(Error::Adapter(format!("residual adapter on `{}` cannot be merged", a.target)));
    }
    fold(model, true)
}

/// Inverse of [`merge_adapters`].
pub fn unmerge_adapters(model: &mut ForecastModel) -> Result<()> {
    fold(model, false)
}

fn fold(model: &mut ForecastModel, merge: bool) -> Result<()> {
    let (store, set) = model.parts_mut();
    for a in set.adapters.values_mut().filter(|a| a.merged != merge) {
        let wp = format!("{}.weight", a.target);
        let bp = format!("{}.bias", a.target);
        let w = store.value(&wp)?.clone();
        let b = store.value(&bp).ok().cloned();
        let (nw, nb) = match &a.kind {
            AdapterKind::Lora { .. } | AdapterKind::ResLora { .. } => {
                let l = a.lora_factors(store)?;
                (if merge { l.merge(&w)? } else { l.unmerge(&w)? }, b)
            }
            AdapterKind::Glora { tags } => {
                let s = glora::supports_from_store(store, &a.target, tags)?;
                if merge {
                    merge_glora(&w, b.as_ref(), &s)?
                } else {
                    unmerge_glora(&w, b.as_ref(), &s)?
                }
            }
        };
        store.set_value(&wp, nw)?;
        if let Some(nb) = nb {
            store.set_value(&bp, nb)?;
        }
        a.merged = merge;
    }
    Ok(())
}

/// Trainable-parameter accounting computed from a layout, without
/// allocating the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterAccounting {
    pub base: usize,
    pub adapter: usize,
    pub head: usize,
    pub trainable_with_head: usize,
    pub trainable_without_head: usize,
}

impl AdapterAccounting {
    pub fn total(&self) -> usize {
        self.base + self.adapter
    }

    pub fn fraction_with_head(&self) -> f64 {
        self.trainable_with_head as f64 / self.total() as f64
    }

    pub fn fraction_without_head(&self) -> f64 {
        self.trainable_without_head as f64 / self.total() as f64
    }
}

pub fn lora_accounting(cfg: &ModelConfig, targets: &TargetSelector, rank: usize) -> Result<AdapterAccounting> {
    let layout = cfg.layout();
    let mut adapter = 0;
    for p in targets.paths(cfg) {
        let shape = layout
            .shape_of(&format!("{p}.weight"))
            .ok_or_else(|| Error::Adapter(format!("unknown target path `{p}`")))?;
        lora::check_rank(rank, shape[0], shape[1])?;
        adapter += lora_param_count(rank, shape[0], shape[1]);
    }
    let head = ["head.weight", "head.bias"]
        .iter()
        .filter_map(|p| layout.shape_of(p))
        .map(|s| s.iter().product::<usize>())
        .sum();
    Ok(AdapterAccounting {
        base: layout.count(),
        adapter,
        head,
        trainable_with_head: adapter + head,
        trainable_without_head: adapter,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    adapters: AdapterSet,
    tensors: Vec<TensorEntry>,
}

/// Adapter-only checkpoint: metadata plus adapter tensors, no base weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBundle {
    pub adapters: AdapterSet,
    pub tensors: IndexMap<String, Tensor>,
}

impl AdapterBundle {
    /// Copies the model's adapters; they must not be merged.
    pub fn from_model(model: &ForecastModel) -> Result<Self> {
        let mut tensors = IndexMap::new();
        for a in model.adapters().iter() {
            if a.merged {
                return Err(Error::Adapter(format!("adapter on `{}` is merged; unmerge before export", a.target)));
            }
            for (p, _) in a.param_shapes() {
                tensors.insert(p.clone(), model.params().value(&p)?.clone());
            }
        }
        Ok(Self {
            adapters: model.adapters().clone(),
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = BundleHeader {
            adapters: self.adapters.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(p, t)| TensorEntry {
                    path: p.clone(),
                    shape: t.shape().to_vec(),
                    trainable: None,
                    role: None,
                })
                .collect(),
        };
        let tensors: Vec<&Tensor> = self.tensors.values().collect();
        encode_container(ADAPTER_MAGIC, ADAPTER_VERSION, &header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (BundleHeader, _) = decode_container(bytes, ADAPTER_MAGIC, ADAPTER_VERSION, "adapter bundle")?;
        let shapes: Vec<&[usize]> = header.tensors.iter().map(|e| e.shape.as_slice()).collect();
        let values = decode_payload(payload, &shapes)?;
        let tensors: IndexMap<String, Tensor> = header.tensors.into_iter().map(|e| e.path).zip(values).collect();
        let bundle = Self {
            adapters: header.adapters,
            tensors,
        };
        for a in bundle.adapters.iter() {
            if a.merged {
                return Err(Error::Checkpoint(format!("adapter on `{}` stored as merged", a.target)));
            }
            for (p, shape) in a.param_shapes() {
                match bundle.tensors.get(&p) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    _ => return Err(Error::Checkpoint(format!("adapter tensor `{p}` missing or misshaped"))),
                }
            }
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Attaches the stored adapters to a base with matching target shapes.
    /// On error the model is unchanged.
    pub fn apply(&self, model: &mut ForecastModel) -> Result<()> {
        for a in self.adapters.iter() {
            let w = model
                .params()
                .get(&format!("{}.weight", a.target))
                .map_err(|_| Error::Adapter(format!("base has no target `{}`", a.target)))?;
            if w.value.shape() != [a.d, a.k] {
                return Err(Error::Adapter(format!(
                    "target `{}`: adapter expects [{}, {}], base has {:?}",
                    a.target,
                    a.d,
                    a.k,
                    w.value.shape()
                )));
            }
            if model.adapters().get(&a.target).is_some() {
                return Err(Error::Adapter(format!("an adapter is already attached to `{}`", a.target)));
            }
        }
        let mut candidate = model.clone();
        {
            let (store, set) = candidate.parts_mut();
            for a in self.adapters.iter() {
                for (p, _) in a.param_shapes() {
                    store.insert(p.clone(), self.tensors[&p].clone(), true, ParamRole::Adapter)?;
                }
                set.adapters.insert(a.target.clone(), a.clone());
            }
        }
        candidate.adapters().validate(candidate.params())?;
        *model = candidate;
        Ok(())
    }
}
