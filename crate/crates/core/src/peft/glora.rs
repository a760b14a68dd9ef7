//! Generalized adapter with weight, input and bias supports:
//!
//! `y = x (W₀ + W₀⊙U + V)ᵀ + W₀X + Y⊙b₀ + Z + b₀`
//!
//! `U`, `V` are weight-shaped supports (scalar, per-output-row vector or
//! low-rank `B·A`), `X` is an input-space prompt `[k]` contracted with `W₀`
//! to a bias-shaped term, and `Y`, `Z` scale and shift the bias. Every
//! support starts at zero (low-rank: `B = 0`), so a fresh adapter is the
//! identity for any structure.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{shape_err, Error, Result};
use crate::model::Bound;
use crate::numcore::{Tape, Tensor, Var};

/// Structure of one support tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    None,
    Scalar,
    Vector,
    LowRank(usize),
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::None => f.write_str("none"),
            Tag::Scalar => f.write_str("scalar"),
            Tag::Vector => f.write_str("vector"),
            Tag::LowRank(r) => write!(f, "lowrank{r}"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Tag::None),
            "scalar" => Ok(Tag::Scalar),
            "vector" => Ok(Tag::Vector),
            _ => s
                .strip_prefix("lowrank")
                .and_then(|r| r.parse().ok())
                .filter(|&r| r > 0)
                .map(Tag::LowRank)
                .ok_or_else(|| Error::Adapter(format!("unknown structure tag `{s}`"))),
        }
    }
}

impl Serialize for Tag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const SUPPORTS: [&str; 5] = ["u", "v", "x", "y", "z"];

/// Tags of `(U, V, X, Y, Z)` for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GloraTags {
    pub u: Tag,
    pub v: Tag,
    pub x: Tag,
    pub y: Tag,
    pub z: Tag,
}

impl Default for GloraTags {
    fn default() -> Self {
        Self::none()
    }
}

impl GloraTags {
    pub fn none() -> Self {
        Self::from_array([Tag::None; 5])
    }

    pub fn as_array(&self) -> [Tag; 5] {
        [self.u, self.v, self.x, self.y, self.z]
    }

    pub fn from_array(t: [Tag; 5]) -> Self {
        Self {
            u: t[0],
            v: t[1],
            x: t[2],
            y: t[3],
            z: t[4],
        }
    }

    /// Same tags with `X`, `Y`, `Z` switched off.
    pub fn without_bias_supports(&self) -> Self {
        Self {
            x: Tag::None,
            y: Tag::None,
            z: Tag::None,
            ..*self
        }
    }

    pub fn is_identity_structure(&self) -> bool {
        self.as_array().iter().all(|t| *t == Tag::None)
    }

    /// Checks tags against a `[d × k]` target with or without a bias.
    pub fn validate(&self, d: usize, k: usize, has_bias: bool) -> Result<()> {
        for (name, tag) in SUPPORTS.iter().zip(self.as_array()) {
            match (name, tag) {
                (_, Tag::LowRank(r)) if !matches!(*name, "u" | "v") => {
                    return Err(Error::Adapter(format!("support {name} cannot be low-rank (got rank {r})")));
                }
                (_, Tag::LowRank(r)) if r == 0 || r > d.min(k) => {
                    return Err(Error::Adapter(format!("rank {r} exceeds min({d}, {k}) for support {name}")));
                }
                _ => {}
            }
        }
        if !has_bias && [self.x, self.y, self.z].iter().any(|t| *t != Tag::None) {
            return Err(Error::Adapter("bias supports X, Y, Z need a target with a bias".into()));
        }
        Ok(())
    }

    /// `(parameter suffix, shape)` for every trainable support tensor.
    pub fn param_shapes(&self, d: usize, k: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, tag) in SUPPORTS.iter().zip(self.as_array()) {
            let vec_len = if *name == "x" { k } else { d };
            match tag {
                Tag::None => {}
                Tag::Scalar => out.push((format!("glora.{name}"), vec![1])),
                Tag::Vector => out.push((format!("glora.{name}"), vec![vec_len])),
                Tag::LowRank(r) => {
                    out.push((format!("glora.{name}_b"), vec![d, r]));
                    out.push((format!("glora.{name}_a"), vec![r, k]));
                }
            }
        }
        out
    }

    pub fn param_count(&self, d: usize, k: usize) -> usize {
        self.param_shapes(d, k).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Support values for tensor-level evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum Support {
    None,
    Scalar(f64),
    Vector(Tensor),
    LowRank { b: Tensor, a: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GloraSupports {
    pub u: Support,
    pub v: Support,
    pub x: Support,
    pub y: Support,
    pub z: Support,
}

impl GloraSupports {
    pub fn none() -> Self {
        Self {
            u: Support::None,
            v: Support::None,
            x: Support::None,
            y: Support::None,
            z: Support::None,
        }
    }
}

fn weight_support(s: &Support, d: usize, k: usize) -> Result<Option<Tensor>> {
    Ok(match s {
        Support::None => None,
        Support::Scalar(c) => Some(Tensor::full(&[d, k], *c)),
        Support::Vector(v) => {
            if v.shape() != [d] {
                return Err(shape_err("glora weight support", v.shape(), &[d]));
            }
            Some(Tensor::from_fn(&[d, k], |i| v.data()[i / k]))
        }
        Support::LowRank { b, a } => {
            let (bd, ad) = (b.shape(), a.shape());
            if bd.len() != 2 || ad.len() != 2 || bd[0] != d || ad[1] != k || bd[1] != ad[0] {
                return Err(shape_err("glora low-rank support", bd, ad));
            }
            let r = bd[1];
            Some(Tensor::from_fn(&[d, k], |i| {
                let (row, col) = (i / k, i % k);
                (0..r).map(|j| b.data()[row * r + j] * a.data()[j * k + col]).sum()
            }))
        }
    })
}

fn bias_support(s: &Support, n: usize) -> Result<Option<Tensor>> {
    Ok(match s {
        Support::None => None,
        Support::Scalar(c) => Some(Tensor::full(&[n], *c)),
        Support::Vector(v) if v.shape() == [n] => Some(v.clone()),
        Support::Vector(v) => return Err(shape_err("glora bias support", v.shape(), &[n])),
        Support::LowRank { .. } => return Err(Error::Adapter("bias supports cannot be low-rank".into())),
    })
}

/// Dense `(W, b)` with every support folded in.
pub fn merge_glora(w0: &Tensor, b0: Option<&Tensor>, s: &GloraSupports) -> Result<(Tensor, Option<Tensor>)> {
    let [d, k] = w0.shape()[..] else {
        return Err(Error::Adapter(format!("GLoRA target must be 2-D, got {:?}", w0.shape())));
    };
    let mut w = w0.clone();
    if let Some(u) = weight_support(&s.u, d, k)? {
        w = w.zip_map(&w0.zip_map(&u, |a, b| a * b)?, |a, b| a + b)?;
    }
    if let Some(v) = weight_support(&s.v, d, k)? {
        w = w.zip_map(&v, |a, b| a + b)?;
    }
    let mut extra = Tensor::zeros(&[d]);
    let mut touched = false;
    if let Some(x) = bias_support(&s.x, k)? {
        let wx = Tensor::from_fn(&[d], |i| (0..k).map(|j| w0.data()[i * k + j] * x.data()[j]).sum());
        extra = extra.zip_map(&wx, |a, b| a + b)?;
        touched = true;
    }
    for (sup, scale_bias) in [(&s.y, true), (&s.z, false)] {
        if let Some(t) = bias_support(sup, d)? {
            let term = if scale_bias {
                let b0 = b0.ok_or_else(|| Error::Adapter("Y support needs a base bias".into()))?;
                t.zip_map(b0, |a, b| a * b)?
            } else {
                t
            };
            extra = extra.zip_map(&term, |a, b| a + b)?;
            touched = true;
        }
    }
    let b = match (b0, touched) {
        (Some(b0), _) => Some(b0.zip_map(&extra, |a, b| a + b)?),
        (None, true) => Some(extra),
        (None, false) => None,
    };
    Ok((w, b))
}

/// Reference evaluation through the merged weights.
pub fn glora_forward(x: &Tensor, w0: &Tensor, b0: Option<&Tensor>, s: &GloraSupports) -> Result<Tensor> {
    let (w, b) = merge_glora(w0, b0, s)?;
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w));
    let bv = b.map(|b| tape.constant(b));
    let y = tape.linear(xv, wv, bv)?;
    Ok(tape.value(y).clone())
}

/// Inverts [`merge_glora`] on the weight: `W₀ = (W − V) / (1 + U)`.
pub fn unmerge_glora(w: &Tensor, b: Option<&Tensor>, s: &GloraSupports) -> Result<(Tensor, Option<Tensor>)> {
    let [d, k] = w.shape()[..] else {
        return Err(Error::Adapter(format!("GLoRA target must be 2-D, got {:?}", w.shape())));
    };
    let mut w0 = w.clone();
    if let Some(v) = weight_support(&s.v, d, k)? {
        w0 = w0.zip_map(&v, |a, b| a - b)?;
    }
    if let Some(u) = weight_support(&s.u, d, k)? {
        if u.data().iter().any(|&x| x == -1.0) {
            return Err(Error::Adapter("cannot unmerge: 1 + U vanishes".into()));
        }
        w0 = w0.zip_map(&u, |a, b| a / (1.0 + b))?;
    }
    // bias: b = b₀(1 + Y) + W₀X + Z
    let b0 = match b {
        None => None,
        Some(b) => {
            let mut rest = b.clone();
            if let Some(x) = bias_support(&s.x, k)? {
                let wx = Tensor::from_fn(&[d], |i| (0..k).map(|j| w0.data()[i * k + j] * x.data()[j]).sum());
                rest = rest.zip_map(&wx, |a, b| a - b)?;
            }
            if let Some(z) = bias_support(&s.z, d)? {
                rest = rest.zip_map(&z, |a, b| a - b)?;
            }
            if let Some(y) = bias_support(&s.y, d)? {
                rest = rest.zip_map(&y, |a, b| a / (1.0 + b))?;
            }
            Some(rest)
        }
    };
    Ok((w0, b0))
}

/// Reads the support values of an attached adapter from a registry.
pub(crate) fn supports_from_store(store: &crate::model::ParamStore, target: &str, tags: &GloraTags) -> Result<GloraSupports> {
    let get = |name: &str, tag: Tag| -> Result<Support> {
        let p = |suffix: &str| store.value(&format!("{target}.glora.{suffix}")).cloned();
        Ok(match tag {
            Tag::None => Support::None,
            Tag::Scalar => Support::Scalar(p(name)?.item()),
            Tag::Vector => Support::Vector(p(name)?),
            Tag::LowRank(_) => Support::LowRank {
                b: p(&format!("{name}_b"))?,
                a: p(&format!("{name}_a"))?,
            },
        })
    };
    Ok(GloraSupports {
        u: get("u", tags.u)?,
        v: get("v", tags.v)?,
        x: get("x", tags.x)?,
        y: get("y", tags.y)?,
        z: get("z", tags.z)?,
    })
}

/// Records the adapted linear map on the tape without merging.
pub(crate) fn glora_linear(
    tape: &mut Tape,
    bound: &Bound,
    target: &str,
    tags: &GloraTags,
    x: Var,
    w: Var,
    b: Option<Var>,
) -> Result<Var> {
    let p = |suffix: &str| bound.var(&format!("{target}.glora.{suffix}"));
    let [n, k] = tape.value(x).shape()[..] else {
        return Err(Error::Adapter("GLoRA input must be [N, k]".into()));
    };
    let d = tape.value(w).shape()[0];
    let xw = tape.matmul_nt(x, w)?;
    let mut y = xw;
    match tags.u {
        Tag::None => {}
        Tag::Scalar => {
            let t = tape.mul_scalar(xw, p("u")?)?;
            y = tape.add(y, t)?;
        }
        Tag::Vector => {
            let t = tape.mul_row(xw, p("u")?)?;
            y = tape.add(y, t)?;
        }
        Tag::LowRank(_) => {
            let m = tape.matmul(p("u_b")?, p("u_a")?)?;
            let wu = tape.mul(w, m)?;
            let t = tape.matmul_nt(x, wu)?;
            y = tape.add(y, t)?;
        }
    }
    match tags.v {
        Tag::None => {}
        Tag::Scalar | Tag::Vector => {
            // V constant along the input axis: x Vᵀ = rowsum(x) ⊗ v
            let ones_k = tape.constant(Tensor::full(&[1, k], 1.0));
            let rs = tape.matmul_nt(x, ones_k)?;
            let t = if tags.v == Tag::Scalar {
                let ones_d = tape.constant(Tensor::full(&[1, d], 1.0));
                let outer = tape.matmul(rs, ones_d)?;
                tape.mul_scalar(outer, p("v")?)?
            } else {
                let row = tape.reshape(p("v")?, &[1, d])?;
                tape.matmul(rs, row)?
            };
            y = tape.add(y, t)?;
        }
        Tag::LowRank(_) => {
            let xa = tape.matmul_nt(x, p("v_a")?)?;
            let t = tape.matmul_nt(xa, p("v_b")?)?;
            y = tape.add(y, t)?;
        }
    }
    let mut bias_terms: Vec<Var> = Vec::new();
    match tags.x {
        Tag::None => {}
        Tag::Scalar => {
            let ones = tape.constant(Tensor::full(&[1, k], 1.0));
            let rowsum = tape.matmul_nt(ones, w)?;
            let rowsum = tape.reshape(rowsum, &[d])?;
            bias_terms.push(tape.mul_scalar(rowsum, p("x")?)?);
        }
        Tag::Vector => {
            let prompt = tape.reshape(p("x")?, &[1, k])?;
            let wx = tape.matmul_nt(prompt, w)?;
            bias_terms.push(tape.reshape(wx, &[d])?);
        }
        Tag::LowRank(_) => return Err(Error::Adapter("X cannot be low-rank".into())),
    }
    if tags.y != Tag::None {
        let b0 = b.ok_or_else(|| Error::Adapter(format!("Y support on bias-free target `{target}`")))?;
        bias_terms.push(match tags.y {
            Tag::Scalar => tape.mul_scalar(b0, p("y")?)?,
            _ => tape.mul(b0, p("y")?)?,
        });
    }
    match tags.z {
        Tag::None => {}
        Tag::Scalar => y = tape.add_scalar(y, p("z")?)?,
        _ => bias_terms.push(p("z")?),
    }
    if let Some(b0) = b {
        bias_terms.push(b0);
    }
    if let Some((&first, rest)) = bias_terms.split_first() {
        let mut total = first;
        for &t in rest {
            total = tape.add(total, t)?;
        }
        y = tape.add_row(y, total)?;
    }
    debug_assert_eq!(tape.value(y).shape(), &[n, d]);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::init::{randn, seeded};

    fn layer() -> (Tensor, Tensor, Tensor) {
        let mut rng = seeded(1);
        (randn(&[3, 4], 1.0, &mut rng), randn(&[3], 1.0, &mut rng), randn(&[5, 4], 1.0, &mut rng))
    }

    fn base(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        glora_forward(x, w, Some(b), &GloraSupports::none()).unwrap()
    }

    #[test]
    fn none_tags_are_the_base_layer() {
        let (w, b, x) = layer();
        let mut t = Tape::new();
        let y = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let bv = t.constant(b.clone());
        let base_y = t.linear(y, wv, Some(bv)).unwrap();
        assert_eq!(t.value(base_y), &base(&x, &w, &b));
    }

    #[test]
    fn y_scalar_one_doubles_the_bias() {
        let (w, b, x) = layer();
        let s = GloraSupports {
            y: Support::Scalar(1.0),
            ..GloraSupports::none()
        };
        let want = base(&x, &w, &b).zip_map(&Tensor::from_fn(&[5, 3], |i| b.data()[i % 3]), |a, c| a + c).unwrap();
        assert!(glora_forward(&x, &w, Some(&b), &s).unwrap().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn u_scalar_scales_the_weight_path() {
        let (w, b, x) = layer();
        let s = GloraSupports {
            u: Support::Scalar(0.5),
            ..GloraSupports::none()
        };
        let xw = glora_forward(&x, &w, None, &GloraSupports::none()).unwrap();
        let want = Tensor::from_fn(&[5, 3], |i| 1.5 * xw.data()[i] + b.data()[i % 3]);
        assert!(glora_forward(&x, &w, Some(&b), &s).unwrap().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn tag_text_round_trip_and_validation() {
        for t in [Tag::None, Tag::Scalar, Tag::Vector, Tag::LowRank(4)] {
            assert_eq!(t.to_string().parse::<Tag>().unwrap(), t);
        }
        assert!("lowrank0".parse::<Tag>().is_err());
        let bad = GloraTags { x: Tag::LowRank(2), ..GloraTags::none() };
        assert!(bad.validate(4, 4, true).is_err());
        let no_bias = GloraTags { z: Tag::Scalar, ..GloraTags::none() };
        assert!(no_bias.validate(4, 4, false).is_err());
        assert!(GloraTags { u: Tag::LowRank(5), ..GloraTags::none() }.validate(4, 8, true).is_err());
        let full = GloraTags { u: Tag::LowRank(2), v: Tag::Vector, x: Tag::Vector, y: Tag::Scalar, z: Tag::Vector };
        assert_eq!(full.param_count(3, 4), 2 * (3 + 4) + 3 + 4 + 1 + 3);
    }

    #[test]
    fn unmerge_inverts_merge() {
        let (w, b, _) = layer();
        let mut rng = seeded(4);
        let s = GloraSupports {
            u: Support::LowRank { b: randn(&[3, 2], 0.3, &mut rng), a: randn(&[2, 4], 0.3, &mut rng) },
            v: Support::Vector(randn(&[3], 0.3, &mut rng)),
            x: Support::Vector(randn(&[4], 0.3, &mut rng)),
            y: Support::Scalar(0.2),
            z: Support::Vector(randn(&[3], 0.3, &mut rng)),
        };
        let (mw, mb) = merge_glora(&w, Some(&b), &s).unwrap();
        let (w0, b0) = unmerge_glora(&mw, mb.as_ref(), &s).unwrap();
        assert!(w0.max_abs_diff(&w) <= 1e-12);
        assert!(b0.unwrap().max_abs_diff(&b) <= 1e-12);
    }
}
