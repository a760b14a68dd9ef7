use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Scalar per-variable statistics over time and all grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation of every variable over the frames
/// at `times`.
pub fn compute_norm_stats(ds: &Dataset, times: &[usize]) -> Result<IndexMap<String, NormStats>> {
    if times.is_empty() {
        return Err(Error::Split("normalization statistics need at least one timestamp".into()));
    }
    let n = ds.manifest().frame_len();
    let mut buf = vec![0f32; n];
    let mut out = IndexMap::new();
    for (v, name) in ds.variables().iter().enumerate() {
        // Welford over every value
        let (mut count, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
        for &t in times {
            ds.read_frame_f32(v, t, &mut buf)?;
            for &x in &buf {
                count += 1;
                let x = x as f64;
                let d = x - mean;
                mean += d / count as f64;
                m2 += d * (x - mean);
            }
        }
        out.insert(
            name.clone(),
            NormStats {
                mean,
                std: (m2 / count as f64).max(0.0).sqrt(),
            },
        );
    }
    Ok(out)
}

/// `(x − mean) / std` per variable along the leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    variables: Vec<String>,
    stats: Vec<NormStats>,
}

impl Normalizer {
    /// Builds for `variables` from a name-keyed table. Rejects std ≤ 0.
    pub fn new(variables: &[String], table: &IndexMap<String, NormStats>) -> Result<Self> {
        let mut stats = Vec::with_capacity(variables.len());
        for v in variables {
            let s = *table.get(v).ok_or_else(|| Error::UnknownVariable(v.clone()))?;
            if !(s.std > 0.0) || !s.std.is_finite() || !s.mean.is_finite() {
                return Err(Error::ZeroStd(v.clone()));
            }
            stats.push(s);
        }
        Ok(Self {
            variables: variables.to_vec(),
            stats,
        })
    }

    pub fn identity(variables: &[String]) -> Self {
        Self {
            variables: variables.to_vec(),
            stats: vec![NormStats { mean: 0.0, std: 1.0 }; variables.len()],
        }
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn stats(&self) -> &[NormStats] {
        &self.stats
    }

    pub fn get(&self, name: &str) -> Result<NormStats> {
        self.variables
            .iter()
            .position(|v| v == name)
            .map(|i| self.stats[i])
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn select(&self, names: &[String]) -> Result<Self> {
        Ok(Self {
            variables: names.to_vec(),
            stats: names.iter().map(|n| self.get(n)).collect::<Result<_>>()?,
        })
    }

    fn apply(&self, field: &Tensor, f: impl Fn(f64, &NormStats) -> f64) -> Result<Tensor> {
        let shape = field.shape();
        if shape.first() != Some(&self.variables.len()) {
            return Err(crate::error::shape_err("normalize", shape, &[self.variables.len()]));
        }
        let per = field.len() / self.variables.len();
        let mut out = field.clone();
        for (chunk, s) in out.data_mut().chunks_mut(per).zip(&self.stats) {
            chunk.iter_mut().for_each(|x| *x = f(*x, s));
        }
        Ok(out)
    }

    /// `field` is `[D, ...]` with `D` matching this normalizer's variables.
    pub fn normalize(&self, field: &Tensor) -> Result<Tensor> {
        self.apply(field, |x, s| (x - s.mean) / s.std)
    }

    pub fn denormalize(&self, field: &Tensor) -> Result<Tensor> {
        self.apply(field, |x, s| x * s.std + s.mean)
    }

    /// In-place 32-bit normalization of one variable's values.
    pub fn normalize_f32(&self, var: usize, values: &mut [f32]) {
        let (m, s) = (self.stats[var].mean as f32, self.stats[var].std as f32);
        values.iter_mut().for_each(|x| *x = (*x - m) / s);
    }

    pub fn denormalize_f32(&self, var: usize, values: &mut [f32]) {
        let (m, s) = (self.stats[var].mean as f32, self.stats[var].std as f32);
        values.iter_mut().for_each(|x| *x = *x * s + m);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::init::{randn, seeded};

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unit_stats_are_identity() {
        let x = randn(&[2, 3, 4], 3.0, &mut seeded(1));
        let n = Normalizer::identity(&names(&["a", "b"]));
        assert_eq!(n.normalize(&x).unwrap(), x);
    }

    #[test]
    fn zero_std_names_the_variable() {
        let mut table = IndexMap::new();
        table.insert("a".to_string(), NormStats { mean: 1.0, std: 2.0 });
        table.insert("flat".to_string(), NormStats { mean: 5.0, std: 0.0 });
        let err = Normalizer::new(&names(&["a", "flat"]), &table).unwrap_err();
        assert!(matches!(&err, Error::ZeroStd(v) if v == "flat"), "{err}");
    }

    #[test]
    fn f32_round_trip() {
        let mut table = IndexMap::new();
        table.insert("a".to_string(), NormStats { mean: 1.5, std: 2.0 });
        let n = Normalizer::new(&names(&["a"]), &table).unwrap();
        let orig: Vec<f32> = randn(&[1000], 2.0, &mut seeded(2)).data().iter().map(|&x| (x + 1.5) as f32).collect();
        let mut v = orig.clone();
        n.normalize_f32(0, &mut v);
        n.denormalize_f32(0, &mut v);
        let err = v.iter().zip(&orig).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn f64_round_trip() {
        let mut table = IndexMap::new();
        table.insert("a".to_string(), NormStats { mean: 280.0, std: 15.0 });
        let n = Normalizer::new(&names(&["a"]), &table).unwrap();
        let x = randn(&[1, 5, 5], 15.0, &mut seeded(3)).map(|v| v + 280.0);
        let back = n.denormalize(&n.normalize(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-10);
    }
}
