//! Low-rank update `ΔW = scaling · B A` on a frozen `W ∈ ℝ^{d×k}`.

use crate::error::{shape_err, Error, Result};
use crate::numcore::init::{randn, Rng};
use crate::numcore::{Tape, Tensor};

/// Standalone low-rank adapter for one linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target_path: String,
    /// `[r × k]`
    pub a: Tensor,
    /// `[d × r]`
    pub b: Tensor,
    pub rank: usize,
    pub scaling: f64,
}

pub(crate) fn check_rank(rank: usize, d: usize, k: usize) -> Result<()> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::Adapter(format!("rank {rank} must be in 1..=min({d}, {k})")));
    }
    Ok(())
}

/// Seeded `A` with std `1/√k`; `B` is zero so the update starts at zero.
pub(crate) fn init_factors(rank: usize, d: usize, k: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    (randn(&[rank, k], 1.0 / (k as f64).sqrt(), rng), Tensor::zeros(&[d, rank]))
}

impl LoraAdapter {
    /// `alpha = None` means `alpha = rank` (scaling 1).
    pub fn new(target_path: impl Into<String>, d: usize, k: usize, rank: usize, alpha: Option<f64>, rng: &mut Rng) -> Result<Self> {
        check_rank(rank, d, k)?;
        let (a, b) = init_factors(rank, d, k, rng);
        Ok(Self {
            target_path: target_path.into(),
            a,
            b,
            rank,
            scaling: alpha.unwrap_or(rank as f64) / rank as f64,
        })
    }

    pub fn from_factors(target_path: impl Into<String>, a: Tensor, b: Tensor, scaling: f64) -> Result<Self> {
        let (ad, bd) = (a.shape().to_vec(), b.shape().to_vec());
        if ad.len() != 2 || bd.len() != 2 || ad[0] != bd[1] {
            return Err(shape_err("lora factors", &bd, &ad));
        }
        check_rank(ad[0], bd[0], ad[1])?;
        Ok(Self {
            target_path: target_path.into(),
            a,
            b,
            rank: ad[0],
            scaling,
        })
    }

    /// `(d, k)` of the adapted map.
    pub fn dims(&self) -> (usize, usize) {
        (self.b.shape()[0], self.a.shape()[1])
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    fn check_weight(&self, w: &Tensor) -> Result<()> {
        let (d, k) = self.dims();
        if w.shape() != [d, k] {
            return Err(shape_err("lora target", w.shape(), &[d, k]));
        }
        Ok(())
    }

    /// Dense `scaling · B A`.
    pub fn delta(&self) -> Tensor {
        let (d, k) = self.dims();
        let r = self.rank;
        let (a, b) = (self.a.data(), self.b.data());
        Tensor::from_fn(&[d, k], |i| {
            let (row, col) = (i / k, i % k);
            self.scaling * (0..r).map(|j| b[row * r + j] * a[j * k + col]).sum::<f64>()
        })
    }

    /// `x Wᵀ + b + scaling · (x Aᵀ) Bᵀ` for `x: [N × k]`; `BA` is never formed.
    pub fn forward(&self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        self.check_weight(w)?;
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let bv = bias.map(|b| t.constant(b.clone()));
        let (av, bm) = (t.constant(self.a.clone()), t.constant(self.b.clone()));
        let base = t.linear(xv, wv, bv)?;
        let xa = t.matmul_nt(xv, av)?;
        let br = t.matmul_nt(xa, bm)?;
        let br = t.scale(br, self.scaling)?;
        let y = t.add(base, br)?;
        Ok(t.value(y).clone())
    }

    /// `W + scaling · B A`.
    pub fn merge(&self, w: &Tensor) -> Result<Tensor> {
        self.check_weight(w)?;
        w.zip_map(&self.delta(), |a, b| a + b)
    }

    /// `W − scaling · B A`.
    pub fn unmerge(&self, w: &Tensor) -> Result<Tensor> {
        self.check_weight(w)?;
        w.zip_map(&self.delta(), |a, b| a - b)
    }
}
