//! Dense reference attention and a key-tiled online-softmax kernel.
//!
//! Both compute `softmax(scale · Q Kᵀ) V` per head for `Q: [h, n_q, d_h]`,
//! `K, V: [h, n_k, d_h]`. The streaming kernel walks key/value tiles keeping a
//! running row max `m`, normalizer `l` and a rescaled accumulator that lives
//! in the output buffer, so its scratch space is `n_q · tile_k + 2 · n_q`
//! scalars per head. Its backward recomputes score tiles from the stored
//! per-row log-sum-exp instead of keeping probabilities.

use std::fmt::Write as _;
use std::time::Instant;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{CustomOp, Tape, Tensor, Var};

pub const DEFAULT_TILE_K: usize = 32;

/// Selects the attention implementation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionKernel {
    Naive,
    Streaming { tile_k: usize },
}

impl Default for AttentionKernel {
    fn default() -> Self {
        AttentionKernel::Streaming { tile_k: DEFAULT_TILE_K }
    }
}

/// Sizes of one attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub heads: usize,
    pub n_q: usize,
    pub n_k: usize,
    pub d_h: usize,
}

impl AttnDims {
    pub fn from_shapes(q: &[usize], k: &[usize], v: &[usize]) -> Result<Self> {
        let ([h, n_q, d], [hk, n_k, dk]) = (q, k) else {
            return Err(Error::Contract(format!(
                "attention expects rank-3 [h, n, d_h] inputs, got q {q:?}, k {k:?}"
            )));
        };
        if h != hk || d != dk {
            return Err(shape_err("attention q/k", q, k));
        }
        if k != v {
            return Err(shape_err("attention k/v", k, v));
        }
        Ok(Self {
            heads: *h,
            n_q: *n_q,
            n_k: *n_k,
            d_h: *d,
        })
    }

    pub fn default_scale(&self) -> f64 {
        1.0 / (self.d_h as f64).sqrt()
    }

    pub fn score_matrix_scalars(&self) -> usize {
        self.n_q * self.n_k
    }
}

/// Query, key and value tensors plus the score scale.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Defaults to `1/√d_h`.
    pub scale: Option<f64>,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Self {
        Self { q, k, v, scale: None }
    }

    pub fn dims(&self) -> Result<AttnDims> {
        AttnDims::from_shapes(self.q.shape(), self.k.shape(), self.v.shape())
    }

    pub fn scale(&self) -> Result<f64> {
        let s = self.scale.unwrap_or(self.dims()?.default_scale());
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Contract(format!("attention scale must be > 0, got {s}")));
        }
        Ok(s)
    }
}

/// Scratch accounting for the kernels, in scalars of the kernel's element
/// type. Inputs and the output buffer are not auxiliary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AuxMeter {
    live: usize,
    peak: usize,
}

impl AuxMeter {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc<T: Float>(&mut self, n: usize) -> Vec<T> {
        self.live += n;
        self.peak = self.peak.max(self.live);
        vec![T::zero(); n]
    }

    fn free<T>(&mut self, buf: Vec<T>) {
        self.live -= buf.len();
    }

    pub fn peak_scalars(&self) -> usize {
        self.peak
    }

    pub fn peak_bytes<T>(&self) -> usize {
        self.peak * std::mem::size_of::<T>()
    }
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn check_len<T>(buf: &[T], want: usize, what: &'static str) -> Result<()> {
    if buf.len() != want {
        return Err(Error::Contract(format!("{what}: {} values, expected {want}", buf.len())));
    }
    Ok(())
}

/// Materializes the full `n_q × n_k` score matrix per head.
pub fn naive_kernel<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    scale: T,
    meter: &mut AuxMeter,
) -> Result<Vec<T>> {
    let AttnDims { heads, n_q, n_k, d_h } = dims;
    check_len(q, heads * n_q * d_h, "q")?;
    check_len(k, heads * n_k * d_h, "k")?;
    check_len(v, heads * n_k * d_h, "v")?;
    if n_k == 0 || d_h == 0 {
        return Err(Error::Contract("attention needs n_k ≥ 1 and d_h ≥ 1".into()));
    }
    let mut out = vec![T::zero(); heads * n_q * d_h];
    let mut scores: Vec<T> = meter.alloc(n_q * n_k);
    for h in 0..heads {
        let (qh, kh, vh) = (head(q, h, n_q, d_h), head(k, h, n_k, d_h), head(v, h, n_k, d_h));
        for i in 0..n_q {
            let row = &mut scores[i * n_k..(i + 1) * n_k];
            let qi = &qh[i * d_h..(i + 1) * d_h];
            for (j, s) in row.iter_mut().enumerate() {
                *s = scale * dot(qi, &kh[j * d_h..(j + 1) * d_h]);
            }
            softmax_row(row);
        }
        let oh = &mut out[h * n_q * d_h..(h + 1) * n_q * d_h];
        for i in 0..n_q {
            let oi = &mut oh[i * d_h..(i + 1) * d_h];
            for j in 0..n_k {
                let p = scores[i * n_k + j];
                for (o, &x) in oi.iter_mut().zip(&vh[j * d_h..(j + 1) * d_h]) {
                    *o = *o + p * x;
                }
            }
        }
    }
    meter.free(scores);
    Ok(out)
}

fn softmax_row<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    row.iter_mut().for_each(|x| *x = *x / total);
}

fn head<T>(buf: &[T], h: usize, n: usize, d: usize) -> &[T] {
    &buf[h * n * d..(h + 1) * n * d]
}

/// Online-softmax attention over key tiles of width `tile_k`. Returns the
/// output and the per-row log-sum-exp of the scaled scores (`[h × n_q]`).
pub fn streaming_kernel<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    scale: T,
    tile_k: usize,
    meter: &mut AuxMeter,
) -> Result<(Vec<T>, Vec<T>)> {
    let AttnDims { heads, n_q, n_k, d_h } = dims;
    check_len(q, heads * n_q * d_h, "q")?;
    check_len(k, heads * n_k * d_h, "k")?;
    check_len(v, heads * n_k * d_h, "v")?;
    if n_k == 0 || d_h == 0 {
        return Err(Error::Contract("attention needs n_k ≥ 1 and d_h ≥ 1".into()));
    }
    if tile_k == 0 {
        return Err(Error::Contract("tile_k must be ≥ 1".into()));
    }
    let tile_k = tile_k.min(n_k);
    let mut out = vec![T::zero(); heads * n_q * d_h];
    let mut lse = vec![T::zero(); heads * n_q];
    let mut tile: Vec<T> = meter.alloc(n_q * tile_k);
    let mut m: Vec<T> = meter.alloc(n_q);
    let mut l: Vec<T> = meter.alloc(n_q);
    for h in 0..heads {
        let (qh, kh, vh) = (head(q, h, n_q, d_h), head(k, h, n_k, d_h), head(v, h, n_k, d_h));
        let oh = &mut out[h * n_q * d_h..(h + 1) * n_q * d_h];
        m.iter_mut().for_each(|x| *x = T::neg_infinity());
        l.iter_mut().for_each(|x| *x = T::zero());
        for k0 in (0..n_k).step_by(tile_k) {
            let kt = tile_k.min(n_k - k0);
            for i in 0..n_q {
                let qi = &qh[i * d_h..(i + 1) * d_h];
                let s = &mut tile[i * tile_k..i * tile_k + kt];
                let mut tile_max = T::neg_infinity();
                for (jj, sj) in s.iter_mut().enumerate() {
                    let j = k0 + jj;
                    *sj = scale * dot(qi, &kh[j * d_h..(j + 1) * d_h]);
                    tile_max = tile_max.max(*sj);
                }
                let m_new = m[i].max(tile_max);
                let alpha = if m[i] == T::neg_infinity() { T::zero() } else { (m[i] - m_new).exp() };
                let mut row_sum = T::zero();
                for sj in s.iter_mut() {
                    *sj = (*sj - m_new).exp();
                    row_sum = row_sum + *sj;
                }
                l[i] = l[i] * alpha + row_sum;
                let oi = &mut oh[i * d_h..(i + 1) * d_h];
                oi.iter_mut().for_each(|o| *o = *o * alpha);
                for (jj, &p) in s.iter().enumerate() {
                    let j = k0 + jj;
                    for (o, &x) in oi.iter_mut().zip(&vh[j * d_h..(j + 1) * d_h]) {
                        *o = *o + p * x;
                    }
                }
                m[i] = m_new;
            }
        }
        for i in 0..n_q {
            let inv = T::one() / l[i];
            oh[i * d_h..(i + 1) * d_h].iter_mut().for_each(|o| *o = *o * inv);
            lse[h * n_q + i] = m[i] + l[i].ln();
        }
    }
    meter.free(tile);
    meter.free(m);
    meter.free(l);
    Ok((out, lse))
}

/// Gradients `(dQ, dK, dV)` by key-tile recomputation from the saved
/// log-sum-exp. Scratch is two `n_q × tile_k` tiles plus `n_q` row terms.
#[allow(clippy::too_many_arguments)]
pub fn streaming_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &[f64],
    lse: &[f64],
    grad: &[f64],
    dims: AttnDims,
    scale: f64,
    tile_k: usize,
    meter: &mut AuxMeter,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims { heads, n_q, n_k, d_h } = dims;
    let tile_k = tile_k.clamp(1, n_k);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut p: Vec<f64> = meter.alloc(n_q * tile_k);
    let mut ds: Vec<f64> = meter.alloc(n_q * tile_k);
    let mut row_dot: Vec<f64> = meter.alloc(n_q);
    for h in 0..heads {
        let (qh, kh, vh) = (head(q, h, n_q, d_h), head(k, h, n_k, d_h), head(v, h, n_k, d_h));
        let (oh, gh) = (head(out, h, n_q, d_h), head(grad, h, n_q, d_h));
        for i in 0..n_q {
            row_dot[i] = dot(&gh[i * d_h..(i + 1) * d_h], &oh[i * d_h..(i + 1) * d_h]);
        }
        for k0 in (0..n_k).step_by(tile_k) {
            let kt = tile_k.min(n_k - k0);
            for i in 0..n_q {
                let qi = &qh[i * d_h..(i + 1) * d_h];
                let gi = &gh[i * d_h..(i + 1) * d_h];
                let li = lse[h * n_q + i];
                for jj in 0..kt {
                    let j = k0 + jj;
                    let pij = (scale * dot(qi, &kh[j * d_h..(j + 1) * d_h]) - li).exp();
                    let dpij = dot(gi, &vh[j * d_h..(j + 1) * d_h]);
                    p[i * tile_k + jj] = pij;
                    ds[i * tile_k + jj] = pij * (dpij - row_dot[i]);
                }
            }
            for jj in 0..kt {
                let j = k0 + jj;
                let dvj = &mut dv[(h * n_k + j) * d_h..(h * n_k + j + 1) * d_h];
                let dkj = &mut dk[(h * n_k + j) * d_h..(h * n_k + j + 1) * d_h];
                for i in 0..n_q {
                    let (pij, dsij) = (p[i * tile_k + jj], scale * ds[i * tile_k + jj]);
                    for c in 0..d_h {
                        dvj[c] += pij * gh[i * d_h + c];
                        dkj[c] += dsij * qh[i * d_h + c];
                    }
                }
            }
            for i in 0..n_q {
                let dqi = &mut dq[(h * n_q + i) * d_h..(h * n_q + i + 1) * d_h];
                for jj in 0..kt {
                    let dsij = scale * ds[i * tile_k + jj];
                    for (d, &x) in dqi.iter_mut().zip(&kh[(k0 + jj) * d_h..(k0 + jj + 1) * d_h]) {
                        *d += dsij * x;
                    }
                }
            }
        }
    }
    meter.free(p);
    meter.free(ds);
    meter.free(row_dot);
    (dq, dk, dv)
}

pub fn naive_attention(inputs: &AttentionInputs) -> Result<Tensor> {
    let dims = inputs.dims()?;
    let out = naive_kernel(inputs.q.data(), inputs.k.data(), inputs.v.data(), dims, inputs.scale()?, &mut AuxMeter::new())?;
    Tensor::new(inputs.q.shape(), out)
}

pub fn streaming_attention(inputs: &AttentionInputs, tile_k: usize) -> Result<Tensor> {
    let dims = inputs.dims()?;
    let (out, _) = streaming_kernel(
        inputs.q.data(),
        inputs.k.data(),
        inputs.v.data(),
        dims,
        inputs.scale()?,
        tile_k,
        &mut AuxMeter::new(),
    )?;
    Tensor::new(inputs.q.shape(), out)
}

/// One query `[1 × d]` attending over `V` tokens `[V × d]` used as both keys
/// and values; returns `[d]`.
pub fn cross_attention(query: &Tensor, keys_values: &Tensor) -> Result<Tensor> {
    let (&[1, d], &[n, dk]) = (query.shape(), keys_values.shape()) else {
        return Err(shape_err("cross_attention", query.shape(), keys_values.shape()));
    };
    if n == 0 {
        return Err(Error::Contract("cross_attention needs at least one token".into()));
    }
    if d != dk {
        return Err(shape_err("cross_attention", query.shape(), keys_values.shape()));
    }
    let dims = AttnDims { heads: 1, n_q: 1, n_k: n, d_h: d };
    let out = naive_kernel(query.data(), keys_values.data(), keys_values.data(), dims, dims.default_scale(), &mut AuxMeter::new())?;
    Tensor::new(&[d], out)
}

struct NaiveOp {
    dims: AttnDims,
    scale: f64,
}

impl CustomOp for NaiveOp {
    fn name(&self) -> &'static str {
        "naive_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let AttnDims { heads, n_q, n_k, d_h } = self.dims;
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let g = grad.data();
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut p = vec![0.0; n_q * n_k];
        for h in 0..heads {
            let (qh, kh, vh, gh) = (head(q, h, n_q, d_h), head(k, h, n_k, d_h), head(v, h, n_k, d_h), head(g, h, n_q, d_h));
            for i in 0..n_q {
                let row = &mut p[i * n_k..(i + 1) * n_k];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = self.scale * dot(&qh[i * d_h..(i + 1) * d_h], &kh[j * d_h..(j + 1) * d_h]);
                }
                softmax_row(row);
            }
            for i in 0..n_q {
                let gi = &gh[i * d_h..(i + 1) * d_h];
                let dp: Vec<f64> = (0..n_k).map(|j| dot(gi, &vh[j * d_h..(j + 1) * d_h])).collect();
                let pr = &p[i * n_k..(i + 1) * n_k];
                let inner = dot(pr, &dp);
                for j in 0..n_k {
                    let ds = self.scale * pr[j] * (dp[j] - inner);
                    for c in 0..d_h {
                        dq[(h * n_q + i) * d_h + c] += ds * kh[j * d_h + c];
                        dk[(h * n_k + j) * d_h + c] += ds * qh[i * d_h + c];
                        dv[(h * n_k + j) * d_h + c] += pr[j] * gi[c];
                    }
                }
            }
        }
        Ok(pack_grads(inputs, needs, [dq, dk, dv]))
    }
}

fn pack_grads(inputs: &[&Tensor], needs: &[bool], grads: [Vec<f64>; 3]) -> Vec<Option<Tensor>> {
    grads
        .into_iter()
        .enumerate()
        .map(|(i, g)| needs[i].then(|| Tensor::new(inputs[i].shape(), g).expect("gradient matches input shape")))
        .collect()
}

struct StreamingOp {
    dims: AttnDims,
    scale: f64,
    tile_k: usize,
    lse: Vec<f64>,
}

impl CustomOp for StreamingOp {
    fn name(&self) -> &'static str {
        "streaming_attention"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (dq, dk, dv) = streaming_backward(
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            output.data(),
            &self.lse,
            grad.data(),
            self.dims,
            self.scale,
            self.tile_k,
            &mut AuxMeter::new(),
        );
        Ok(pack_grads(inputs, needs, [dq, dk, dv]))
    }
}

/// Records `softmax(scale · Q Kᵀ) V` on the tape with the chosen kernel.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, kernel: AttentionKernel, scale: Option<f64>) -> Result<Var> {
    let dims = AttnDims::from_shapes(tape.value(q).shape(), tape.value(k).shape(), tape.value(v).shape())?;
    let scale = scale.unwrap_or(dims.default_scale());
    let shape = tape.value(q).shape().to_vec();
    let (qd, kd, vd) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    match kernel {
        AttentionKernel::Naive => {
            let out = naive_kernel(qd, kd, vd, dims, scale, &mut AuxMeter::new())?;
            tape.custom(&[q, k, v], Tensor::new(&shape, out)?, Box::new(NaiveOp { dims, scale }))
        }
        AttentionKernel::Streaming { tile_k } => {
            let (out, lse) = streaming_kernel(qd, kd, vd, dims, scale, tile_k, &mut AuxMeter::new())?;
            let op = StreamingOp { dims, scale, tile_k, lse };
            tape.custom(&[q, k, v], Tensor::new(&shape, out)?, Box::new(op))
        }
    }
}

/// One row of the kernel benchmark.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub n: usize,
    pub d_h: usize,
    pub tile_k: usize,
    pub peak_aux_bytes: usize,
    pub score_matrix_bytes: usize,
    pub wall_ms: f64,
    pub max_abs_dev: f64,
}

/// Times both kernels on random `[1, n, d_h]` inputs for each `n`.
pub fn bench_attention(sizes: &[usize], d_h: usize, tile_k: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = crate::numcore::init::seeded(seed);
    let mut rows = Vec::new();
    for &n in sizes {
        let dims = AttnDims { heads: 1, n_q: n, n_k: n, d_h };
        let gen = |rng: &mut _| crate::numcore::init::randn(&[1, n, d_h], 1.0, rng);
        let (q, k, v) = (gen(&mut rng), gen(&mut rng), gen(&mut rng));
        let scale = dims.default_scale();
        let dense_bytes = dims.score_matrix_scalars() * 8;
        let reps = reps.max(1);

        let mut meter = AuxMeter::new();
        let start = Instant::now();
        let mut naive = Vec::new();
        for _ in 0..reps {
            naive = naive_kernel(q.data(), k.data(), v.data(), dims, scale, &mut meter)?;
        }
        let naive_ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
        rows.push(BenchRow {
            kernel: "naive",
            n,
            d_h,
            tile_k: n,
            peak_aux_bytes: meter.peak_bytes::<f64>(),
            score_matrix_bytes: dense_bytes,
            wall_ms: naive_ms,
            max_abs_dev: 0.0,
        });

        let mut meter = AuxMeter::new();
        let start = Instant::now();
        let mut stream = Vec::new();
        for _ in 0..reps {
            stream = streaming_kernel(q.data(), k.data(), v.data(), dims, scale, tile_k, &mut meter)?.0;
        }
        let stream_ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
        let dev = naive.iter().zip(&stream).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rows.push(BenchRow {
            kernel: "streaming",
            n,
            d_h,
            tile_k: tile_k.min(n),
            peak_aux_bytes: meter.peak_bytes::<f64>(),
            score_matrix_bytes: dense_bytes,
            wall_ms: stream_ms,
            max_abs_dev: dev,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("kernel,n,d_h,tile_k,peak_aux_bytes,score_matrix_bytes,aux_fraction,wall_ms,max_abs_dev\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.3},{:.3e}",
            r.kernel,
            r.n,
            r.d_h,
            r.tile_k,
            r.peak_aux_bytes,
            r.score_matrix_bytes,
            r.peak_aux_bytes as f64 / r.score_matrix_bytes as f64,
            r.wall_ms,
            r.max_abs_dev
        );
    }
    out
}
