//! Latitude-weighted RMSE and anomaly correlation, and bias maps.

use std::path::Path;

use crate::dataio::{write_dataset, DatasetManifest};
use crate::error::{shape_err, Error, Result};
use crate::grid::{GridSpec, LatWeights};
use crate::numcore::Tensor;

fn dims(pred: &Tensor, truth: &Tensor, weights: &LatWeights) -> Result<(usize, usize, usize)> {
    if pred.shape() != truth.shape() {
        return Err(shape_err("metric", pred.shape(), truth.shape()));
    }
    let [d, h, w] = pred.shape()[..] else {
        return Err(Error::Contract(format!("metrics expect [D, H, W], got {:?}", pred.shape())));
    };
    if weights.len() != h {
        return Err(Error::Contract(format!("{} latitude weights for {h} rows", weights.len())));
    }
    Ok((d, h, w))
}

/// Per-variable `sqrt(mean_{i,j} w_i (pred − truth)²)` for one time.
pub fn rmse_frame(pred: &Tensor, truth: &Tensor, weights: &LatWeights) -> Result<Vec<f64>> {
    let (d, h, w) = dims(pred, truth, weights)?;
    let (p, t) = (pred.data(), truth.data());
    Ok((0..d)
        .map(|v| {
            let mut s = 0.0;
            for i in 0..h {
                let row = (v * h + i) * w;
                let e: f64 = (row..row + w).map(|k| (p[k] - t[k]) * (p[k] - t[k])).sum();
                s += weights.w[i] * e;
            }
            (s / (h * w) as f64).sqrt()
        })
        .collect())
}

/// Per-variable weighted anomaly correlation for one time; `None` where
/// either anomaly field has zero weighted variance.
pub fn acc_frame(pred: &Tensor, truth: &Tensor, clim: &Tensor, weights: &LatWeights) -> Result<Vec<Option<f64>>> {
    let (d, h, w) = dims(pred, truth, weights)?;
    if clim.shape() != pred.shape() {
        return Err(shape_err("acc climatology", clim.shape(), pred.shape()));
    }
    let (p, t, c) = (pred.data(), truth.data(), clim.data());
    Ok((0..d)
        .map(|v| {
            let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
            for i in 0..h {
                let wi = weights.w[i];
                for k in (v * h + i) * w..(v * h + i + 1) * w {
                    let (a, b) = (p[k] - c[k], t[k] - c[k]);
                    pt += wi * a * b;
                    pp += wi * a * a;
                    tt += wi * b * b;
                }
            }
            (pp > 0.0 && tt > 0.0).then(|| (pt / (pp * tt).sqrt()).clamp(-1.0, 1.0))
        })
        .collect())
}

fn check_series(preds: &[Tensor], truths: &[Tensor]) -> Result<()> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Contract(format!(
            "metrics need equal, non-empty prediction and truth series ({} vs {})",
            preds.len(),
            truths.len()
        )));
    }
    Ok(())
}

/// Per-variable RMSE averaged over forecast times.
pub fn lat_weighted_rmse(preds: &[Tensor], truths: &[Tensor], weights: &LatWeights) -> Result<Vec<f64>> {
    check_series(preds, truths)?;
    let mut acc = vec![0.0; preds[0].shape()[0]];
    for (p, t) in preds.iter().zip(truths) {
        for (a, r) in acc.iter_mut().zip(rmse_frame(p, t, weights)?) {
            *a += r;
        }
    }
    Ok(acc.into_iter().map(|s| s / preds.len() as f64).collect())
}

/// Per-variable ACC averaged over forecast times. A zero-variance anomaly
/// at any time makes that variable undefined.
pub fn lat_weighted_acc(preds: &[Tensor], truths: &[Tensor], clim: &Tensor, weights: &LatWeights, names: &[String]) -> Result<Vec<f64>> {
    check_series(preds, truths)?;
    let d = preds[0].shape()[0];
    if names.len() != d {
        return Err(Error::Contract(format!("{} names for {d} variables", names.len())));
    }
    let mut acc = vec![0.0; d];
    for (p, t) in preds.iter().zip(truths) {
        for (v, a) in acc_frame(p, t, clim, weights)?.into_iter().enumerate() {
            acc[v] += a.ok_or_else(|| Error::UndefinedAcc { variable: names[v].clone() })?;
        }
    }
    Ok(acc.into_iter().map(|s| s / preds.len() as f64).collect())
}

/// Per-cell `pred − truth`.
pub fn bias_map(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    pred.zip_map(truth, |p, t| p - t)
}

/// Binary PPM (`P6`) of one `[H, W]` field, north at the top. Colors run
/// blue (`−limit`) through white (0) to red (`+limit`); values beyond the
/// limit saturate. `limit = 0` renders every cell white.
pub fn render_ppm(field: &[f64], h: usize, w: usize, limit: f64) -> Result<Vec<u8>> {
    if field.len() != h * w {
        return Err(Error::Contract(format!("{} values for a {h}×{w} image", field.len())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for row in (0..h).rev() {
        for &x in &field[row * w..(row + 1) * w] {
            let t = if limit > 0.0 && x.is_finite() { (x / limit).clamp(-1.0, 1.0) } else { 0.0 };
            let fade = |s: f64| (255.0 * (1.0 - s.abs())).round() as u8;
            let rgb = if t < 0.0 { [fade(t), fade(t), 255] } else { [255, fade(t), fade(t)] };
            out.extend_from_slice(&rgb);
        }
    }
    Ok(out)
}

/// Symmetric color limit: the largest finite |value|.
pub fn symmetric_limit(values: &[f64]) -> f64 {
    values.iter().filter(|x| x.is_finite()).fold(0.0, |m, x| m.max(x.abs()))
}

/// Writes `<var>.ppm` images (one limit per variable) and the raw bias
/// field as a one-timestamp dataset under `dir/raw`.
pub fn write_bias_maps(dir: &Path, grid: &GridSpec, names: &[String], bias: &Tensor, timestamp: i64) -> Result<()> {
    let [d, h, w] = bias.shape()[..] else {
        return Err(Error::Contract(format!("bias map must be [D, H, W], got {:?}", bias.shape())));
    };
    if names.len() != d || grid.n_lat != h || grid.n_lon != w {
        return Err(Error::Contract("bias map names or grid do not match the field".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut fields = Vec::with_capacity(d);
    for (v, name) in names.iter().enumerate() {
        let slice = &bias.data()[v * h * w..(v + 1) * h * w];
        std::fs::write(dir.join(format!("{name}.ppm")), render_ppm(slice, h, w, symmetric_limit(slice))?)?;
        fields.push(slice.iter().map(|&x| x as f32).collect());
    }
    let manifest = DatasetManifest::new(grid.clone(), names.to_vec(), vec![timestamp])?;
    write_dataset(dir.join("raw"), &manifest, fields)
}
