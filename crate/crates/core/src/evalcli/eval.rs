use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{acc_frame, rmse_frame};
use crate::dataio::{Split, WindowIndex};
use crate::error::{Error, Result};
use crate::grid::{crop_indices, latitude_weights, CropIndex, GridSpec, RegionBox};
use crate::model::ForecastModel;
use crate::numcore::Tensor;
use crate::train::{strided, ForecastData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: Split,
    /// Caps windows per lead (evenly strided subset).
    pub max_windows: Option<usize>,
    pub checkpoint: String,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            max_windows: None,
            checkpoint: String::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetadata {
    /// Grid the metrics were computed on.
    pub grid: GridSpec,
    pub region: Option<RegionBox>,
    pub checkpoint: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricEntry {
    pub variable: String,
    pub lead_hours: u32,
    /// Physical units.
    pub rmse: f64,
    /// `None` when undefined (zero anomaly variance at some time).
    pub acc: Option<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub metadata: ReportMetadata,
    /// Ordered by lead, then variable.
    pub entries: Vec<MetricEntry>,
}

pub const METRICS_CSV_HEADER: &str = "variable,lead_hours,rmse,acc,n_samples";

impl MetricsReport {
    pub fn get(&self, variable: &str, lead: u32) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.variable == variable && e.lead_hours == lead)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Fixed columns [`METRICS_CSV_HEADER`]; floats in shortest round-trip
    /// form, missing ACC as an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_CSV_HEADER}\n");
        for e in &self.entries {
            let acc = e.acc.map(|a| format!("{a:?}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{:?},{},{}", e.variable, e.lead_hours, e.rmse, acc, e.n_samples);
        }
        out
    }

    pub fn leads(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.entries.iter().map(|e| e.lead_hours).collect();
        l.dedup();
        l
    }
}

/// The model's physical-space forecast for one window.
pub fn model_predictor<'a>(model: &'a ForecastModel, data: &'a ForecastData) -> impl FnMut(&WindowIndex, &Tensor) -> Result<Tensor> + 'a {
    move |w, input| {
        let x = data.input_norm.normalize(input)?;
        let y = model.predict(&x, &data.inputs, w.lead_hours, &data.window)?;
        data.target_norm.denormalize(&y)
    }
}

/// Runs the model over the split's windows and scores denormalized
/// forecasts, cropped to `region` when given.
pub fn evaluate(model: &ForecastModel, data: &ForecastData, region: Option<&RegionBox>, leads: &[u32], opts: &EvalOptions) -> Result<MetricsReport> {
    evaluate_with(data, region, leads, opts, model_predictor(model, data))
}

/// [`evaluate`] with any forecaster mapping `(window, physical input)` to a
/// physical `[D̂, H', W']` forecast on the data window.
pub fn evaluate_with(
    data: &ForecastData,
    region: Option<&RegionBox>,
    leads: &[u32],
    opts: &EvalOptions,
    mut predict: impl FnMut(&WindowIndex, &Tensor) -> Result<Tensor>,
) -> Result<MetricsReport> {
    if leads.is_empty() {
        return Err(Error::Contract("evaluation needs at least one lead".into()));
    }
    let crop = match region {
        Some(r) => crop_indices(&data.grid, r)?,
        None => CropIndex::full(&data.grid),
    };
    let grid = data.grid.subgrid(&crop)?;
    let weights = latitude_weights(&grid)?;
    let clim = crop.apply(&data.climatology()?.mean)?;
    let mut entries = Vec::new();
    for &lead in leads {
        let windows = strided(&data.windows(opts.split, &[lead]), opts.max_windows);
        if windows.is_empty() {
            return Err(Error::Train(format!("no {} windows for lead {lead}h", opts.split)));
        }
        let d = data.targets.len();
        let mut rmse = vec![0.0; d];
        let mut acc: Vec<Option<f64>> = vec![Some(0.0); d];
        // reduction in window (timestamp) order
        for w in &windows {
            let (input, truth) = data.physical(w)?;
            let pred = predict(w, &input)?;
            let (pred, truth) = (crop.apply(&pred)?, crop.apply(&truth)?);
            for (s, r) in rmse.iter_mut().zip(rmse_frame(&pred, &truth, &weights)?) {
                *s += r;
            }
            for (s, a) in acc.iter_mut().zip(acc_frame(&pred, &truth, &clim, &weights)?) {
                *s = match (*s, a) {
                    (Some(s), Some(a)) => Some(s + a),
                    _ => None,
                };
            }
        }
        let n = windows.len() as f64;
        for (v, name) in data.targets.iter().enumerate() {
            entries.push(MetricEntry {
                variable: name.clone(),
                lead_hours: lead,
                rmse: rmse[v] / n,
                acc: acc[v].map(|a| a / n),
                n_samples: windows.len(),
            });
        }
    }
    Ok(MetricsReport {
        metadata: ReportMetadata {
            grid,
            region: region.copied(),
            checkpoint: opts.checkpoint.clone(),
            seed: opts.seed,
            split: opts.split,
        },
        entries,
    })
}
