//! Seeded advection-diffusion fields on a lat-lon grid.
//!
//! Every variable is `offset + scale * (profile(lat) + φ)`, where the anomaly
//! `φ` starts as a sum of random low zonal wavenumbers and evolves by
//! semi-Lagrangian zonal advection with a latitude-dependent speed, explicit
//! diffusion and zonal-mean-free smooth noise.

use std::f64::consts::PI;

use chrono::NaiveDate;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{datetime_to_hours, Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::numcore::init::{seeded, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthVariable {
    pub name: String,
    pub offset: f64,
    pub scale: f64,
    /// Amplitude of the static `cos(2·lat)` background.
    pub profile: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub variables: Vec<SynthVariable>,
    /// `YYYY-MM-DD`, first timestamp at 00 UTC.
    pub start_date: String,
    pub step_hours: u32,
    /// Peak zonal advection per step, in grid cells.
    pub advection_cells: f64,
    /// Explicit diffusion coefficient in grid units (stable below 0.25).
    pub diffusion: f64,
    /// Standard deviation of the per-step noise increment.
    pub noise: f64,
    /// Highest zonal wavenumber of the initial state and noise.
    pub max_wavenumber: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let v = |name: &str, offset, scale, profile| SynthVariable {
            name: name.into(),
            offset,
            scale,
            profile,
        };
        Self {
            variables: vec![
                v("geopotential_500", 54_000.0, 2_500.0, 1.2),
                v("2m_temperature", 278.0, 18.0, 1.5),
                v("relative_humidity_850", 60.0, 15.0, 0.4),
                v("specific_humidity_850", 0.005, 0.002, 1.0),
                v("temperature_850", 274.0, 14.0, 1.4),
                v("10m_u_component_of_wind", 0.0, 5.0, -0.8),
                v("10m_v_component_of_wind", 0.0, 4.0, 0.0),
            ],
            start_date: "2015-01-01".into(),
            step_hours: 12,
            advection_cells: 0.6,
            diffusion: 0.02,
            noise: 0.03,
            max_wavenumber: 4,
        }
    }
}

impl SynthConfig {
    pub fn variable_names(&self) -> Vec<String> {
        self.variables.iter().map(|v| v.name.clone()).collect()
    }

    /// No advection, diffusion or noise: every frame equals the first.
    pub fn frozen() -> Self {
        Self {
            advection_cells: 0.0,
            diffusion: 0.0,
            noise: 0.0,
            ..Self::default()
        }
    }
}

/// Dataset with the default configuration.
pub fn synth_generate(grid: &GridSpec, n_steps: usize, seed: u64) -> Result<Dataset> {
    synth_generate_with(grid, n_steps, seed, &SynthConfig::default())
}

pub fn synth_generate_with(grid: &GridSpec, n_steps: usize, seed: u64, cfg: &SynthConfig) -> Result<Dataset> {
    if n_steps < 2 {
        return Err(Error::Dataset(format!("synthetic dataset needs ≥ 2 steps, got {n_steps}")));
    }
    if cfg.step_hours == 0 || !(0.0..0.25).contains(&cfg.diffusion) || cfg.noise < 0.0 {
        return Err(Error::Dataset(format!(
            "invalid generator settings: step {}h, diffusion {}, noise {}",
            cfg.step_hours, cfg.diffusion, cfg.noise
        )));
    }
    let start = NaiveDate::parse_from_str(&cfg.start_date, "%Y-%m-%d")
        .map_err(|e| Error::Dataset(format!("bad start date `{}`: {e}", cfg.start_date)))?;
    let t0 = datetime_to_hours(start.and_hms_opt(0, 0, 0).expect("midnight"));
    let timestamps = (0..n_steps as i64).map(|k| t0 + k * cfg.step_hours as i64).collect();
    let manifest = DatasetManifest::new(grid.clone(), cfg.variable_names(), timestamps)?;

    let (h, w) = (grid.n_lat, grid.n_lon);
    let lat: Vec<f64> = grid.lat_centers.iter().map(|l| l.to_radians()).collect();
    // eastward cells per step: jets in mid-latitudes, weak reversed flow near the equator
    let speed: Vec<f64> = lat
        .iter()
        .map(|&p| cfg.advection_cells * (p.cos().powi(2) * (0.35 + (2.0 * p).sin().powi(2)) - 0.15 * p.cos().powi(8)))
        .collect();
    let mut rng = seeded(seed);
    let mut fields = Vec::with_capacity(cfg.variables.len());
    for var in &cfg.variables {
        let mut phi = smooth_modes(&lat, w, cfg.max_wavenumber, 0.5, &mut rng);
        let background: Vec<f64> = lat.iter().map(|&p| var.profile * (2.0 * p).cos()).collect();
        let mut out = Vec::with_capacity(n_steps * h * w);
        let emit = |phi: &[f64], out: &mut Vec<f32>| {
            for i in 0..h {
                for j in 0..w {
                    out.push((var.offset + var.scale * (background[i] + phi[i * w + j])) as f32);
                }
            }
        };
        emit(&phi, &mut out);
        let mut scratch = vec![0.0; h * w];
        for _ in 1..n_steps {
            advect(&phi, &mut scratch, &speed, w);
            diffuse(&scratch, &mut phi, cfg.diffusion, h, w);
            if cfg.noise > 0.0 {
                let kick = smooth_modes(&lat, w, cfg.max_wavenumber, cfg.noise, &mut rng);
                phi.iter_mut().zip(&kick).for_each(|(p, k)| *p += k);
            }
            emit(&phi, &mut out);
        }
        fields.push(out);
    }
    Dataset::in_memory(manifest, fields)
}

/// Sum of zonal waves `m = 1..=max_m` with random amplitude and phase, each
/// modulated by a random smooth latitude envelope. Zero zonal mean by
/// construction.
fn smooth_modes(lat: &[f64], w: usize, max_m: usize, amplitude: f64, rng: &mut Rng) -> Vec<f64> {
    let h = lat.len();
    let mut out = vec![0.0; h * w];
    for m in 1..=max_m {
        let a: f64 = StandardNormal.sample(rng);
        let amp = amplitude * a / m as f64;
        let phase = rng.random::<f64>() * 2.0 * PI;
        let lat_freq = rng.random_range(1..=3) as f64;
        let lat_phase = rng.random::<f64>() * 2.0 * PI;
        for i in 0..h {
            let env = lat[i].cos() * (lat_freq * lat[i] + lat_phase).cos();
            for j in 0..w {
                let lon = 2.0 * PI * j as f64 / w as f64;
                out[i * w + j] += amp * env * (m as f64 * lon + phase).cos();
            }
        }
    }
    out
}

/// Periodic semi-Lagrangian shift with linear interpolation.
fn advect(src: &[f64], dst: &mut [f64], speed: &[f64], w: usize) {
    for (i, &u) in speed.iter().enumerate() {
        let row = &src[i * w..(i + 1) * w];
        let out = &mut dst[i * w..(i + 1) * w];
        if u == 0.0 {
            out.copy_from_slice(row);
            continue;
        }
        let shift = u.floor();
        let frac = u - shift;
        let k = shift as i64;
        for (j, o) in out.iter_mut().enumerate() {
            // departure point j − u lies between cells j−k−1 and j−k
            let a = row[(j as i64 - k).rem_euclid(w as i64) as usize];
            let b = row[(j as i64 - k - 1).rem_euclid(w as i64) as usize];
            *o = (1.0 - frac) * a + frac * b;
        }
    }
}

/// Five-point Laplacian step; zonally periodic, no-flux at the lat edges.
fn diffuse(src: &[f64], dst: &mut [f64], kappa: f64, h: usize, w: usize) {
    if kappa == 0.0 {
        dst.copy_from_slice(src);
        return;
    }
    for i in 0..h {
        let up = if i + 1 < h { i + 1 } else { i };
        let down = i.saturating_sub(1);
        for j in 0..w {
            let c = src[i * w + j];
            let lap = src[i * w + (j + 1) % w] + src[i * w + (j + w - 1) % w] + src[up * w + j] + src[down * w + j] - 4.0 * c;
            dst[i * w + j] = c + kappa * lap;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::from_resolution(22.5).unwrap()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_generate(&grid(), 20, 7).unwrap();
        let b = synth_generate(&grid(), 20, 7).unwrap();
        let c = synth_generate(&grid(), 20, 8).unwrap();
        for v in a.variables() {
            let (x, y, z) = (a.read_variable(v).unwrap(), b.read_variable(v).unwrap(), c.read_variable(v).unwrap());
            assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
            assert_ne!(x, z);
        }
    }

    #[test]
    fn frozen_dynamics_hold_the_first_frame() {
        let ds = synth_generate_with(&grid(), 6, 3, &SynthConfig::frozen()).unwrap();
        for var in 0..ds.variables().len() {
            let first = ds.frame(0, &[var]).unwrap();
            for t in 1..6 {
                assert_eq!(ds.frame(t, &[var]).unwrap(), first);
            }
        }
    }

    #[test]
    fn rejects_single_step() {
        assert!(synth_generate(&grid(), 1, 0).is_err());
    }

    #[test]
    fn persistence_error_grows_with_lead() {
        let ds = synth_generate(&GridSpec::from_resolution(11.25).unwrap(), 200, 11).unwrap();
        let t2m = ds.manifest().variable_index("2m_temperature").unwrap();
        let rmse = |lead: usize| {
            let mut acc = 0.0;
            let mut n = 0usize;
            for t in 0..200 - lead {
                let a = ds.frame(t, &[t2m]).unwrap();
                let b = ds.frame(t + lead, &[t2m]).unwrap();
                acc += a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                n += a.len();
            }
            (acc / n as f64).sqrt()
        };
        let (r12, r72) = (rmse(1), rmse(6));
        assert!(r72 > r12, "{r12} vs {r72}");
    }

    #[test]
    fn advection_by_whole_cells_is_a_roll() {
        let src: Vec<f64> = (0..8).map(|x| x as f64).collect();
        let mut dst = vec![0.0; 8];
        advect(&src, &mut dst, &[2.0], 8);
        assert_eq!(dst, vec![6.0, 7.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
