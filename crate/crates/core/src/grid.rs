//! Lat-lon grid geometry, latitude weighting, regional cropping and
//! climatology.
//!
//! Cell centers sit half a cell inside the domain edges, so a 5.625° grid has
//! latitude centers −87.1875…87.1875 (south to north) and longitude centers
//! 2.8125…357.1875. A cropped regional grid keeps its longitude centers in
//! geographic (possibly wrapped) order, e.g. `[345, 355, 5, 15]`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const EPS_DEG: f64 = 1e-9;

fn wrap_lon(lon: f64) -> f64 {
    let l = lon.rem_euclid(360.0);
    if l >= 360.0 - EPS_DEG {
        0.0
    } else {
        l
    }
}

/// Eastward distance from `a` to `b` in `[0, 360)`.
fn east_gap(a: f64, b: f64) -> f64 {
    (b - a).rem_euclid(360.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat_centers: Vec<f64>,
    pub lon_centers: Vec<f64>,
}

impl GridSpec {
    pub fn new(lat_centers: Vec<f64>, lon_centers: Vec<f64>) -> Result<Self> {
        let grid = Self {
            n_lat: lat_centers.len(),
            n_lon: lon_centers.len(),
            lat_centers,
            lon_centers,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Equiangular global grid; 5.625° gives 32×64, 1.40625° gives 128×256.
    pub fn from_resolution(degrees: f64) -> Result<Self> {
        if !(degrees > 0.0) {
            return Err(Error::DegenerateGrid(format!("resolution {degrees} must be > 0")));
        }
        let n_lat = (180.0 / degrees).round() as usize;
        let n_lon = (360.0 / degrees).round() as usize;
        if (n_lat as f64 * degrees - 180.0).abs() > 1e-6 || n_lat == 0 {
            return Err(Error::DegenerateGrid(format!(
                "resolution {degrees}° does not divide 180°"
            )));
        }
        let lat = (0..n_lat).map(|i| -90.0 + (i as f64 + 0.5) * degrees).collect();
        let lon = (0..n_lon).map(|j| (j as f64 + 0.5) * degrees).collect();
        Self::new(lat, lon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lat != self.lat_centers.len() || self.n_lon != self.lon_centers.len() {
            return Err(Error::DegenerateGrid("center arrays disagree with sizes".into()));
        }
        if self.n_lat == 0 || self.n_lon == 0 {
            return Err(Error::DegenerateGrid("empty grid".into()));
        }
        if self.lat_centers.iter().any(|l| !l.is_finite() || l.abs() > 90.0) {
            return Err(Error::DegenerateGrid("latitude outside [-90, 90]".into()));
        }
        let lat_up = self.lat_centers.windows(2).all(|w| w[1] > w[0]);
        let lat_down = self.lat_centers.windows(2).all(|w| w[1] < w[0]);
        if !(lat_up || lat_down) {
            return Err(Error::DegenerateGrid("latitudes not strictly monotonic".into()));
        }
        if self
            .lon_centers
            .iter()
            .any(|l| !l.is_finite() || *l < 0.0 || *l >= 360.0)
        {
            return Err(Error::DegenerateGrid("longitude outside [0, 360)".into()));
        }
        // strictly increasing going east, wrapping at most once
        let mut span = 0.0;
        for w in self.lon_centers.windows(2) {
            let gap = east_gap(w[0], w[1]);
            if gap <= 0.0 {
                return Err(Error::DegenerateGrid("longitudes not strictly increasing".into()));
            }
            span += gap;
        }
        if span >= 360.0 {
            return Err(Error::DegenerateGrid("longitudes wrap more than once".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    /// Whether the longitude axis closes around the globe.
    pub fn is_periodic(&self) -> bool {
        if self.n_lon < 2 {
            return false;
        }
        let step = east_gap(self.lon_centers[0], self.lon_centers[1]);
        let closing = east_gap(self.lon_centers[self.n_lon - 1], self.lon_centers[0]);
        (step * self.n_lon as f64 - 360.0).abs() < 1e-6 && (closing - step).abs() < 1e-6
    }

    pub fn subgrid(&self, index: &CropIndex) -> Result<Self> {
        Self::new(
            self.lat_centers[index.rows.clone()].to_vec(),
            index.cols.iter().map(|&j| self.lon_centers[j]).collect(),
        )
    }
}

/// Latitude/longitude box. `lon_min > lon_max` (after wrapping to [0, 360))
/// means the box crosses the prime meridian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl RegionBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let b = Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        if !(lat_min < lat_max) || [lat_min, lat_max, lon_min, lon_max].iter().any(|v| !v.is_finite()) {
            return Err(Error::Region(format!("invalid box {b:?}: need lat_min < lat_max")));
        }
        Ok(b)
    }

    /// Middle East and North Africa preset: 7°N–40°N, 25°W–63°E.
    pub fn mena() -> Self {
        Self {
            lat_min: 7.0,
            lat_max: 40.0,
            lon_min: -25.0,
            lon_max: 63.0,
        }
    }

    pub fn globe() -> Self {
        Self {
            lat_min: -90.0,
            lat_max: 90.0,
            lon_min: 0.0,
            lon_max: 360.0,
        }
    }

    /// Named preset or `lat_min,lat_max,lon_min,lon_max`.
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "mena" => return Ok(Self::mena()),
            "globe" | "global" => return Ok(Self::globe()),
            _ => {}
        }
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Region(format!("cannot parse region `{text}`: {e}")))?;
        match parts[..] {
            [a, b, c, d] => Self::new(a, b, c, d),
            _ => Err(Error::Region(format!(
                "region `{text}` needs four numbers lat_min,lat_max,lon_min,lon_max"
            ))),
        }
    }

    pub fn contains_lat(&self, lat: f64) -> bool {
        lat >= self.lat_min - EPS_DEG && lat <= self.lat_max + EPS_DEG
    }

    pub fn contains_lon(&self, lon: f64) -> bool {
        if self.lon_max - self.lon_min >= 360.0 - EPS_DEG {
            return true;
        }
        let (lo, hi, l) = (wrap_lon(self.lon_min), wrap_lon(self.lon_max), wrap_lon(lon));
        if lo <= hi {
            l >= lo - EPS_DEG && l <= hi + EPS_DEG
        } else {
            l >= lo - EPS_DEG || l <= hi + EPS_DEG
        }
    }
}

/// Rows (contiguous) and columns (in geographic order) selected on a grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropIndex {
    pub rows: Range<usize>,
    pub cols: Vec<usize>,
}

impl CropIndex {
    pub fn full(grid: &GridSpec) -> Self {
        Self {
            rows: 0..grid.n_lat,
            cols: (0..grid.n_lon).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.cols.len()
    }

    pub fn is_full(&self, grid: &GridSpec) -> bool {
        *self == Self::full(grid)
    }

    /// Expands outward so that the start offsets and extents are multiples
    /// of `patch`, staying on `grid`. Columns wrap on periodic grids.
    pub fn align_to_patches(&self, grid: &GridSpec, patch: usize) -> Result<Self> {
        if patch == 0 || !grid.n_lat.is_multiple_of(patch) || !grid.n_lon.is_multiple_of(patch) {
            return Err(Error::Region(format!(
                "grid {}×{} is not divisible by patch {patch}",
                grid.n_lat, grid.n_lon
            )));
        }
        let r0 = self.rows.start / patch * patch;
        let r1 = self.rows.end.div_ceil(patch) * patch;
        let c0 = self.cols[0] / patch * patch;
        let last = *self.cols.last().expect("non-empty crop");
        let span = if last >= self.cols[0] {
            last - self.cols[0] + 1
        } else {
            grid.n_lon - self.cols[0] + last + 1
        };
        let width = ((self.cols[0] - c0) + span).div_ceil(patch) * patch;
        if width >= grid.n_lon {
            return Ok(Self {
                rows: r0..r1,
                cols: (0..grid.n_lon).collect(),
            });
        }
        if !grid.is_periodic() && c0 + width > grid.n_lon {
            return Err(Error::Region("aligned crop runs off a non-periodic grid".into()));
        }
        Ok(Self {
            rows: r0..r1,
            cols: (0..width).map(|k| (c0 + k) % grid.n_lon).collect(),
        })
    }

    /// Copies the selected cells of a `[..., H, W]` field.
    pub fn apply(&self, field: &Tensor) -> Result<Tensor> {
        let shape = field.shape();
        if shape.len() < 2 {
            return Err(Error::Region(format!("cannot crop a field of shape {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if self.rows.end > h || self.cols.iter().any(|&c| c >= w) {
            return Err(Error::Region(format!(
                "crop {:?}×{} does not fit field {shape:?}",
                self.rows,
                self.cols.len()
            )));
        }
        let lead: usize = shape[..shape.len() - 2].iter().product();
        let src = field.data();
        let mut out = Vec::with_capacity(lead * self.height() * self.width());
        for l in 0..lead {
            for r in self.rows.clone() {
                let base = (l * h + r) * w;
                out.extend(self.cols.iter().map(|&c| src[base + c]));
            }
        }
        let mut new_shape = shape[..shape.len() - 2].to_vec();
        new_shape.extend([self.height(), self.width()]);
        Tensor::new(&new_shape, out)
    }
}

/// Indices of the cells whose centers lie inside `region` (boundaries inclusive).
pub fn crop_indices(grid: &GridSpec, region: &RegionBox) -> Result<CropIndex> {
    let rows: Vec<usize> = (0..grid.n_lat)
        .filter(|&i| region.contains_lat(grid.lat_centers[i]))
        .collect();
    let selected: Vec<bool> = grid.lon_centers.iter().map(|&l| region.contains_lon(l)).collect();
    let empty = || Error::Region(format!("region {region:?} does not intersect the grid"));
    let (&r0, &r1) = (rows.first().ok_or_else(empty)?, rows.last().ok_or_else(empty)?);
    let n = grid.n_lon;
    let count = selected.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(empty());
    }
    let cols: Vec<usize> = if count == n {
        (0..n).collect()
    } else {
        let periodic = grid.is_periodic();
        let start = (0..n)
            .find(|&j| selected[j] && !(if j == 0 { periodic && selected[n - 1] } else { selected[j - 1] }))
            .ok_or_else(empty)?;
        let run: Vec<usize> = (0..count).map(|k| (start + k) % n).collect();
        if run.iter().any(|&j| !selected[j]) || (!periodic && start + count > n) {
            return Err(Error::Region(format!(
                "region {region:?} selects non-contiguous columns"
            )));
        }
        run
    };
    Ok(CropIndex { rows: r0..r1 + 1, cols })
}

/// Crops a `[D, H, W]` field to `region`, returning the values and the sub-grid.
pub fn crop_region(field: &Tensor, grid: &GridSpec, region: &RegionBox) -> Result<(Tensor, GridSpec)> {
    let shape = field.shape();
    if shape.len() < 2 || shape[shape.len() - 2] != grid.n_lat || shape[shape.len() - 1] != grid.n_lon {
        return Err(Error::Region(format!(
            "field {shape:?} does not match grid {}×{}",
            grid.n_lat, grid.n_lon
        )));
    }
    let index = crop_indices(grid, region)?;
    Ok((index.apply(field)?, grid.subgrid(&index)?))
}

/// Per-latitude cos weights normalized to unit mean.
#[derive(Clone, Debug, PartialEq)]
pub struct LatWeights {
    pub w: Vec<f64>,
}

impl LatWeights {
    pub fn uniform(n_lat: usize) -> Self {
        Self { w: vec![1.0; n_lat] }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Broadcasts to a `[n_vars, n_lat, n_lon]` field.
    pub fn broadcast(&self, n_vars: usize, n_lon: usize) -> Tensor {
        let h = self.w.len();
        Tensor::from_fn(&[n_vars, h, n_lon], |i| self.w[(i / n_lon) % h])
    }
}

/// `w(i) = cos(lat_i) / mean_j cos(lat_j)`.
pub fn latitude_weights(grid: &GridSpec) -> Result<LatWeights> {
    grid.validate()?;
    let cos: Vec<f64> = grid
        .lat_centers
        .iter()
        .map(|lat| if lat.abs() >= 90.0 { 0.0 } else { lat.to_radians().cos() })
        .collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    if mean <= 0.0 {
        return Err(Error::DegenerateGrid("all latitude weights are zero".into()));
    }
    Ok(LatWeights {
        w: cos.iter().map(|c| c / mean).collect(),
    })
}

/// Per-variable temporal mean over the training period.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    pub variables: Vec<String>,
    /// `[D, H, W]`
    pub mean: Tensor,
    /// Human-readable aggregation window, e.g. `train split, 730 timestamps`.
    pub window: String,
    pub timesteps: usize,
}

impl Climatology {
    /// Temporal mean of `[D, H, W]` frames.
    pub fn from_frames<I>(variables: Vec<String>, frames: I, window: impl Into<String>) -> Result<Self>
    where
        I: IntoIterator<Item = Result<Tensor>>,
    {
        let mut sum: Option<Tensor> = None;
        let mut count = 0usize;
        for frame in frames {
            let frame = frame?;
            match &mut sum {
                None => sum = Some(frame.map(|x| x)),
                Some(acc) => {
                    if acc.shape() != frame.shape() {
                        return Err(crate::error::shape_err("climatology", acc.shape(), frame.shape()));
                    }
                    acc.data_mut().iter_mut().zip(frame.data()).for_each(|(a, b)| *a += b);
                }
            }
            count += 1;
        }
        let sum = sum.ok_or_else(|| Error::Split("climatology needs at least one training timestep".into()))?;
        let mean = sum.map(|x| x / count as f64);
        Ok(Self {
            variables,
            mean,
            window: window.into(),
            timesteps: count,
        })
    }

    pub fn crop(&self, index: &CropIndex) -> Result<Self> {
        Ok(Self {
            variables: self.variables.clone(),
            mean: index.apply(&self.mean)?,
            window: self.window.clone(),
            timesteps: self.timesteps,
        })
    }

    /// Restricts to `names`, in that order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let [_, h, w] = self.mean.shape()[..] else {
            return Err(Error::Contract("climatology must be [D, H, W]".into()));
        };
        let mut parts = Vec::with_capacity(names.len());
        for name in names {
            let i = self
                .variables
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| Error::UnknownVariable(name.clone()))?;
            parts.push(self.mean.index_axis0(i)?);
        }
        let mean = Tensor::stack(&parts)?;
        debug_assert_eq!(mean.shape(), &[names.len(), h, w]);
        Ok(Self {
            variables: names.to_vec(),
            mean,
            window: self.window.clone(),
            timesteps: self.timesteps,
        })
    }
}
