use indexmap::IndexMap;

use crate::dataio::{compute_norm_stats, split_by_years, Dataset, NormStats, Normalizer, Split, SplitIndices, SplitSpec, WindowIndex};
use crate::error::{Error, Result};
use crate::grid::{crop_indices, latitude_weights, Climatology, CropIndex, GridSpec, LatWeights, RegionBox};
use crate::model::{ModelConfig, PatchWindow};
use crate::numcore::Tensor;

/// A dataset seen through one model: variable selection, normalization,
/// year splits and the patch-aligned window the model runs on.
#[derive(Clone, Debug)]
pub struct ForecastData {
    pub dataset: Dataset,
    pub split_spec: SplitSpec,
    pub splits: SplitIndices,
    pub inputs: Vec<String>,
    pub targets: Vec<String>,
    input_idx: Vec<usize>,
    target_idx: Vec<usize>,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
    pub stats: IndexMap<String, NormStats>,
    /// Patch-aligned cells the model sees.
    pub crop: CropIndex,
    pub window: PatchWindow,
    /// Grid of the window.
    pub grid: GridSpec,
    /// Latitude weights re-normalized on the window.
    pub weights: LatWeights,
    /// Region that produced the window, if any.
    pub region: Option<RegionBox>,
}

impl ForecastData {
    /// Statistics come from the manifest when present, otherwise from the
    /// training timestamps.
    pub fn new(dataset: Dataset, cfg: &ModelConfig, split: &SplitSpec, region: Option<&RegionBox>) -> Result<Self> {
        if dataset.grid() != &cfg.grid {
            return Err(Error::Train(format!(
                "dataset grid {}×{} does not match the model grid {}×{}",
                dataset.grid().n_lat,
                dataset.grid().n_lon,
                cfg.grid.n_lat,
                cfg.grid.n_lon
            )));
        }
        let splits = split_by_years(dataset.manifest(), split)?;
        let stats = if dataset.manifest().normalization.is_empty() {
            compute_norm_stats(&dataset, &splits.train)?
        } else {
            dataset.manifest().normalization.clone()
        };
        let crop = match region {
            Some(r) => crop_indices(&cfg.grid, r)?.align_to_patches(&cfg.grid, cfg.patch_size)?,
            None => CropIndex::full(&cfg.grid),
        };
        let window = PatchWindow::from_crop(cfg, &crop)?;
        let grid = cfg.grid.subgrid(&crop)?;
        let weights = latitude_weights(&grid)?;
        Ok(Self {
            input_idx: dataset.manifest().variable_indices(&cfg.input_variables)?,
            target_idx: dataset.manifest().variable_indices(&cfg.target_variables)?,
            input_norm: Normalizer::new(&cfg.input_variables, &stats)?,
            target_norm: Normalizer::new(&cfg.target_variables, &stats)?,
            inputs: cfg.input_variables.clone(),
            targets: cfg.target_variables.clone(),
            dataset,
            split_spec: split.clone(),
            splits,
            stats,
            crop,
            window,
            grid,
            weights,
            region: region.copied(),
        })
    }

    pub fn windows(&self, split: Split, leads: &[u32]) -> Vec<WindowIndex> {
        self.splits.windows(self.dataset.manifest(), split, leads)
    }

    /// Physical `(input [D,H',W'], target [D̂,H',W'])` on the window.
    pub fn physical(&self, w: &WindowIndex) -> Result<(Tensor, Tensor)> {
        let s = self.dataset.sample(w, &self.input_idx, &self.target_idx)?;
        Ok((self.crop.apply(&s.input)?, self.crop.apply(&s.target)?))
    }

    /// Normalized `(input, target)` on the window.
    pub fn sample(&self, w: &WindowIndex) -> Result<(Tensor, Tensor)> {
        let (x, y) = self.physical(w)?;
        Ok((self.input_norm.normalize(&x)?, self.target_norm.normalize(&y)?))
    }

    /// Physical target-variable state at time `t` on the window.
    pub fn target_state(&self, t: usize) -> Result<Tensor> {
        self.crop.apply(&self.dataset.frame(t, &self.target_idx)?)
    }

    /// Target-variable temporal mean over the training timestamps.
    pub fn climatology(&self) -> Result<Climatology> {
        Climatology::from_frames(
            self.targets.clone(),
            self.splits.train.iter().map(|&t| self.target_state(t)),
            format!("train split, {} timestamps", self.splits.train.len()),
        )
    }

    /// The same dataset, splits and statistics on another region.
    pub fn with_region(&self, cfg: &ModelConfig, region: Option<&RegionBox>) -> Result<Self> {
        let mut ds = self.dataset.clone();
        ds.manifest_mut().normalization = self.stats.clone();
        Self::new(ds, cfg, &self.split_spec, region)
    }
}
