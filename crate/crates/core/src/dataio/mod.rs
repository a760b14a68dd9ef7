//! On-disk dataset container, normalization, year splits and the synthetic
//! generator.
//!
//! A dataset directory holds `manifest.json` and one `<variable>.f32` file per
//! variable. Each file is a raw little-endian `f32` array in time-major order:
//! element `(t, i, j)` lives at byte offset `4 * ((t * H + i) * W + j)`, with
//! `i` indexing `grid.lat_centers` and `j` indexing `grid.lon_centers`.

mod norm;
mod split;
mod synth;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Datelike, NaiveDateTime};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::numcore::Tensor;

pub use norm::{compute_norm_stats, NormStats, Normalizer};
pub use split::{check_no_leakage, split_by_years, Split, SplitIndices, SplitSpec, WindowIndex};
pub use synth::{synth_generate, synth_generate_with, SynthConfig, SynthVariable};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_NAME: &str = "regioncast-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub variable: String,
    /// Relative to the dataset directory.
    pub path: String,
    /// Always `f32le`.
    pub dtype: String,
    /// `[T, H, W]`
    pub shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub grid: GridSpec,
    /// Canonical channel order.
    pub variables: Vec<String>,
    /// Hours since 1970-01-01T00:00Z, strictly increasing.
    pub timestamps: Vec<i64>,
    /// Per-variable scalar statistics; empty until computed from a split.
    #[serde(default)]
    pub normalization: IndexMap<String, NormStats>,
    pub files: Vec<FileEntry>,
}

impl DatasetManifest {
    pub fn new(grid: GridSpec, variables: Vec<String>, timestamps: Vec<i64>) -> Result<Self> {
        let t = timestamps.len();
        let files = variables
            .iter()
            .map(|v| FileEntry {
                variable: v.clone(),
                path: format!("{v}.f32"),
                dtype: "f32le".into(),
                shape: [t, grid.n_lat, grid.n_lon],
            })
            .collect();
        let m = Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            grid,
            variables,
            timestamps,
            normalization: IndexMap::new(),
            files,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT_NAME || self.version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        self.grid.validate()?;
        if self.variables.is_empty() {
            return Err(Error::Dataset("no variables".into()));
        }
        for (k, v) in self.variables.iter().enumerate() {
            if v.is_empty() || !v.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
                return Err(Error::Dataset(format!("invalid variable name `{v}`")));
            }
            if self.variables[..k].contains(v) {
                return Err(Error::Dataset(format!("duplicate variable `{v}`")));
            }
        }
        if self.timestamps.is_empty() {
            return Err(Error::Dataset("no timestamps".into()));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Dataset("timestamps not strictly increasing".into()));
        }
        if self.files.len() != self.variables.len() {
            return Err(Error::Dataset("one file entry per variable required".into()));
        }
        let want = [self.timestamps.len(), self.grid.n_lat, self.grid.n_lon];
        for (f, v) in self.files.iter().zip(&self.variables) {
            if &f.variable != v {
                return Err(Error::Dataset(format!(
                    "file entry `{}` out of order, expected `{v}`",
                    f.variable
                )));
            }
            if f.dtype != "f32le" {
                return Err(Error::Dataset(format!("unsupported dtype `{}`", f.dtype)));
            }
            if f.shape != want {
                return Err(Error::Dataset(format!(
                    "header mismatch for `{v}`: file shape {:?}, manifest implies {want:?}",
                    f.shape
                )));
            }
            if f.path.contains("..") || Path::new(&f.path).is_absolute() {
                return Err(Error::Dataset(format!("file path `{}` escapes the dataset", f.path)));
            }
        }
        for name in self.normalization.keys() {
            if !self.variables.contains(name) {
                return Err(Error::UnknownVariable(name.clone()));
            }
        }
        Ok(())
    }

    pub fn n_times(&self) -> usize {
        self.timestamps.len()
    }

    pub fn frame_len(&self) -> usize {
        self.grid.cells()
    }

    pub fn variable_index(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn variable_indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.variable_index(n)).collect()
    }

    /// Calendar year (UTC) of timestamp `t`.
    pub fn year_of(&self, t: usize) -> i32 {
        hours_to_datetime(self.timestamps[t]).year()
    }

    pub fn time_index(&self, hours: i64) -> Option<usize> {
        self.timestamps.binary_search(&hours).ok()
    }
}

pub fn hours_to_datetime(hours: i64) -> NaiveDateTime {
    DateTime::from_timestamp(hours * 3600, 0)
        .expect("timestamp within chrono range")
        .naive_utc()
}

pub fn datetime_to_hours(dt: NaiveDateTime) -> i64 {
    dt.and_utc().timestamp().div_euclid(3600)
}

#[derive(Clone, Debug)]
enum Backing {
    Memory(Arc<Vec<Vec<f32>>>),
    Files(Arc<Vec<File>>),
}

/// A dataset with lazy per-frame access. Clones share the backing storage.
#[derive(Clone, Debug)]
pub struct Dataset {
    manifest: DatasetManifest,
    backing: Backing,
    dir: Option<PathBuf>,
}

/// One model sample: input state at `t`, target state at `t + lead`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    /// `[D, H, W]`
    pub input: Tensor,
    /// `[D̂, H, W]`
    pub target: Tensor,
    pub lead_hours: u32,
}

impl Dataset {
    /// Wraps in-memory fields, one time-major `[T × H × W]` array per variable.
    pub fn in_memory(manifest: DatasetManifest, fields: Vec<Vec<f32>>) -> Result<Self> {
        manifest.validate()?;
        if fields.len() != manifest.variables.len() {
            return Err(Error::Dataset(format!(
                "{} fields for {} variables",
                fields.len(),
                manifest.variables.len()
            )));
        }
        let want = manifest.n_times() * manifest.frame_len();
        for (f, v) in fields.iter().zip(&manifest.variables) {
            if f.len() != want {
                return Err(Error::Dataset(format!(
                    "field `{v}` holds {} values, header implies {want}",
                    f.len()
                )));
            }
        }
        Ok(Self {
            manifest,
            backing: Backing::Memory(Arc::new(fields)),
            dir: None,
        })
    }

    /// Opens a dataset directory; frames are read on demand.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        let want = (manifest.n_times() * manifest.frame_len() * 4) as u64;
        let mut files = Vec::with_capacity(manifest.files.len());
        for entry in &manifest.files {
            let path = dir.join(&entry.path);
            let file = File::open(&path)
                .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
            let len = file.metadata()?.len();
            if len < want {
                return Err(Error::Dataset(format!(
                    "truncated file {}: {len} bytes, header implies {want} ({} frames declared, {} present)",
                    path.display(),
                    manifest.n_times(),
                    len / (manifest.frame_len() as u64 * 4)
                )));
            }
            if len > want {
                return Err(Error::Dataset(format!(
                    "header mismatch for {}: {len} bytes, header implies {want}",
                    path.display()
                )));
            }
            files.push(file);
        }
        Ok(Self {
            manifest,
            backing: Backing::Files(Arc::new(files)),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut DatasetManifest {
        &mut self.manifest
    }

    pub fn grid(&self) -> &GridSpec {
        &self.manifest.grid
    }

    pub fn variables(&self) -> &[String] {
        &self.manifest.variables
    }

    pub fn n_times(&self) -> usize {
        self.manifest.n_times()
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Reads one `[H × W]` frame of variable `var` into `out`.
    pub fn read_frame_f32(&self, var: usize, t: usize, out: &mut [f32]) -> Result<()> {
        let n = self.manifest.frame_len();
        if var >= self.manifest.variables.len() || t >= self.n_times() || out.len() != n {
            return Err(Error::Dataset(format!(
                "frame ({var}, {t}) out of range or buffer of {} values for frame of {n}",
                out.len()
            )));
        }
        match &self.backing {
            Backing::Memory(fields) => out.copy_from_slice(&fields[var][t * n..(t + 1) * n]),
            Backing::Files(files) => {
                let mut bytes = vec![0u8; n * 4];
                read_exact_at(&files[var], &mut bytes, (t * n * 4) as u64)?;
                for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                    *o = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                }
            }
        }
        Ok(())
    }

    /// `[vars.len(), H, W]` frame at time `t`, widened to f64.
    pub fn frame(&self, t: usize, vars: &[usize]) -> Result<Tensor> {
        let n = self.manifest.frame_len();
        let mut buf = vec![0f32; n];
        let mut data = Vec::with_capacity(vars.len() * n);
        for &v in vars {
            self.read_frame_f32(v, t, &mut buf)?;
            data.extend(buf.iter().map(|&x| x as f64));
        }
        Tensor::new(&[vars.len(), self.manifest.grid.n_lat, self.manifest.grid.n_lon], data)
    }

    /// All frames of every variable.
    pub fn frame_all(&self, t: usize) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.manifest.variables.len()).collect();
        self.frame(t, &all)
    }

    /// Whole time-major array of one variable.
    pub fn read_variable(&self, name: &str) -> Result<Vec<f32>> {
        let v = self.manifest.variable_index(name)?;
        let n = self.manifest.frame_len();
        let mut out = vec![0f32; self.n_times() * n];
        for (t, chunk) in out.chunks_exact_mut(n).enumerate() {
            self.read_frame_f32(v, t, chunk)?;
        }
        Ok(out)
    }

    pub fn sample(&self, window: &WindowIndex, inputs: &[usize], targets: &[usize]) -> Result<SampleWindow> {
        Ok(SampleWindow {
            input: self.frame(window.input, inputs)?,
            target: self.frame(window.target, targets)?,
            lead_hours: window.lead_hours,
        })
    }

    /// Writes the manifest and one raw file per variable into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let n = self.manifest.frame_len();
        let mut buf = vec![0f32; n];
        for (v, entry) in self.manifest.files.iter().enumerate() {
            let mut w = BufWriter::new(File::create(dir.join(&entry.path))?);
            for t in 0..self.n_times() {
                self.read_frame_f32(v, t, &mut buf)?;
                for x in &buf {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        write_manifest(dir, &self.manifest)
    }

    /// Loads every file into memory.
    pub fn into_memory(self) -> Result<Self> {
        if matches!(self.backing, Backing::Memory(_)) {
            return Ok(self);
        }
        let fields = self
            .manifest
            .variables
            .iter()
            .map(|v| self.read_variable(v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest: self.manifest,
            backing: Backing::Memory(Arc::new(fields)),
            dir: self.dir,
        })
    }
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

/// Writes `fields` (one `[T × H × W]` array per manifest variable) to `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, manifest: &DatasetManifest, fields: Vec<Vec<f32>>) -> Result<()> {
    Dataset::in_memory(manifest.clone(), fields)?.write(dir)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::open(dir)
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    std::os::unix::fs::FileExt::read_exact_at(file, buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(t: usize) -> (DatasetManifest, Vec<Vec<f32>>) {
        let grid = GridSpec::new(vec![-30.0, -10.0, 10.0, 30.0], (0..8).map(|j| j as f64 * 45.0).collect()).unwrap();
        let ts = (0..t as i64).map(|k| 400_000 + 12 * k).collect();
        let m = DatasetManifest::new(grid, vec!["a".into(), "b".into()], ts).unwrap();
        let fields = (0..2)
            .map(|v| (0..t * 32).map(|i| (i as f32 * 0.37 + v as f32).sin() * 1e3).collect())
            .collect();
        (m, fields)
    }

    #[test]
    fn round_trip_is_bit_exact_and_sizes_match() {
        let dir = tempfile::tempdir().unwrap();
        let (m, fields) = tiny(3);
        write_dataset(dir.path(), &m, fields.clone()).unwrap();
        for v in ["a", "b"] {
            let len = std::fs::metadata(dir.path().join(format!("{v}.f32"))).unwrap().len();
            assert_eq!(len, 3 * 4 * 8 * 4);
        }
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest(), &m);
        for (v, f) in ["a", "b"].iter().zip(&fields) {
            let back = ds.read_variable(v).unwrap();
            assert!(back.iter().zip(f).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let frame = ds.frame(2, &[1]).unwrap();
        assert_eq!(frame.shape(), &[1, 4, 8]);
        assert_eq!(frame.data()[5], fields[1][2 * 32 + 5] as f64);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (m, fields) = tiny(10);
        write_dataset(dir.path(), &m, fields).unwrap();
        let path = dir.path().join("a.f32");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..9 * 32 * 4]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(err.contains("10 frames declared, 9 present"), "{err}");
    }

    #[test]
    fn header_mismatch_and_unknown_variable() {
        let (mut m, fields) = tiny(2);
        m.files[0].shape = [2, 4, 7];
        assert!(Dataset::in_memory(m, fields.clone()).is_err());
        let (m, _) = tiny(2);
        let ds = Dataset::in_memory(m, fields).unwrap();
        assert!(matches!(ds.read_variable("zz"), Err(Error::UnknownVariable(_))));
    }

    #[test]
    fn timestamps_must_increase() {
        let grid = GridSpec::from_resolution(45.0).unwrap();
        assert!(DatasetManifest::new(grid, vec!["a".into()], vec![5, 5]).is_err());
    }

    #[test]
    fn hours_convert_to_calendar_years() {
        let dt = chrono::NaiveDate::from_ymd_opt(2015, 12, 31).unwrap().and_hms_opt(12, 0, 0).unwrap();
        let h = datetime_to_hours(dt);
        assert_eq!(hours_to_datetime(h), dt);
        assert_eq!(hours_to_datetime(h + 12).year(), 2016);
    }
}
