use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Disjoint calendar-year sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_years: BTreeSet<i32>,
    pub val_years: BTreeSet<i32>,
    pub test_years: BTreeSet<i32>,
}

impl SplitSpec {
    pub fn new(
        train: impl IntoIterator<Item = i32>,
        val: impl IntoIterator<Item = i32>,
        test: impl IntoIterator<Item = i32>,
    ) -> Result<Self> {
        let s = Self {
            train_years: train.into_iter().collect(),
            val_years: val.into_iter().collect(),
            test_years: test.into_iter().collect(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Train 1979–2015, validate 2016, test 2017–2018.
    pub fn era5_protocol() -> Self {
        Self::new(1979..=2015, [2016], [2017, 2018]).expect("disjoint")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("train", &self.train_years), ("val", &self.val_years), ("test", &self.test_years)] {
            if set.is_empty() {
                return Err(Error::Split(format!("{name} split has no years")));
            }
        }
        let pairs = [
            ("train", &self.train_years, "val", &self.val_years),
            ("train", &self.train_years, "test", &self.test_years),
            ("val", &self.val_years, "test", &self.test_years),
        ];
        for (a, sa, b, sb) in pairs {
            if let Some(y) = sa.intersection(sb).next() {
                return Err(Error::Split(format!("year {y} is in both {a} and {b}")));
            }
        }
        Ok(())
    }

    pub fn split_of_year(&self, year: i32) -> Option<Split> {
        if self.train_years.contains(&year) {
            Some(Split::Train)
        } else if self.val_years.contains(&year) {
            Some(Split::Val)
        } else if self.test_years.contains(&year) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Input/target timestamp pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowIndex {
    pub input: usize,
    pub target: usize,
    pub lead_hours: u32,
}

/// Timestamp indices per split. Timestamps outside every declared year are
/// left unassigned.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    assignment: Vec<Option<Split>>,
    /// Declared years without any timestamp.
    pub missing_years: Vec<i32>,
}

impl SplitIndices {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, t: usize) -> Option<Split> {
        self.assignment.get(t).copied().flatten()
    }

    /// Windows whose input and target both fall in `split`, ordered by input
    /// time then lead. Windows with the target across a split boundary are
    /// dropped.
    pub fn windows(&self, manifest: &DatasetManifest, split: Split, leads: &[u32]) -> Vec<WindowIndex> {
        let mut out = Vec::new();
        for &t in self.indices(split) {
            for &lead in leads {
                let Some(target) = manifest.time_index(manifest.timestamps[t] + lead as i64) else {
                    continue;
                };
                if self.split_of(target) == Some(split) {
                    out.push(WindowIndex {
                        input: t,
                        target,
                        lead_hours: lead,
                    });
                }
            }
        }
        out
    }
}

/// Assigns each timestamp to the split owning its calendar year.
pub fn split_by_years(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let mut present = BTreeSet::new();
    let mut assignment = Vec::with_capacity(manifest.n_times());
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..manifest.n_times() {
        let year = manifest.year_of(t);
        present.insert(year);
        let s = spec.split_of_year(year);
        match s {
            Some(Split::Train) => train.push(t),
            Some(Split::Val) => val.push(t),
            Some(Split::Test) => test.push(t),
            None => {}
        }
        assignment.push(s);
    }
    let missing_years = spec
        .train_years
        .iter()
        .chain(&spec.val_years)
        .chain(&spec.test_years)
        .filter(|y| !present.contains(y))
        .copied()
        .collect();
    Ok(SplitIndices {
        train,
        val,
        test,
        assignment,
        missing_years,
    })
}

/// Fails if any window of `split` reads an input or target from another split.
pub fn check_no_leakage(indices: &SplitIndices, windows: &[WindowIndex], split: Split) -> Result<()> {
    for w in windows {
        for (role, t) in [("input", w.input), ("target", w.target)] {
            if indices.split_of(t) != Some(split) {
                return Err(Error::Split(format!(
                    "leakage: {split} window {w:?} has its {role} in {:?}",
                    indices.split_of(t)
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::datetime_to_hours;
    use crate::grid::GridSpec;
    use chrono::NaiveDate;

    fn manifest(from: (i32, u32, u32), days: i64, step: i64) -> DatasetManifest {
        let start = datetime_to_hours(NaiveDate::from_ymd_opt(from.0, from.1, from.2).unwrap().and_hms_opt(0, 0, 0).unwrap());
        let ts = (0..days * 24 / step).map(|k| start + k * step).collect();
        DatasetManifest::new(GridSpec::from_resolution(90.0).unwrap(), vec!["a".into()], ts).unwrap()
    }

    #[test]
    fn overlapping_years_are_rejected() {
        assert!(SplitSpec::new([2015], [2015], [2016]).is_err());
        assert!(SplitSpec::new([2015], Vec::<i32>::new(), [2016]).is_err());
    }

    #[test]
    fn single_year_goes_to_train() {
        let m = manifest((2015, 1, 1), 365, 24);
        let s = split_by_years(&m, &SplitSpec::new([2015], [2016], [2017]).unwrap()).unwrap();
        assert_eq!(s.train, (0..365).collect::<Vec<_>>());
        assert!(s.val.is_empty() && s.test.is_empty());
        assert_eq!(s.missing_years, vec![2016, 2017]);
    }

    #[test]
    fn era5_protocol_partitions_timestamps() {
        let m = manifest((1979, 1, 1), 40 * 366, 24);
        let s = split_by_years(&m, &SplitSpec::era5_protocol()).unwrap();
        assert!(s.missing_years.is_empty());
        let total = s.train.len() + s.val.len() + s.test.len();
        let in_years = (0..m.n_times()).filter(|&t| m.year_of(t) <= 2018).count();
        assert_eq!(total, in_years);
        assert_eq!(s.val.len(), 366);
        assert!(s.train.iter().all(|&t| m.year_of(t) <= 2015));
        let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        assert_eq!(all.len(), total);
    }

    #[test]
    fn boundary_windows_are_dropped() {
        let m = manifest((2015, 1, 1), 1096, 12);
        let s = split_by_years(&m, &SplitSpec::new([2015], [2016], [2017]).unwrap()).unwrap();
        check_boundary(&m, &s);
    }

    fn check_boundary(m: &DatasetManifest, s: &SplitIndices) {
        let train = s.windows(m, Split::Train, &[12, 72]);
        check_no_leakage(s, &train, Split::Train).unwrap();
        let dec31 = datetime_to_hours(NaiveDate::from_ymd_opt(2015, 12, 31).unwrap().and_hms_opt(0, 0, 0).unwrap());
        let t = m.time_index(dec31).unwrap();
        // enumeration: 72h from Dec 31 00:00 reaches Jan 3; 12h reaches Dec 31 12:00
        assert!(!train.iter().any(|w| w.input == t && w.lead_hours == 72));
        assert!(train.iter().any(|w| w.input == t && w.lead_hours == 12));
        let last_72 = train.iter().filter(|w| w.lead_hours == 72).map(|w| w.input).max().unwrap();
        assert_eq!(m.timestamps[last_72] + 72, m.timestamps[*s.train.last().unwrap()]);
        let bad = vec![WindowIndex {
            input: t,
            target: m.time_index(dec31 + 72).unwrap(),
            lead_hours: 72,
        }];
        assert!(check_no_leakage(s, &bad, Split::Train).is_err());
    }
}
