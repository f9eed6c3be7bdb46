use std::fmt;
use std::str::FromStr;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time-major matrix: `values[t * width + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesMatrix {
    pub steps: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SeriesMatrix {
    pub fn new(steps: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != steps * width {
            return Err(Error::data(format!(
                "series matrix {steps}x{width} given {} values",
                values.len()
            )));
        }
        Ok(SeriesMatrix { steps, width, values })
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.width + j]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.width..(t + 1) * self.width]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.steps).map(|t| self.get(t, j)).collect()
    }

    /// Rows `[start, end)` as one contiguous slice.
    pub fn rows(&self, start: usize, end: usize) -> &[f64] {
        &self.values[start * self.width..end * self.width]
    }
}

/// Fills missing entries of one series from the previous valid value, or from
/// the next valid value when nothing precedes them.
pub fn fill_missing(values: &[f64], missing: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(values.len(), missing.len());
    let first = missing
        .iter()
        .position(|&m| !m)
        .ok_or_else(|| Error::data("series has no valid value to fill from"))?;
    let mut out = values.to_vec();
    let mut last = values[first];
    for (i, v) in out.iter_mut().enumerate() {
        if missing[i] {
            *v = last;
        } else {
            last = *v;
        }
    }
    Ok(out)
}

/// Column-wise [`fill_missing`] over a time-major matrix.
pub fn fill_missing_matrix(m: &mut SeriesMatrix, missing: &[bool], what: &str) -> Result<()> {
    for j in 0..m.width {
        let col = m.column(j);
        let mask: Vec<bool> = (0..m.steps).map(|t| missing[t * m.width + j]).collect();
        let filled = fill_missing(&col, &mask).map_err(|_| Error::data(format!("{what} column {j} is entirely missing")))?;
        for (t, v) in filled.into_iter().enumerate() {
            m.values[t * m.width + j] = v;
        }
    }
    Ok(())
}

/// Guard for series whose training partition is constant.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-series z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and std of each column over rows `[0, end)`.
    pub fn fit(m: &SeriesMatrix, end: usize) -> Self {
        let n = end as f64;
        let mut mean = vec![0.0; m.width];
        for t in 0..end {
            for (acc, v) in mean.iter_mut().zip(m.row(t)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m.width];
        for t in 0..end {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(t)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        NormStats { mean, std }
    }

    fn scale(&self, j: usize) -> f64 {
        self.std[j].max(STD_FLOOR)
    }

    pub fn normalize(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.scale(j)
    }

    pub fn denormalize(&self, j: usize, v: f64) -> f64 {
        v * self.scale(j) + self.mean[j]
    }

    pub fn apply(&self, m: &SeriesMatrix) -> SeriesMatrix {
        let values = m
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.normalize(i % m.width, v))
            .collect();
        SeriesMatrix {
            steps: m.steps,
            width: m.width,
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetNorm {
    pub x: NormStats,
    pub z: NormStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "validation",
            Partition::Test => "test",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::config(format!("unknown partition `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 || self.train <= 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(Error::config(format!("split ratios must be positive and sum to 1, got {sum}")));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Chronological partition boundaries: train `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, total)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub total: usize,
}

impl SplitBounds {
    pub fn range(&self, p: Partition) -> std::ops::Range<usize> {
        match p {
            Partition::Train => 0..self.train_end,
            Partition::Val => self.train_end..self.val_end,
            Partition::Test => self.val_end..self.total,
        }
    }

    pub fn len(&self, p: Partition) -> usize {
        self.range(p).len()
    }
}

/// Successive split: `floor(T·train)` training steps, `floor(T·test)` test
/// steps, and the remainder for validation. No window-length check.
pub fn split_bounds(total: usize, ratios: SplitRatios) -> Result<SplitBounds> {
    ratios.validate()?;
    // the epsilon absorbs representation error such as 0.29 * 100 = 28.999…
    let train = (total as f64 * ratios.train + 1e-9).floor() as usize;
    let test = (total as f64 * ratios.test + 1e-9).floor() as usize;
    let bounds = SplitBounds {
        train_end: train,
        val_end: total - test,
        total,
    };
    Ok(bounds)
}

/// [`split_bounds`], failing if any partition cannot hold one `P + Q` window.
pub fn split(total: usize, ratios: SplitRatios, p: usize, q: usize) -> Result<SplitBounds> {
    let bounds = split_bounds(total, ratios)?;
    let need = p + q;
    let short: Vec<String> = [Partition::Train, Partition::Val, Partition::Test]
        .into_iter()
        .filter(|&part| bounds.len(part) < need)
        .map(|part| format!("{part} ({})", bounds.len(part)))
        .collect();
    if !short.is_empty() {
        return Err(Error::PartitionTooShort {
            detail: short.join(", "),
            need,
        });
    }
    Ok(bounds)
}

/// A `P + Q` window starting at absolute step `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
}

/// Materialised, normalised window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub start: usize,
    /// `P × N_X`
    pub x_hist: Vec<f64>,
    /// `P × N_Z`
    pub z_hist: Vec<f64>,
    /// `Q × N_X`
    pub y: Vec<f64>,
    /// `Q × N_X`, true where the target was imputed.
    pub y_imputed: Vec<bool>,
    pub timestamps: Vec<NaiveDateTime>,
}

/// Aligned hourly road speeds `X` and regional population `Z`.
#[derive(Clone, Debug)]
pub struct TrafficDataset {
    pub timestamps: Vec<NaiveDateTime>,
    /// Raw speeds in km/h, `T × N_X`; NaN where missing until filled.
    pub x: SeriesMatrix,
    /// Raw population, `T × N_Z`.
    pub z: SeriesMatrix,
    pub x_missing: Vec<bool>,
    pub z_missing: Vec<bool>,
    pub split: Option<SplitBounds>,
    pub norm: Option<DatasetNorm>,
    x_norm: Option<SeriesMatrix>,
    z_norm: Option<SeriesMatrix>,
}

impl TrafficDataset {
    pub fn new(timestamps: Vec<NaiveDateTime>, x: SeriesMatrix, z: SeriesMatrix) -> Result<Self> {
        let t = timestamps.len();
        if t == 0 {
            return Err(Error::data("dataset has no timestamps"));
        }
        if x.steps != t || z.steps != t {
            return Err(Error::data(format!(
                "{t} timestamps but {} speed rows and {} population rows",
                x.steps, z.steps
            )));
        }
        check_hourly(&timestamps)?;
        for (m, name) in [(&x, "speeds"), (&z, "population")] {
            if m.values.iter().any(|v| v.is_infinite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        let x_missing = x.values.iter().map(|v| v.is_nan()).collect();
        let z_missing = z.values.iter().map(|v| v.is_nan()).collect();
        Ok(TrafficDataset {
            timestamps,
            x,
            z,
            x_missing,
            z_missing,
            split: None,
            norm: None,
            x_norm: None,
            z_norm: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_roads(&self) -> usize {
        self.x.width
    }

    pub fn n_cells(&self) -> usize {
        self.z.width
    }

    /// Fills gaps in both series; the missing masks are kept for metric exclusion.
    pub fn fill_missing(&mut self) -> Result<()> {
        fill_missing_matrix(&mut self.x, &self.x_missing, "speeds")?;
        fill_missing_matrix(&mut self.z, &self.z_missing, "population")?;
        Ok(())
    }

    pub fn set_split(&mut self, ratios: SplitRatios, p: usize, q: usize) -> Result<SplitBounds> {
        let b = split(self.steps(), ratios, p, q)?;
        self.split = Some(b);
        Ok(b)
    }

    /// Fits z-score statistics on the training partition and normalises both series.
    pub fn zscore_fit_apply(&mut self) -> Result<&DatasetNorm> {
        let b = self.split.ok_or_else(|| Error::data("split boundaries not set"))?;
        if self.x.values.iter().chain(&self.z.values).any(|v| !v.is_finite()) {
            return Err(Error::data("fill missing values before normalising"));
        }
        let norm = DatasetNorm {
            x: NormStats::fit(&self.x, b.train_end),
            z: NormStats::fit(&self.z, b.train_end),
        };
        self.set_norm(norm);
        Ok(self.norm.as_ref().unwrap())
    }

    /// Normalises with externally supplied statistics (e.g. from a checkpoint).
    pub fn set_norm(&mut self, norm: DatasetNorm) {
        self.x_norm = Some(norm.x.apply(&self.x));
        self.z_norm = Some(norm.z.apply(&self.z));
        self.norm = Some(norm);
    }

    /// Fill, split and normalise in one go.
    pub fn prepare(&mut self, ratios: SplitRatios, p: usize, q: usize) -> Result<()> {
        self.fill_missing()?;
        self.set_split(ratios, p, q)?;
        self.zscore_fit_apply()?;
        Ok(())
    }

    pub fn x_norm(&self) -> Option<&SeriesMatrix> {
        self.x_norm.as_ref()
    }

    pub fn z_norm(&self) -> Option<&SeriesMatrix> {
        self.z_norm.as_ref()
    }

    /// Every window lying entirely inside `partition`.
    pub fn windows(&self, partition: Partition, p: usize, q: usize) -> Result<Vec<Window>> {
        let b = self.split.ok_or_else(|| Error::data("split boundaries not set"))?;
        Ok(windows_in(b.range(partition), p, q))
    }

    pub fn sample(&self, w: Window, p: usize, q: usize) -> Result<Sample> {
        let (xn, zn) = match (&self.x_norm, &self.z_norm) {
            (Some(x), Some(z)) => (x, z),
            _ => return Err(Error::data("dataset is not normalised")),
        };
        let s = w.start;
        if s + p + q > self.steps() {
            return Err(Error::data(format!("window at {s} runs past the end")));
        }
        let nx = self.n_roads();
        Ok(Sample {
            start: s,
            x_hist: xn.rows(s, s + p).to_vec(),
            z_hist: zn.rows(s, s + p).to_vec(),
            y: xn.rows(s + p, s + p + q).to_vec(),
            y_imputed: self.x_missing[(s + p) * nx..(s + p + q) * nx].to_vec(),
            timestamps: self.timestamps[s..s + p + q].to_vec(),
        })
    }
}

/// Start indices of all `p + q` windows inside `range`.
pub fn windows_in(range: std::ops::Range<usize>, p: usize, q: usize) -> Vec<Window> {
    let len = p + q;
    if range.len() < len {
        return Vec::new();
    }
    (range.start..=range.end - len).map(|start| Window { start }).collect()
}

fn check_hourly(ts: &[NaiveDateTime]) -> Result<()> {
    for pair in ts.windows(2) {
        let d = pair[1] - pair[0];
        if d > Duration::hours(1) {
            return Err(Error::data(format!("timestamp gap of {d} after {}", pair[0])));
        }
        if d != Duration::hours(1) {
            return Err(Error::data(format!("timestamps not hourly at {}", pair[1])));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    const NAN: f64 = f64::NAN;

    fn hours(n: usize) -> Vec<NaiveDateTime> {
        let t0 = NaiveDate::from_ymd_opt(2018, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        (0..n).map(|i| t0 + Duration::hours(i as i64)).collect()
    }

    #[test]
    fn fill_examples() {
        let f = fill_missing(&[1.0, NAN, NAN, 4.0], &[false, true, true, false]).unwrap();
        assert_eq!(f, vec![1.0, 1.0, 1.0, 4.0]);
        let f = fill_missing(&[NAN, 5.0], &[true, false]).unwrap();
        assert_eq!(f, vec![5.0, 5.0]);
        let f = fill_missing(&[2.0, 3.0], &[false, false]).unwrap();
        assert_eq!(f, vec![2.0, 3.0]);
        assert!(fill_missing(&[NAN, NAN], &[true, true]).is_err());
    }

    #[test]
    fn fill_is_idempotent() {
        let v = [NAN, 2.0, NAN, NAN, 7.0, NAN];
        let m: Vec<bool> = v.iter().map(|x| x.is_nan()).collect();
        let once = fill_missing(&v, &m).unwrap();
        let twice = fill_missing(&once, &m).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn zscore_examples() {
        let m = SeriesMatrix::new(3, 2, vec![2.0, 5.0, 4.0, 5.0, 100.0, 9.0]).unwrap();
        let s = NormStats::fit(&m, 2);
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 0.0]);
        let n = s.apply(&m);
        assert_eq!(n.get(0, 0), -1.0);
        assert_eq!(n.get(1, 0), 1.0);
        // constant training series normalises to zeros
        assert_eq!(n.get(0, 1), 0.0);
        assert_eq!(n.get(1, 1), 0.0);
        for t in 0..3 {
            for j in 0..2 {
                let back = s.denormalize(j, n.get(t, j));
                assert!((back - m.get(t, j)).abs() <= 1e-12 * m.get(t, j).abs().max(1.0));
            }
        }
    }

    #[test]
    fn split_examples() {
        let r = SplitRatios::default();
        let b = split(4392, r, 12, 3).unwrap();
        assert_eq!(
            (b.len(Partition::Train), b.len(Partition::Val), b.len(Partition::Test)),
            (3074, 440, 878)
        );
        let b = split_bounds(100, r).unwrap();
        assert_eq!((b.train_end, b.val_end, b.total), (70, 80, 100));
        assert!(split(100, r, 12, 3).is_err());
        assert!(split(100, r, 6, 3).is_ok());
        let err = split(20, r, 12, 3).unwrap_err().to_string();
        assert!(err.contains("validation"), "{err}");
    }

    #[test]
    fn window_counts() {
        assert_eq!(windows_in(0..15, 12, 3).len(), 1);
        assert_eq!(windows_in(0..100, 12, 3).len(), 86);
        assert!(windows_in(0..14, 12, 3).is_empty());
    }

    #[test]
    fn windows_never_straddle_boundaries() {
        let b = split(300, SplitRatios::default(), 12, 3).unwrap();
        for part in [Partition::Train, Partition::Val, Partition::Test] {
            let r = b.range(part);
            for w in windows_in(r.clone(), 12, 3) {
                assert!(w.start >= r.start && w.start + 15 <= r.end);
            }
        }
    }

    #[test]
    fn timestamp_gap_rejected() {
        let mut ts = hours(4);
        ts[3] += Duration::hours(1);
        let x = SeriesMatrix::new(4, 1, vec![1.0; 4]).unwrap();
        let z = SeriesMatrix::new(4, 1, vec![1.0; 4]).unwrap();
        assert!(TrafficDataset::new(ts, x, z).is_err());
    }

    #[test]
    fn sample_target_is_slice_of_normalised_x() {
        let t = 40;
        let x = SeriesMatrix::new(t, 2, (0..t * 2).map(|i| i as f64).collect()).unwrap();
        let z = SeriesMatrix::new(t, 1, (0..t).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut ds = TrafficDataset::new(hours(t), x, z).unwrap();
        ds.prepare(SplitRatios { train: 0.5, val: 0.1, test: 0.4 }, 2, 1).unwrap();
        let w = ds.windows(Partition::Test, 2, 1).unwrap()[3];
        let s = ds.sample(w, 2, 1).unwrap();
        let xn = ds.x_norm().unwrap();
        assert_eq!(s.y, xn.row(w.start + 2).to_vec());
        assert_eq!(s.timestamps.len(), 3);
    }

    #[test]
    fn normalisation_ignores_test_partition() {
        let t = 50;
        let mk = |bump: f64| {
            let x = SeriesMatrix::new(t, 1, (0..t).map(|i| if i >= 40 { i as f64 + bump } else { i as f64 }).collect())
                .unwrap();
            let z = SeriesMatrix::new(t, 1, (0..t).map(|i| (i * i) as f64).collect()).unwrap();
            let mut ds = TrafficDataset::new(hours(t), x, z).unwrap();
            ds.prepare(SplitRatios::default(), 2, 1).unwrap();
            ds.norm.clone().unwrap()
        };
        let a = mk(0.0);
        let b = mk(1234.5);
        assert_eq!(a.x.mean[0].to_bits(), b.x.mean[0].to_bits());
        assert_eq!(a.x.std[0].to_bits(), b.x.std[0].to_bits());
    }
}
