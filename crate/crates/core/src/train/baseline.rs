//! Historical-average baseline keyed by hour of day, weekday and road.

use chrono::{Datelike, NaiveDateTime, Timelike};

use super::metrics::{MetricsReport, Predictions};
use crate::data::{Partition, TrafficDataset};
use crate::error::{Error, Result};

/// Bucket means over observed training speeds.
#[derive(Clone, Debug, PartialEq)]
pub struct HaTable {
    n_roads: usize,
    /// `[hour][weekday][road]`, flattened.
    buckets: Vec<Option<f64>>,
    road_means: Vec<f64>,
}

fn key(ts: NaiveDateTime) -> (usize, usize) {
    (ts.hour() as usize, ts.weekday().num_days_from_monday() as usize)
}

impl HaTable {
    /// Reads only rows before the end of the training partition; imputed
    /// entries are skipped.
    pub fn fit(data: &TrafficDataset) -> Result<Self> {
        let b = data.split.ok_or_else(|| Error::data("split boundaries not set"))?;
        let n = data.n_roads();
        let mut sum = vec![0.0; 24 * 7 * n];
        let mut cnt = vec![0usize; 24 * 7 * n];
        let (mut rsum, mut rcnt) = (vec![0.0; n], vec![0usize; n]);
        for t in 0..b.train_end {
            let (h, d) = key(data.timestamps[t]);
            for r in 0..n {
                if data.x_missing[t * n + r] {
                    continue;
                }
                let v = data.x.get(t, r);
                let i = (h * 7 + d) * n + r;
                sum[i] += v;
                cnt[i] += 1;
                rsum[r] += v;
                rcnt[r] += 1;
            }
        }
        let total: usize = rcnt.iter().sum();
        if total == 0 {
            return Err(Error::data("training partition has no observed speeds"));
        }
        let global = rsum.iter().sum::<f64>() / total as f64;
        let road_means = rsum
            .iter()
            .zip(&rcnt)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { global })
            .collect();
        let buckets = sum
            .iter()
            .zip(&cnt)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        Ok(HaTable {
            n_roads: n,
            buckets,
            road_means,
        })
    }

    pub fn bucket(&self, hour: usize, weekday: usize, road: usize) -> Option<f64> {
        self.buckets[(hour * 7 + weekday) * self.n_roads + road]
    }

    pub fn road_mean(&self, road: usize) -> f64 {
        self.road_means[road]
    }

    /// Bucket mean, or the road's training mean when the bucket is empty.
    pub fn predict(&self, ts: NaiveDateTime, road: usize) -> f64 {
        let (h, d) = key(ts);
        self.bucket(h, d, road).unwrap_or(self.road_means[road])
    }
}

/// Baseline predictions on the same windows the model is scored on.
pub fn ha_predictions(
    data: &TrafficDataset,
    partition: Partition,
    p: usize,
    q: usize,
    exclude_imputed: bool,
) -> Result<Predictions> {
    let table = HaTable::fit(data)?;
    let windows = data.windows(partition, p, q)?;
    if windows.is_empty() {
        return Err(Error::data(format!("{partition} partition has no windows")));
    }
    let n = data.n_roads();
    let mut out = Predictions::new(n, q);
    for w in windows {
        for r in 0..n {
            for h in 0..q {
                let t = w.start + p + h;
                out.pred.push(table.predict(data.timestamps[t], r));
                out.truth.push(data.x.get(t, r));
                out.include.push(!(exclude_imputed && data.x_missing[t * n + r]));
            }
        }
    }
    Ok(out)
}

pub fn ha_baseline(data: &TrafficDataset, partition: Partition, p: usize, q: usize) -> Result<MetricsReport> {
    ha_predictions(data, partition, p, q, true)?.report(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SeriesMatrix, SplitRatios};
    use chrono::Duration;

    fn dataset(values: Vec<f64>, n: usize) -> TrafficDataset {
        // 2021-01-04 is a Monday
        let start = NaiveDateTime::parse_from_str("2021-01-04T00:00:00", "%Y-%m-%dT%H:%M:%S").unwrap();
        let t = values.len() / n;
        let times = (0..t).map(|i| start + Duration::hours(i as i64)).collect();
        let x = SeriesMatrix::new(t, n, values).unwrap();
        let z = SeriesMatrix::new(t, 1, vec![1.0; t]).unwrap();
        TrafficDataset::new(times, x, z).unwrap()
    }

    #[test]
    fn monday_nine_is_averaged() {
        // four weeks; only the 09:00 Mondays of the first two weeks differ
        let t = 24 * 7 * 4;
        let mut v = vec![30.0; t];
        v[9] = 10.0;
        v[9 + 168] = 20.0;
        let mut d = dataset(v, 1);
        d.prepare(
            SplitRatios {
                train: 0.5,
                val: 0.25,
                test: 0.25,
            },
            1,
            1,
        )
        .unwrap();
        let table = HaTable::fit(&d).unwrap();
        assert_eq!(table.bucket(9, 0, 0), Some(15.0));
        let monday_nine = d.timestamps[9 + 3 * 168];
        assert_eq!(table.predict(monday_nine, 0), 15.0);
        assert_eq!(table.bucket(10, 0, 0), Some(30.0));
    }

    #[test]
    fn constant_series_is_exact() {
        let mut d = dataset(vec![42.0; 24 * 40 * 2], 2);
        d.prepare(SplitRatios::default(), 12, 3).unwrap();
        let r = ha_baseline(&d, Partition::Test, 12, 3).unwrap();
        assert_eq!(r.average.mae, 0.0);
    }

    #[test]
    fn empty_bucket_falls_back_to_road_mean() {
        // 100 hours of training cover no Sunday
        let mut v: Vec<f64> = (0..200).map(|i| i as f64).collect();
        v[5] = f64::NAN;
        let mut d = dataset(v, 1);
        d.prepare(
            SplitRatios {
                train: 0.5,
                val: 0.25,
                test: 0.25,
            },
            2,
            1,
        )
        .unwrap();
        let table = HaTable::fit(&d).unwrap();
        let mean = (0..100).filter(|&i| i != 5).map(|i| i as f64).sum::<f64>() / 99.0;
        assert_eq!(table.road_mean(0), mean);
        let sunday = d.timestamps[0] + Duration::days(6);
        assert_eq!(table.predict(sunday, 0), mean);
    }
}
