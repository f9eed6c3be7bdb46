//! MAE / RMSE / MAPE accumulation in original units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Targets below this speed (km/h) are left out of MAPE.
pub const EPS_MAPE: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Sums {
    abs: f64,
    sq: f64,
    ape: f64,
    n: usize,
    n_mape: usize,
}

impl Sums {
    fn add(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if truth.abs() >= EPS_MAPE {
            self.ape += (e / truth).abs();
            self.n_mape += 1;
        }
    }

    fn merge(&mut self, o: &Sums) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.ape += o.ape;
        self.n += o.n;
        self.n_mape += o.n_mape;
    }

    fn finish(&self, horizon: Option<usize>) -> Result<Metrics> {
        if self.n == 0 {
            return Err(Error::data(match horizon {
                Some(h) => format!("no valid targets at horizon {h}"),
                None => "no valid targets".to_string(),
            }));
        }
        let n = self.n as f64;
        Ok(Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.n_mape > 0).then(|| 100.0 * self.ape / self.n_mape as f64),
            count: self.n,
            mape_count: self.n_mape,
        })
    }
}

/// Errors over one set of targets. MAPE is in percent and absent when no
/// target reaches [`EPS_MAPE`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub count: usize,
    pub mape_count: usize,
}

/// Per-horizon sums; merge order is the caller's responsibility.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsAccumulator {
    horizons: Vec<Sums>,
}

impl MetricsAccumulator {
    pub fn new(q: usize) -> Self {
        MetricsAccumulator {
            horizons: vec![Sums::default(); q],
        }
    }

    pub fn horizons(&self) -> usize {
        self.horizons.len()
    }

    /// Adds one prediction for horizon index `h` (0-based).
    pub fn add(&mut self, h: usize, pred: f64, truth: f64) {
        self.horizons[h].add(pred, truth);
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        assert_eq!(self.horizons.len(), other.horizons.len());
        for (a, b) in self.horizons.iter_mut().zip(&other.horizons) {
            a.merge(b);
        }
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        let horizons = self
            .horizons
            .iter()
            .enumerate()
            .map(|(h, s)| s.finish(Some(h + 1)))
            .collect::<Result<Vec<_>>>()?;
        let mut all = Sums::default();
        for s in &self.horizons {
            all.merge(s);
        }
        Ok(MetricsReport {
            horizons,
            average: all.finish(None)?,
            strata: None,
        })
    }
}

/// Metrics for the top and bottom POI-density strata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub high: MetricsReport,
    pub low: MetricsReport,
    pub high_roads: Vec<String>,
    pub low_roads: Vec<String>,
}

/// Per-horizon and pooled metrics; the average pools every counted target,
/// so it equals the count-weighted mean of the per-horizon values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizons: Vec<Metrics>,
    pub average: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<Box<Strata>>,
}

/// Denormalized predictions and targets for a set of windows, `[W, N_X, Q]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub n_roads: usize,
    pub q: usize,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
    /// Whether each target counts (imputed targets are usually excluded).
    pub include: Vec<bool>,
}

impl Predictions {
    pub fn new(n_roads: usize, q: usize) -> Self {
        Predictions {
            n_roads,
            q,
            ..Default::default()
        }
    }

    pub fn windows(&self) -> usize {
        self.pred.len() / (self.n_roads * self.q).max(1)
    }

    pub fn extend(&mut self, other: &Predictions) {
        assert_eq!((self.n_roads, self.q), (other.n_roads, other.q));
        self.pred.extend_from_slice(&other.pred);
        self.truth.extend_from_slice(&other.truth);
        self.include.extend_from_slice(&other.include);
    }

    /// Accumulates the entries of roads where `roads[r]` holds (all when `None`).
    pub fn accumulate(&self, roads: Option<&[bool]>) -> MetricsAccumulator {
        let mut acc = MetricsAccumulator::new(self.q);
        for (i, ((&p, &t), &inc)) in self.pred.iter().zip(&self.truth).zip(&self.include).enumerate() {
            let h = i % self.q;
            let r = (i / self.q) % self.n_roads;
            if inc && roads.map_or(true, |m| m[r]) {
                acc.add(h, p, t);
            }
        }
        acc
    }

    pub fn report(&self, roads: Option<&[bool]>) -> Result<MetricsReport> {
        if self.pred.is_empty() {
            return Err(Error::data("no windows to evaluate"));
        }
        self.accumulate(roads).finish()
    }
}
