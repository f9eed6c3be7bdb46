//! Spatio-temporal embeddings for roads and cells.

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::Rng;

use crate::autodiff::{Activation, Fcn2, ParamStore, Tape, Tensor, Var};
use crate::data::RegionGrid;
use crate::error::{Error, Result};

pub const ONEHOT_WIDTH: usize = 24 + 7;

/// Hour-of-day one-hot followed by day-of-week one-hot (Monday first).
pub fn temporal_onehot(ts: NaiveDateTime) -> [f64; ONEHOT_WIDTH] {
    let mut v = [0.0; ONEHOT_WIDTH];
    v[ts.hour() as usize] = 1.0;
    v[24 + ts.weekday().num_days_from_monday() as usize] = 1.0;
    v
}

/// `[T, 31]` one-hot rows for a run of timestamps.
pub fn onehot_tensor(times: &[NaiveDateTime]) -> Result<Tensor> {
    let data = times.iter().flat_map(|&t| temporal_onehot(t)).collect();
    Tensor::new(vec![times.len(), ONEHOT_WIDTH], data)
}

/// Per-cell static features: scaled lat/lon, `log(1+count)` POI, satellite.
#[derive(Clone, Debug)]
pub struct CellGeoFeatures {
    pub features: Tensor,
}

impl CellGeoFeatures {
    pub fn from_grid(grid: &RegionGrid, use_poi: bool, use_satellite: bool) -> Result<Self> {
        let (lat0, lat1, lon0, lon1) = grid.bounds();
        let f = if use_satellite { grid.satellite_dim() } else { 0 };
        let width = 2 + if use_poi { 10 } else { 0 } + f;
        let mut data = Vec::with_capacity(grid.n_cells() * width);
        for c in 0..grid.n_cells() {
            let (lat, lon) = grid.cell_center(c);
            data.push((lat - lat0) / (lat1 - lat0));
            data.push((lon - lon0) / (lon1 - lon0));
            if use_poi {
                data.extend(grid.poi[c].iter().map(|&n| n.ln_1p()));
            }
            if let (true, Some(sat)) = (f > 0, &grid.satellite) {
                data.extend_from_slice(&sat[c]);
            }
        }
        let features = Tensor::new(vec![grid.n_cells(), width], data)?;
        features.check_finite("cell features")?;
        Ok(CellGeoFeatures { features })
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }
}

/// The FCNs producing STE_X and STE_Z; the temporal one is shared.
#[derive(Clone, Debug)]
pub struct SteEncoder {
    pub temporal: Fcn2,
    pub road: Fcn2,
    pub cell: Option<Fcn2>,
}

impl SteEncoder {
    /// `cell_in` is `None` when the model has no regional branch.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        road_in: usize,
        cell_in: Option<usize>,
        d: usize,
    ) -> Result<Self> {
        let temporal = Fcn2::new(store, rng, "ste.temporal", ONEHOT_WIDTH, d, d, Activation::Relu)?;
        let road = Fcn2::new(store, rng, "ste.road_spatial", road_in, d, d, Activation::Relu)?;
        let cell = cell_in
            .map(|w| Fcn2::new(store, rng, "ste.cell_spatial", w, d, d, Activation::Relu))
            .transpose()?;
        Ok(SteEncoder { temporal, road, cell })
    }

    /// `[B, T, 31]` one-hots to `[B, T, D]`.
    pub fn temporal_part(&self, tape: &mut Tape, store: &ParamStore, onehot: Var) -> Result<Var> {
        self.temporal.forward(tape, store, onehot)
    }

    fn combine(tape: &mut Tape, spatial: Var, temporal: Var) -> Result<Var> {
        let (n, d) = (tape.shape(spatial)[0], tape.shape(spatial)[1]);
        let (b, t) = (tape.shape(temporal)[0], tape.shape(temporal)[1]);
        if tape.shape(temporal)[2] != d {
            return Err(Error::ShapeMismatch {
                op: "ste",
                lhs: tape.shape(spatial).to_vec(),
                rhs: tape.shape(temporal).to_vec(),
            });
        }
        let s = tape.reshape(spatial, &[1, n, 1, d])?;
        let tm = tape.reshape(temporal, &[b, 1, t, d])?;
        tape.add(s, tm)
    }

    /// `E_X [N_X, d_emb]` and temporal part `[B, T, D]` to `[B, N_X, T, D]`.
    pub fn build_ste_x(&self, tape: &mut Tape, store: &ParamStore, e_x: Var, temporal: Var) -> Result<Var> {
        let s = self.road.forward(tape, store, e_x)?;
        Self::combine(tape, s, temporal)
    }

    /// Cell features `[N_Z, 12+F]` and temporal part `[B, T, D]` to `[B, N_Z, T, D]`.
    pub fn build_ste_z(&self, tape: &mut Tape, store: &ParamStore, geo: Var, temporal: Var) -> Result<Var> {
        let cell = self
            .cell
            .as_ref()
            .ok_or_else(|| Error::config("regional embedding requested from a road-only model"))?;
        let s = cell.forward(tape, store, geo)?;
        Self::combine(tape, s, temporal)
    }
}
