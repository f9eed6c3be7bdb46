use serde::{Deserialize, Serialize};

use super::geo::{meters_to_dlat, meters_to_dlon};
use crate::error::{Error, Result};

pub const POI_CATEGORIES: [&str; 10] = [
    "shopping",
    "food",
    "cafe",
    "beauty",
    "work",
    "hospital",
    "school",
    "art_entertainment",
    "lodging",
    "nightlife",
];

/// Contents of `grid.json`. The origin is the south-west corner of cell 0;
/// rows run northwards and columns eastwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_h: usize,
    pub n_w: usize,
    #[serde(default = "default_cell_size")]
    pub cell_size_m: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
}

fn default_cell_size() -> f64 {
    150.0
}

/// Rectangular lattice of cells with static geographic features.
#[derive(Clone, Debug)]
pub struct RegionGrid {
    pub spec: GridSpec,
    /// Per-cell POI counts in [`POI_CATEGORIES`] order.
    pub poi: Vec<[f64; 10]>,
    /// Optional per-cell satellite feature vectors, all of equal length.
    pub satellite: Option<Vec<Vec<f64>>>,
}

impl RegionGrid {
    pub fn new(spec: GridSpec, poi: Vec<[f64; 10]>, satellite: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if spec.n_h == 0 || spec.n_w == 0 {
            return Err(Error::data("grid extents must be positive"));
        }
        if !(spec.cell_size_m > 0.0) {
            return Err(Error::data("cell_size_m must be positive"));
        }
        let n = spec.n_h * spec.n_w;
        if poi.len() != n {
            return Err(Error::data(format!(
                "non-rectangular grid: {} POI rows for {}x{} cells",
                poi.len(),
                spec.n_h,
                spec.n_w
            )));
        }
        if poi.iter().flatten().any(|&c| !(c >= 0.0) || !c.is_finite()) {
            return Err(Error::data("POI counts must be finite and non-negative"));
        }
        if let Some(sat) = &satellite {
            if sat.len() != n {
                return Err(Error::data(format!("{} satellite rows for {n} cells", sat.len())));
            }
            let f = sat[0].len();
            if sat.iter().any(|r| r.len() != f) {
                return Err(Error::data("satellite feature vectors differ in length"));
            }
            if sat.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("satellite features".into()));
            }
        }
        Ok(RegionGrid { spec, poi, satellite })
    }

    pub fn n_cells(&self) -> usize {
        self.spec.n_h * self.spec.n_w
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.spec.n_w, cell % self.spec.n_w)
    }

    /// `(lat, lon)` of a cell center.
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (r, c) = self.row_col(cell);
        let s = &self.spec;
        let lat = s.origin_lat + meters_to_dlat((r as f64 + 0.5) * s.cell_size_m);
        let lon = s.origin_lon + meters_to_dlon((c as f64 + 0.5) * s.cell_size_m, s.origin_lat);
        (lat, lon)
    }

    /// `(lat_min, lat_max, lon_min, lon_max)` of the outer boundary.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let s = &self.spec;
        let lat_max = s.origin_lat + meters_to_dlat(s.n_h as f64 * s.cell_size_m);
        let lon_max = s.origin_lon + meters_to_dlon(s.n_w as f64 * s.cell_size_m, s.origin_lat);
        (s.origin_lat, lat_max, s.origin_lon, lon_max)
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        let (a, b, c, d) = self.bounds();
        lat >= a && lat <= b && lon >= c && lon <= d
    }

    pub fn poi_total(&self, cell: usize) -> f64 {
        self.poi[cell].iter().sum()
    }

    pub fn satellite_dim(&self) -> usize {
        self.satellite.as_ref().map_or(0, |s| s[0].len())
    }
}
