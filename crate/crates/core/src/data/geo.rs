//! Great-circle geometry on WGS-84 degrees.

use super::graph::RoadGraph;
use super::grid::RegionGrid;
use crate::autodiff::Tensor;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Degrees of latitude spanned by `meters` along a meridian.
pub fn meters_to_dlat(meters: f64) -> f64 {
    (meters / EARTH_RADIUS_M).to_degrees()
}

/// Degrees of longitude spanned by `meters` along the parallel at `lat`.
pub fn meters_to_dlon(meters: f64, lat: f64) -> f64 {
    (meters / (EARTH_RADIUS_M * lat.to_radians().cos())).to_degrees()
}

/// `[N_X, N_Z]` distances in meters from each road's position to each cell center.
pub fn road_cell_distances(graph: &RoadGraph, grid: &RegionGrid) -> Tensor {
    let centers: Vec<(f64, f64)> = (0..grid.n_cells()).map(|c| grid.cell_center(c)).collect();
    let mut data = Vec::with_capacity(graph.n_nodes() * centers.len());
    for node in graph.nodes() {
        data.extend(centers.iter().map(|&(lat, lon)| haversine_m(node.lat, node.lon, lat, lon)));
    }
    Tensor::new(vec![graph.n_nodes(), grid.n_cells()], data).expect("non-empty graph and grid")
}

/// `[N_Z, N_Z]` distances in meters between cell centers.
pub fn cell_cell_distances(grid: &RegionGrid) -> Vec<f64> {
    let n = grid.n_cells();
    let centers: Vec<(f64, f64)> = (0..n).map(|c| grid.cell_center(c)).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = haversine_m(centers[i].0, centers[i].1, centers[j].0, centers[j].1);
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    out
}
