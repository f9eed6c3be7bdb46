//! Road strata by nearby POI density.

use super::metrics::{MetricsReport, Predictions, Strata};
use crate::data::geo::haversine_m;
use crate::data::{RegionGrid, RoadGraph};
use crate::error::{Error, Result};

/// Radius for a road's POI neighbourhood.
pub const POI_RADIUS_M: f64 = 500.0;

/// Mean total POI count over cells whose centers lie within `radius_m` of
/// each road (0 when none do).
pub fn poi_density(graph: &RoadGraph, grid: &RegionGrid, radius_m: f64) -> Vec<f64> {
    graph
        .nodes()
        .iter()
        .map(|n| {
            let (mut s, mut c) = (0.0, 0usize);
            for cell in 0..grid.n_cells() {
                let (la, lo) = grid.cell_center(cell);
                if haversine_m(n.lat, n.lon, la, lo) <= radius_m {
                    s += grid.poi_total(cell);
                    c += 1;
                }
            }
            if c == 0 {
                0.0
            } else {
                s / c as f64
            }
        })
        .collect()
}

/// Road indices of the top and bottom `top_frac` by density. Roads are
/// ranked by density (descending) then by id order, and the strata are the
/// two ends of that ranking.
pub fn poi_strata(density: &[f64], top_frac: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = density.len();
    if n < 4 {
        return Err(Error::data(format!("stratification needs at least 4 roads, got {n}")));
    }
    if !(top_frac > 0.0 && top_frac <= 0.5) {
        return Err(Error::config(format!("top_frac must lie in (0, 0.5], got {top_frac}")));
    }
    let k = ((top_frac * n as f64 + 1e-9).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| density[b].total_cmp(&density[a]).then(a.cmp(&b)));
    let high = order[..k].to_vec();
    let mut low = order[n - k..].to_vec();
    low.sort_unstable();
    Ok((high, low))
}

/// Metrics restricted to the high- and low-density strata.
pub fn stratified_report(
    preds: &Predictions,
    grid: &RegionGrid,
    graph: &RoadGraph,
    top_frac: f64,
) -> Result<(MetricsReport, MetricsReport)> {
    let density = poi_density(graph, grid, POI_RADIUS_M);
    let (high, low) = poi_strata(&density, top_frac)?;
    let mask = |roads: &[usize]| {
        let mut m = vec![false; graph.n_nodes()];
        roads.iter().for_each(|&r| m[r] = true);
        m
    };
    Ok((preds.report(Some(&mask(&high)))?, preds.report(Some(&mask(&low)))?))
}

/// `report` with its strata section filled in.
pub fn with_strata(
    mut report: MetricsReport,
    preds: &Predictions,
    grid: &RegionGrid,
    graph: &RoadGraph,
    top_frac: f64,
) -> Result<MetricsReport> {
    let density = poi_density(graph, grid, POI_RADIUS_M);
    let (hi, lo) = poi_strata(&density, top_frac)?;
    let (high, low) = stratified_report(preds, grid, graph, top_frac)?;
    let ids = |v: &[usize]| v.iter().map(|&r| graph.nodes()[r].id.clone()).collect();
    report.strata = Some(Box::new(Strata {
        high,
        low,
        high_roads: ids(&hi),
        low_roads: ids(&lo),
    }));
    Ok(report)
}
