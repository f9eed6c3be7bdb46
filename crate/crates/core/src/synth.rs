//! Seeded generator of coupled road/region datasets in which future road
//! speed depends on the recent population of nearby cells.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::geo::{haversine_m, meters_to_dlat, meters_to_dlon};
use crate::data::io::parse_timestamp;
use crate::data::{write_dataset, DataBundle, GridSpec, RegionGrid, RoadGraph, RoadNode, SeriesMatrix, TrafficDataset};
use crate::error::{Error, Result};

/// Generator parameters. Every field has a default, so partial JSON documents work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_roads: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub cell_size_m: f64,
    /// Hourly steps.
    pub steps: usize,
    pub seed: u64,
    /// Coupling strength in `[0, 1]`.
    pub alpha: f64,
    /// Hours between a population change and its effect on speed.
    pub lag: usize,
    /// Speed change in km/h per standard deviation of local population at `alpha = 1`.
    pub coupling_kmh: f64,
    /// `-1` makes crowds slow traffic down, `+1` speeds it up.
    pub coupling_sign: f64,
    /// Cells within this distance of a road count as local.
    pub radius_m: f64,
    /// Standard deviation of the speed noise in km/h.
    pub noise: f64,
    /// Relative standard deviation of the population noise.
    pub population_noise: f64,
    /// Fraction of commercial (vs residential) cells.
    pub commercial_frac: f64,
    /// Probability per cell and hour that a population surge starts.
    pub event_rate: f64,
    /// Peak surge size relative to the mean cell population.
    pub event_scale: f64,
    /// Surge duration in hours.
    pub event_hours: usize,
    /// Spatial spread of a surge in meters.
    pub event_radius_m: f64,
    pub satellite_dim: usize,
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// First timestamp, `YYYY-MM-DDTHH:MM:SS`.
    pub start: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_roads: 20,
            n_h: 6,
            n_w: 6,
            cell_size_m: 150.0,
            steps: 3000,
            seed: 0,
            alpha: 0.8,
            lag: 1,
            coupling_kmh: 10.0,
            coupling_sign: -1.0,
            radius_m: 500.0,
            noise: 2.0,
            population_noise: 0.05,
            commercial_frac: 0.5,
            event_rate: 0.01,
            event_scale: 2.0,
            event_hours: 6,
            event_radius_m: 250.0,
            satellite_dim: 4,
            origin_lat: 37.49,
            origin_lon: 127.02,
            start: "2021-01-04T00:00:00".into(),
        }
    }
}

/// Shortest series the generator accepts for a history/horizon pair.
pub fn min_steps(p: usize, q: usize) -> usize {
    10 * (p + q)
}

impl SynthSpec {
    /// Checks the spec against the default 12-step history and 3-step horizon.
    pub fn validate(&self) -> Result<()> {
        self.validate_for(12, 3)
    }

    pub fn validate_for(&self, p: usize, q: usize) -> Result<()> {
        if self.steps < min_steps(p, q) {
            return Err(Error::config(format!(
                "steps must be at least 10·(P+Q) = {}, got {}",
                min_steps(p, q),
                self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.coupling_sign.abs() != 1.0 {
            return Err(Error::config("coupling_sign must be -1 or 1"));
        }
        if !(0.0..=1.0).contains(&self.commercial_frac) || !(0.0..=1.0).contains(&self.event_rate) {
            return Err(Error::config("commercial_frac and event_rate must lie in [0, 1]"));
        }
        for (name, v) in [
            ("cell_size_m", self.cell_size_m),
            ("radius_m", self.radius_m),
            ("event_radius_m", self.event_radius_m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("noise", self.noise),
            ("population_noise", self.population_noise),
            ("event_scale", self.event_scale),
            ("coupling_kmh", self.coupling_kmh),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        if self.n_roads < 3 {
            return Err(Error::config("at least 3 roads are needed for a ring"));
        }
        if self.n_h < 2 || self.n_w < 2 {
            return Err(Error::config(format!(
                "grid too small to contain roads: {}x{} cells",
                self.n_h, self.n_w
            )));
        }
        // Roads sit on an ellipse inside the grid; require some room between them.
        let (ry, rx) = self.ring_radii();
        let perimeter = PI * (3.0 * (rx + ry) - ((3.0 * rx + ry) * (rx + 3.0 * ry)).sqrt());
        if perimeter / (self.n_roads as f64) < 10.0 {
            return Err(Error::config(format!(
                "grid too small to contain roads: {} roads on a {:.0} m ring",
                self.n_roads, perimeter
            )));
        }
        parse_timestamp(&self.start)?;
        Ok(())
    }

    fn ring_radii(&self) -> (f64, f64) {
        (
            0.35 * self.n_h as f64 * self.cell_size_m,
            0.35 * self.n_w as f64 * self.cell_size_m,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Archetype {
    Commercial,
    Residential,
}

// Per-category Poisson means in `POI_CATEGORIES` order.
const COMMERCIAL_POI: [f64; 10] = [20.0, 25.0, 10.0, 6.0, 15.0, 2.0, 1.0, 4.0, 3.0, 8.0];
const RESIDENTIAL_POI: [f64; 10] = [3.0, 5.0, 2.0, 2.0, 1.0, 1.0, 2.0, 0.5, 1.0, 0.5];

/// Independent substream for one generation stage.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng)
}

fn road_graph(spec: &SynthSpec) -> Result<RoadGraph> {
    let (ry, rx) = spec.ring_radii();
    let cy = 0.5 * spec.n_h as f64 * spec.cell_size_m;
    let cx = 0.5 * spec.n_w as f64 * spec.cell_size_m;
    let n = spec.n_roads;
    let nodes: Vec<RoadNode> = (0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            let (north, east) = (cy + ry * a.sin(), cx + rx * a.cos());
            RoadNode {
                id: i.to_string(),
                lat: spec.origin_lat + meters_to_dlat(north),
                lon: spec.origin_lon + meters_to_dlon(east, spec.origin_lat),
            }
        })
        .collect();
    let dist = |a: usize, b: usize| haversine_m(nodes[a].lat, nodes[a].lon, nodes[b].lat, nodes[b].lon);
    let mut edges = Vec::new();
    let mut link = |a: usize, b: usize| {
        let d = dist(a, b);
        edges.push((a.to_string(), b.to_string(), d));
        edges.push((b.to_string(), a.to_string(), d));
    };
    for i in 0..n {
        link(i, (i + 1) % n);
    }
    // chords across the ring from every third node
    for i in (0..n / 2).step_by(3) {
        link(i, i + n / 2);
    }
    RoadGraph::new(nodes, edges)
}

fn region_grid(spec: &SynthSpec, kinds: &[Archetype]) -> Result<RegionGrid> {
    let mut rng = stream(spec.seed, 1);
    let poi = kinds
        .iter()
        .map(|k| {
            let means = match k {
                Archetype::Commercial => &COMMERCIAL_POI,
                Archetype::Residential => &RESIDENTIAL_POI,
            };
            let mut row = [0.0; 10];
            for (slot, &m) in row.iter_mut().zip(means) {
                *slot = poisson(&mut rng, m);
            }
            row
        })
        .collect();
    let satellite = (spec.satellite_dim > 0).then(|| {
        let jitter = Normal::new(0.0, 0.1).expect("valid std");
        kinds
            .iter()
            .map(|k| {
                let built = if *k == Archetype::Commercial { 0.8 } else { 0.4 };
                (0..spec.satellite_dim)
                    .map(|f| {
                        let base = if f % 2 == 0 { built } else { 1.0 - built };
                        base + jitter.sample(&mut rng)
                    })
                    .collect()
            })
            .collect()
    });
    RegionGrid::new(
        GridSpec {
            n_h: spec.n_h,
            n_w: spec.n_w,
            cell_size_m: spec.cell_size_m,
            origin_lat: spec.origin_lat,
            origin_lon: spec.origin_lon,
        },
        poi,
        satellite,
    )
}

/// Population surface `T × N_Z`: daily and weekly cycles per archetype plus
/// spatially spread surges and multiplicative noise.
fn population(spec: &SynthSpec, grid: &RegionGrid, kinds: &[Archetype], times: &[NaiveDateTime]) -> Vec<f64> {
    let n_z = grid.n_cells();
    let t_len = times.len();
    let mut rng = stream(spec.seed, 2);
    let base: Vec<f64> = kinds
        .iter()
        .map(|k| match k {
            Archetype::Commercial => rng.gen_range(800.0..1500.0),
            Archetype::Residential => rng.gen_range(400.0..900.0),
        })
        .collect();
    let mean_base = base.iter().sum::<f64>() / n_z as f64;
    let mut z = vec![0.0; t_len * n_z];
    for (t, ts) in times.iter().enumerate() {
        let h = ts.hour() as f64;
        let weekend = ts.weekday().number_from_monday() >= 6;
        for c in 0..n_z {
            let cycle = match kinds[c] {
                Archetype::Commercial => {
                    (1.0 + 0.5 * (2.0 * PI * (h - 13.0) / 24.0).cos()) * if weekend { 0.6 } else { 1.0 }
                }
                Archetype::Residential => {
                    (1.0 + 0.3 * (2.0 * PI * (h - 1.0) / 24.0).cos()) * if weekend { 1.1 } else { 0.9 }
                }
            };
            z[t * n_z + c] = base[c] * cycle;
        }
    }

    // surges: triangular in time, Gaussian in space
    let mut ev_rng = stream(spec.seed, 3);
    let centers: Vec<(f64, f64)> = (0..n_z).map(|c| grid.cell_center(c)).collect();
    let len = spec.event_hours.max(1);
    for t0 in 0..t_len {
        for c0 in 0..n_z {
            if !ev_rng.gen_bool(spec.event_rate) {
                continue;
            }
            let peak = spec.event_scale * mean_base * ev_rng.gen_range(0.5..1.5);
            let footprint: Vec<f64> = centers
                .iter()
                .map(|&(la, lo)| {
                    let d = haversine_m(centers[c0].0, centers[c0].1, la, lo) / spec.event_radius_m;
                    (-d * d).exp()
                })
                .collect();
            let half = len as f64 / 2.0;
            for k in 0..len {
                let t = t0 + k;
                if t >= t_len {
                    break;
                }
                let shape = 1.0 - ((k as f64 + 0.5) - half).abs() / half;
                for (c, w) in footprint.iter().enumerate() {
                    z[t * n_z + c] += peak * shape * w;
                }
            }
        }
    }

    let mut noise_rng = stream(spec.seed, 4);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for v in z.iter_mut() {
        *v = (*v * (1.0 + spec.population_noise * normal.sample(&mut noise_rng))).max(0.0);
    }
    z
}

/// Mean population of the cells within `radius_m` of each road, `T × N_X`.
/// Roads without a cell in range use their nearest cell.
pub fn local_population(graph: &RoadGraph, grid: &RegionGrid, z: &SeriesMatrix, radius_m: f64) -> Vec<f64> {
    let n_x = graph.n_nodes();
    let n_z = grid.n_cells();
    let members: Vec<Vec<usize>> = graph
        .nodes()
        .iter()
        .map(|node| {
            let d: Vec<f64> = (0..n_z)
                .map(|c| {
                    let (la, lo) = grid.cell_center(c);
                    haversine_m(node.lat, node.lon, la, lo)
                })
                .collect();
            let near: Vec<usize> = (0..n_z).filter(|&c| d[c] <= radius_m).collect();
            if near.is_empty() {
                let best = (0..n_z).min_by(|&a, &b| d[a].total_cmp(&d[b])).expect("non-empty grid");
                vec![best]
            } else {
                near
            }
        })
        .collect();
    let mut out = vec![0.0; z.steps * n_x];
    for t in 0..z.steps {
        let row = z.row(t);
        for (r, cells) in members.iter().enumerate() {
            out[t * n_x + r] = cells.iter().map(|&c| row[c]).sum::<f64>() / cells.len() as f64;
        }
    }
    out
}

/// Builds the dataset in memory.
pub fn generate(spec: &SynthSpec) -> Result<DataBundle> {
    spec.validate()?;
    let start = parse_timestamp(&spec.start)?;
    let times: Vec<NaiveDateTime> = (0..spec.steps).map(|t| start + Duration::hours(t as i64)).collect();

    let graph = road_graph(spec)?;
    let mut kind_rng = stream(spec.seed, 0);
    let n_z = spec.n_h * spec.n_w;
    let kinds: Vec<Archetype> = (0..n_z)
        .map(|_| {
            if kind_rng.gen_bool(spec.commercial_frac) {
                Archetype::Commercial
            } else {
                Archetype::Residential
            }
        })
        .collect();
    let grid = region_grid(spec, &kinds)?;
    for node in graph.nodes() {
        if !grid.contains(node.lat, node.lon) {
            return Err(Error::config(format!("grid too small to contain road {}", node.id)));
        }
    }
    let z = SeriesMatrix::new(spec.steps, n_z, population(spec, &grid, &kinds, &times))?;

    // standardized local population per road
    let n_x = graph.n_nodes();
    let local = local_population(&graph, &grid, &z, spec.radius_m);
    let mut lz = local.clone();
    for r in 0..n_x {
        let col: Vec<f64> = (0..spec.steps).map(|t| local[t * n_x + r]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for t in 0..spec.steps {
            lz[t * n_x + r] = (local[t * n_x + r] - mean) / sd;
        }
    }

    let mut rng = stream(spec.seed, 5);
    let level: Vec<f64> = (0..n_x).map(|_| rng.gen_range(45.0..60.0)).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let gain = spec.coupling_sign * spec.alpha * spec.coupling_kmh;
    let mut x = vec![0.0; spec.steps * n_x];
    for (t, ts) in times.iter().enumerate() {
        // two rush hours a day, slowest at 08:00 and 20:00
        let profile = -6.0 * (2.0 * PI * 2.0 * (ts.hour() as f64 - 8.0) / 24.0).cos();
        let src = t.saturating_sub(spec.lag);
        for r in 0..n_x {
            let v = level[r] + profile + gain * lz[src * n_x + r] + spec.noise * normal.sample(&mut rng);
            x[t * n_x + r] = v.clamp(1.0, 80.0);
        }
    }
    let x = SeriesMatrix::new(spec.steps, n_x, x)?;
    let data = TrafficDataset::new(times, x, z)?;
    Ok(DataBundle { graph, grid, data })
}

/// Generates and writes the dataset directory.
pub fn generate_to(spec: &SynthSpec, dir: &Path) -> Result<DataBundle> {
    let bundle = generate(spec)?;
    write_dataset(dir, &bundle)?;
    Ok(bundle)
}

/// Marks `round(frac · T · N_X)` distinct speed entries missing.
pub fn inject_missing(mut data: TrafficDataset, frac: f64, seed: u64) -> Result<TrafficDataset> {
    if !(0.0..0.5).contains(&frac) {
        return Err(Error::config(format!("missing fraction must lie in [0, 0.5), got {frac}")));
    }
    let n = data.x.values.len();
    let count = (frac * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, n, count) {
        data.x.values[i] = f64::NAN;
        data.x_missing[i] = true;
    }
    Ok(data)
}
