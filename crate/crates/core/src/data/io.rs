//! CSV/JSON dataset directory format.
//!
//! ```text
//! nodes.csv       road_id,lat,lon
//! edges.csv       src,dst,distance_m
//! speeds.csv      timestamp,<road_id>...
//! population.csv  timestamp,<cell_index>...
//! poi.csv         cell_index,shopping,food,...,nightlife
//! satfeat.csv     cell_index,f0..f{F-1}        (optional)
//! grid.json       {"n_h","n_w","cell_size_m","origin_lat","origin_lon"}
//! ```
//!
//! Empty CSV fields are missing values.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDateTime;

use super::dataset::{SeriesMatrix, TrafficDataset};
use super::graph::{RoadGraph, RoadNode};
use super::grid::{GridSpec, RegionGrid, POI_CATEGORIES};
use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Everything a dataset directory describes.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub graph: RoadGraph,
    pub grid: RegionGrid,
    pub data: TrafficDataset,
}

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    for fmt in [TIMESTAMP_FORMAT, "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    Err(Error::data(format!("unparseable timestamp `{s}`")))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })
}

fn records(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut rdr = reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = rdr
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    Ok((headers, rows))
}

fn num(field: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::data(format!("{}:{line}: `{field}` is not a number", path.display())))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{}:{line}", path.display())));
    }
    Ok(v)
}

fn num_or_missing(field: &str, path: &Path, line: usize) -> Result<f64> {
    if field.is_empty() {
        Ok(f64::NAN)
    } else {
        num(field, path, line)
    }
}

pub fn read_graph(dir: &Path) -> Result<RoadGraph> {
    let path = dir.join("nodes.csv");
    let (_, rows) = records(&path)?;
    let mut nodes = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() < 3 {
            return Err(Error::data(format!("{}:{}: expected road_id,lat,lon", path.display(), i + 2)));
        }
        nodes.push(RoadNode {
            id: r[0].to_string(),
            lat: num(&r[1], &path, i + 2)?,
            lon: num(&r[2], &path, i + 2)?,
        });
    }
    let path = dir.join("edges.csv");
    let mut edges = Vec::new();
    if path.exists() {
        let (_, rows) = records(&path)?;
        for (i, r) in rows.iter().enumerate() {
            if r.len() < 3 {
                return Err(Error::data(format!("{}:{}: expected src,dst,distance_m", path.display(), i + 2)));
            }
            edges.push((r[0].to_string(), r[1].to_string(), num(&r[2], &path, i + 2)?));
        }
    }
    RoadGraph::new(nodes, edges)
}

fn cell_index(field: &str, n: usize, path: &Path) -> Result<usize> {
    let c: usize = field
        .parse()
        .map_err(|_| Error::data(format!("{}: bad cell index `{field}`", path.display())))?;
    if c >= n {
        return Err(Error::data(format!(
            "{}: cell index {c} outside a grid of {n} cells",
            path.display()
        )));
    }
    Ok(c)
}

pub fn read_grid(dir: &Path) -> Result<RegionGrid> {
    let path = dir.join("grid.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let spec: GridSpec = serde_json::from_str(&text)?;
    let n = spec.n_h * spec.n_w;

    let path = dir.join("poi.csv");
    let mut poi = vec![[0.0; 10]; n];
    let mut seen = vec![false; n];
    let (headers, rows) = records(&path)?;
    let cols: Vec<usize> = POI_CATEGORIES
        .iter()
        .map(|cat| {
            headers
                .iter()
                .position(|h| h == cat)
                .ok_or_else(|| Error::data(format!("{}: missing POI column `{cat}`", path.display())))
        })
        .collect::<Result<_>>()?;
    for (i, r) in rows.iter().enumerate() {
        let c = cell_index(&r[0], n, &path)?;
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::data(format!("{}: duplicate cell {c}", path.display())));
        }
        for (k, &col) in cols.iter().enumerate() {
            poi[c][k] = num(&r[col], &path, i + 2)?;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::data(format!(
            "non-rectangular grid: poi.csv covers {} of {n} cells",
            seen.iter().filter(|s| **s).count()
        )));
    }

    let path = dir.join("satfeat.csv");
    let satellite = if path.exists() {
        let (headers, rows) = records(&path)?;
        let f = headers.len() - 1;
        let mut sat = vec![Vec::new(); n];
        for (i, r) in rows.iter().enumerate() {
            let c = cell_index(&r[0], n, &path)?;
            sat[c] = (1..=f).map(|k| num(&r[k], &path, i + 2)).collect::<Result<_>>()?;
        }
        if sat.iter().any(Vec::is_empty) && f > 0 {
            return Err(Error::data("satfeat.csv does not cover every cell"));
        }
        (f > 0).then_some(sat)
    } else {
        None
    };
    RegionGrid::new(spec, poi, satellite)
}

/// Reads a timestamped wide table whose value columns are mapped through `column_of`.
fn read_series(
    path: &Path,
    width: usize,
    column_of: impl Fn(&str) -> Result<usize>,
) -> Result<(Vec<NaiveDateTime>, SeriesMatrix)> {
    let (headers, rows) = records(path)?;
    if headers.first().map(String::as_str) != Some("timestamp") {
        return Err(Error::data(format!("{}: first column must be `timestamp`", path.display())));
    }
    let mut target = Vec::with_capacity(headers.len() - 1);
    let mut covered = vec![false; width];
    for h in &headers[1..] {
        let j = column_of(h)?;
        if std::mem::replace(&mut covered[j], true) {
            return Err(Error::data(format!("{}: duplicate column `{h}`", path.display())));
        }
        target.push(j);
    }
    if let Some(j) = covered.iter().position(|c| !c) {
        return Err(Error::data(format!("{}: no column for series {j}", path.display())));
    }
    let mut ts = Vec::with_capacity(rows.len());
    let mut values = vec![f64::NAN; rows.len() * width];
    for (t, r) in rows.iter().enumerate() {
        ts.push(parse_timestamp(&r[0])?);
        for (k, &j) in target.iter().enumerate() {
            values[t * width + j] = num_or_missing(r.get(k + 1).unwrap_or(""), path, t + 2)?;
        }
    }
    let m = SeriesMatrix::new(rows.len(), width, values)?;
    Ok((ts, m))
}

pub fn load_dataset(dir: &Path) -> Result<DataBundle> {
    let graph = read_graph(dir)?;
    let grid = read_grid(dir)?;
    let (ts_x, x) = read_series(&dir.join("speeds.csv"), graph.n_nodes(), |h| {
        graph
            .index_of(h)
            .ok_or_else(|| Error::data(format!("speeds.csv: unknown road_id column `{h}`")))
    })?;
    let n = grid.n_cells();
    let (ts_z, z) = read_series(&dir.join("population.csv"), n, |h| {
        cell_index(h, n, Path::new("population.csv")).map_err(|_| {
            Error::data(format!(
                "non-rectangular grid: population column `{h}` is not a cell of the {}x{} grid",
                grid.spec.n_h, grid.spec.n_w
            ))
        })
    })?;
    if ts_x != ts_z {
        return Err(Error::data("speeds.csv and population.csv timestamps differ"));
    }
    let data = TrafficDataset::new(ts_x, x, z)?;
    Ok(DataBundle { graph, grid, data })
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w = create(path)?;
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn series_lines<'a>(
    d: &'a TrafficDataset,
    m: &'a SeriesMatrix,
    missing: &'a [bool],
    header: String,
) -> impl Iterator<Item = String> + 'a {
    std::iter::once(header).chain((0..m.steps).map(move |t| {
        let mut line = d.timestamps[t].format(TIMESTAMP_FORMAT).to_string();
        for j in 0..m.width {
            line.push(',');
            let v = if missing[t * m.width + j] { f64::NAN } else { m.get(t, j) };
            line.push_str(&fmt_value(v));
        }
        line
    }))
}

/// Writes raw (unfilled) values; entries flagged missing are written empty.
pub fn write_dataset(dir: &Path, bundle: &DataBundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &bundle.graph;
    write_lines(
        &dir.join("nodes.csv"),
        std::iter::once("road_id,lat,lon".to_string())
            .chain(g.nodes().iter().map(|n| format!("{},{},{}", n.id, n.lat, n.lon))),
    )?;
    write_lines(
        &dir.join("edges.csv"),
        std::iter::once("src,dst,distance_m".to_string()).chain(g.edges().iter().map(|e| {
            format!("{},{},{}", g.nodes()[e.src].id, g.nodes()[e.dst].id, e.distance_m)
        })),
    )?;

    let d = &bundle.data;
    let header_x = std::iter::once("timestamp".to_string())
        .chain(g.nodes().iter().map(|n| n.id.clone()))
        .collect::<Vec<_>>()
        .join(",");
    write_lines(&dir.join("speeds.csv"), series_lines(d, &d.x, &d.x_missing, header_x))?;
    let header_z = std::iter::once("timestamp".to_string())
        .chain((0..d.n_cells()).map(|c| c.to_string()))
        .collect::<Vec<_>>()
        .join(",");
    write_lines(&dir.join("population.csv"), series_lines(d, &d.z, &d.z_missing, header_z))?;

    let grid = &bundle.grid;
    write_lines(
        &dir.join("poi.csv"),
        std::iter::once(format!("cell_index,{}", POI_CATEGORIES.join(","))).chain((0..grid.n_cells()).map(|c| {
            let counts: Vec<String> = grid.poi[c].iter().map(|v| format!("{v}")).collect();
            format!("{c},{}", counts.join(","))
        })),
    )?;
    if let Some(sat) = &grid.satellite {
        let f = grid.satellite_dim();
        let header = std::iter::once("cell_index".to_string())
            .chain((0..f).map(|k| format!("f{k}")))
            .collect::<Vec<_>>()
            .join(",");
        write_lines(
            &dir.join("satfeat.csv"),
            std::iter::once(header).chain(sat.iter().enumerate().map(|(c, row)| {
                let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                format!("{c},{}", vals.join(","))
            })),
        )?;
    }
    let path = dir.join("grid.json");
    let text = serde_json::to_string_pretty(&grid.spec)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
