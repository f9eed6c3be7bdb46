//! Road graph, region grid, hourly series and their on-disk format.

pub mod dataset;
pub mod geo;
pub mod graph;
pub mod grid;
pub mod io;

pub use dataset::{
    split, split_bounds, DatasetNorm, NormStats, Partition, Sample, SeriesMatrix, SplitBounds, SplitRatios, TrafficDataset, Window,
};
pub use graph::{RoadEdge, RoadGraph, RoadNode};
pub use grid::{GridSpec, RegionGrid, POI_CATEGORIES};
pub use io::{load_dataset, write_dataset, DataBundle};
