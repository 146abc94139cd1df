//! Road-network and probe simulator standing in for real probe archives.

pub mod dataset;
pub mod graph;
pub mod perturb;
pub mod probes;

pub use dataset::{build_dataset, Dataset, DatasetConfig, Example, Split};
pub use graph::{rasterize_road_graph, synth_road_graph, Edge, GraphParams, RoadGraph, RoadStyle};
pub use perturb::{perturb_road_graph, PerturbOp, Perturbed};
pub use probes::{simulate_probes, SimConfig};
