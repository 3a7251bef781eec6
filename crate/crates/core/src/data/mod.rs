//! Multimodal graphs: in-memory model, on-disk format, distance buckets,
//! splits and the synthetic generator.

mod graph;
mod io;
mod spd;
mod splits;
mod synthetic;

pub use graph::{heterophily_ratio, GraphMeta, MultimodalGraph, NodeData};
pub use io::{load_graph, save_graph};
pub use spd::{
    bucket_of_distance, spd_buckets, SpdBucketTable, NUM_SPD_BUCKETS, UNREACHABLE_BUCKET,
};
pub use splits::{make_splits, LinkSplit, PairSet, Role, SplitAssignment, Task};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[cfg(test)]
pub(crate) use graph::tests::toy_graph;
