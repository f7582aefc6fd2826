//! Graph-defined recurrent networks: arbitrary layer graphs with delayed
//! connections, condensed into a DAG of simple and recurrent nodes, trained
//! with truncated backpropagation through time over parallel streams.

pub mod bench;
pub mod builders;
pub mod condense;
pub mod data;
pub mod engine;
pub mod gradcheck;
pub mod kernels;
pub mod netdef;
