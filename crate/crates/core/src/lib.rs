//! A software disaggregated-memory node with operator off-loading.
//!
//! The node keeps tables in a striped, page-mapped buffer pool
//! ([`memory`]), speaks an RDMA-style verb protocol ([`wire`]), and runs
//! precompiled operator pipelines on the read path of each connection's
//! dynamic region ([`pipeline`], [`operators`]). [`client`] is the data API
//! used by compute nodes, [`server`] the node process, and [`bench`] the
//! workload generator and experiment harness comparing off-loaded execution
//! with local and remote CPU baselines.

pub mod memory;
pub mod operators;
pub mod pipeline;
pub mod reference;
pub mod bench;
pub mod client;
pub mod server;
pub mod schema;
pub mod wire;
