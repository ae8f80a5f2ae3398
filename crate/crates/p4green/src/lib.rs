//! Discrete-event simulator of a three-tier data center whose core and
//! access switches consolidate traffic onto the fewest aggregation
//! switches and steer new TCP flows toward servers reporting renewable
//! energy, with TCP-timestamp session affinity. Includes the experiment
//! harness and CSV metrics pipeline behind the `p4green` binary.

pub mod consolidation;
pub mod engine;
pub mod metrics;
pub mod packet;
pub mod pipeline;
pub mod scenario;
pub mod time;
pub mod topology;
pub mod trace;
pub mod workload;

/// Node index within a topology. Switches occupy the low indices, hosts
/// follow.
pub type NodeId = usize;

/// Port number local to one node.
pub type PortId = u8;
