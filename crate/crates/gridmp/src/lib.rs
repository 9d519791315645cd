//! gridmp — a miniature grid-aware message-passing runtime.
//!
//! A job is a set of subjobs, each mapped onto a (simulated) machine at a
//! site. The runtime clusters ranks into a four-level hierarchy (wide area,
//! local area, system area, vendor channel), picks the cheapest method for
//! every pair, polls TCP only when a receive might need it, and builds
//! topology-aware collective schedules from the same depths and colors it
//! exposes to applications through communicator attributes.
//!
//! Processes are launched and held at a startup barrier by `gridrun`;
//! `gridbench` measures latency, category overhead, and per-level collective
//! message counts.

pub mod collectives;
pub mod comm;
pub mod error;
pub mod harness;
pub mod progress;
pub mod rendezvous;
pub mod topology;
pub mod transport;
pub mod wire;

pub use collectives::{
    binomial_edges, build_schedule, count_level_messages, CollAlgo, LevelCounts, LevelSchedule,
};
pub use comm::{
    AttrValue, BootstrapConfig, CommId, Envelope, RecvSource, RecvTag, RecvTest, ReduceOp,
    Reducible, Request, Runtime, SplitColor, Status, TopologyAttributes, ATTR_TOPOLOGY_COLORS,
    ATTR_TOPOLOGY_DEPTHS, WORLD,
};
pub use error::{Error, Result};
pub use progress::{categorize, poll_policy, Category, PeerSpec, PollCounters, PollPolicy};
pub use topology::{
    clusters_at_level, compute_topology, example_grid_layout, same_color, JobLayout, SubjobSpec,
    TopologyMap,
};
pub use transport::{select_method, vendor_vs_tcp_roundtrip, ChannelStats, Method};
pub use wire::{Dtype, WireData, WireHeader};

/// Monotonic clock reading in nanoseconds. Comparable across processes on
/// the same host, which is what the startup-barrier assertions need.
pub fn monotonic_ns() -> u128 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime(CLOCK_MONOTONIC) failed");
    ts.tv_sec as u128 * 1_000_000_000 + ts.tv_nsec as u128
}
