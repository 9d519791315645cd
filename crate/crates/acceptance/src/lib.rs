//! Shared pieces of the acceptance applications.

use gridmp::{AttrValue, Runtime, ATTR_TOPOLOGY_COLORS, ATTR_TOPOLOGY_DEPTHS, WORLD};

/// World-relative topology attributes as owned vectors.
pub fn world_topology(rt: &Runtime) -> (Vec<usize>, Vec<Vec<i32>>) {
    let depths = match rt.attr_get(WORLD, ATTR_TOPOLOGY_DEPTHS).unwrap().unwrap() {
        AttrValue::Depths(d) => d.to_vec(),
        _ => unreachable!("depth key yields depths"),
    };
    let colors = match rt.attr_get(WORLD, ATTR_TOPOLOGY_COLORS).unwrap().unwrap() {
        AttrValue::Colors(c) => c.to_vec(),
        _ => unreachable!("color key yields colors"),
    };
    (depths, colors)
}

/// Deterministic per-edge payload for exchange tests.
pub fn edge_payload(from: usize, to: usize, round: usize, len: usize) -> Vec<i32> {
    (0..len)
        .map(|i| (from as i32) * 1_000_003 + (to as i32) * 1_009 + (round as i32) * 31 + i as i32)
        .collect()
}
