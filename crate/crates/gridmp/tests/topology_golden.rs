//! Golden-file check of the 12-rank example grid: the computed table must
//! reproduce the reference depths/colors byte for byte in the canonical
//! serialization.

use gridmp::{compute_topology, example_grid_layout, TopologyMap};

#[test]
fn example_grid_serialization_matches_golden_file() {
    let map = compute_topology(&example_grid_layout()).unwrap();
    let golden = include_str!("data/example_grid_topology.txt");
    assert_eq!(map.to_text(), golden);
    assert_eq!(TopologyMap::from_text(golden).unwrap(), map);
}
