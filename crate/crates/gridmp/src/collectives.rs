//! Topology-aware collective schedules.
//!
//! A multilevel schedule confines traffic to the cheapest level able to carry
//! it: one binomial tree among site representatives, one among machine
//! representatives inside each site, and one over the members of each
//! machine. The union of the tiers is a spanning tree rooted at the
//! operation root. A topology-unaware binomial tree over communicator ranks
//! serves as the baseline it is measured against.

use crate::topology::{same_color, TopologyMap, LEVEL_LOCAL_AREA, LEVEL_SYSTEM_AREA};
use crate::transport::{select_method, Method};

/// Which algorithm the API-level collective entry points use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollAlgo {
    Multilevel,
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeEdge {
    pub parent: usize,
    pub child: usize,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub members: Vec<usize>,
    pub representative: usize,
}

/// One tier of the schedule: the clusters at a level and the tree edges that
/// connect this tier's participants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelTier {
    /// Topology level the tier's clusters live at (1 = site, 2 = machine).
    pub level: usize,
    pub clusters: Vec<Cluster>,
    pub edges: Vec<TreeEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSchedule {
    pub root: usize,
    /// Outer to inner: inter-site, then per-site inter-machine, then
    /// intra-machine tiers.
    pub tiers: Vec<LevelTier>,
}

impl LevelSchedule {
    /// The world rank this rank receives from, if any. The tier union is a
    /// spanning tree, so every non-root rank has exactly one parent.
    pub fn parent_of(&self, rank: usize) -> Option<TreeEdge> {
        self.all_edges().find(|e| e.child == rank)
    }

    /// Edges this rank sends on, outer tier first, tree order within a tier.
    pub fn children_of(&self, rank: usize) -> Vec<TreeEdge> {
        self.all_edges().filter(|e| e.parent == rank).collect()
    }

    pub fn all_edges(&self) -> impl Iterator<Item = TreeEdge> + '_ {
        self.tiers.iter().flat_map(|t| t.edges.iter().copied())
    }

    pub fn edge_count(&self) -> usize {
        self.tiers.iter().map(|t| t.edges.len()).sum()
    }
}

/// Binomial tree edges over a participant list. `participants[root_idx]` is
/// the root; other entries are relabeled relative to it, and each relabeled
/// vertex hangs off the vertex with its lowest set bit cleared. Edges come
/// out in top-down send order (largest subtree first).
pub fn binomial_edges(participants: &[usize], root_idx: usize) -> Vec<(usize, usize)> {
    let n = participants.len();
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut order: Vec<usize> = (1..n).collect();
    // Parents must appear before their children when the tree is walked
    // top-down; relabeled order already guarantees that.
    for v in order.drain(..) {
        let parent = v & (v - 1);
        edges.push((
            participants[(parent + root_idx) % n],
            participants[(v + root_idx) % n],
        ));
    }
    edges
}

fn rep_of(members: &[usize], root: usize) -> usize {
    if members.contains(&root) {
        root
    } else {
        *members.iter().min().expect("cluster cannot be empty")
    }
}

fn binomial_tier(participants: &[usize], root: usize, map: &TopologyMap) -> Vec<TreeEdge> {
    let root_idx = participants.iter().position(|&r| r == root).expect("root not a participant");
    binomial_edges(participants, root_idx)
        .into_iter()
        .map(|(parent, child)| TreeEdge {
            parent,
            child,
            method: select_method(map, parent, child),
        })
        .collect()
}

fn group_by_color(map: &TopologyMap, members: &[usize], level: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<(i32, Vec<usize>)> = Vec::new();
    for &r in members {
        let color = map.colors(r)[level];
        match groups.iter_mut().find(|(c, _)| *c == color) {
            Some((_, g)) => g.push(r),
            None => groups.push((color, vec![r])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

/// Build the multilevel schedule for a collective over `members` rooted at
/// world rank `root`. Members may be any subset of the world; `root` must be
/// a member.
pub fn build_schedule(map: &TopologyMap, members: &[usize], root: usize) -> LevelSchedule {
    debug_assert!(members.contains(&root), "root must be a member");
    let mut sorted: Vec<usize> = members.to_vec();
    sorted.sort_unstable();

    // Tier 0: one representative per site, binomial among them.
    let site_groups = group_by_color(map, &sorted, LEVEL_LOCAL_AREA);
    let site_clusters: Vec<Cluster> = site_groups
        .iter()
        .map(|g| Cluster { members: g.clone(), representative: rep_of(g, root) })
        .collect();
    let site_reps: Vec<usize> = {
        let mut reps: Vec<usize> = site_clusters.iter().map(|c| c.representative).collect();
        reps.sort_unstable();
        reps
    };
    let tier0 = LevelTier {
        level: LEVEL_LOCAL_AREA,
        edges: binomial_tier(&site_reps, root, map),
        clusters: site_clusters.clone(),
    };

    // Tier 1: within each site, one representative per machine.
    let mut machine_clusters = Vec::new();
    let mut tier1_edges = Vec::new();
    let mut machine_groups_all = Vec::new();
    for site in &site_clusters {
        let machine_groups = group_by_color(map, &site.members, LEVEL_SYSTEM_AREA);
        let clusters: Vec<Cluster> = machine_groups
            .iter()
            .map(|g| Cluster { members: g.clone(), representative: rep_of(g, site.representative) })
            .collect();
        let mut reps: Vec<usize> = clusters.iter().map(|c| c.representative).collect();
        reps.sort_unstable();
        tier1_edges.extend(binomial_tier(&reps, site.representative, map));
        machine_clusters.extend(clusters.clone());
        machine_groups_all.extend(clusters);
    }
    let tier1 =
        LevelTier { level: LEVEL_SYSTEM_AREA, edges: tier1_edges, clusters: machine_clusters };

    // Tier 2: all members within each machine.
    let mut tier2_edges = Vec::new();
    for cluster in &machine_groups_all {
        let mut members: Vec<usize> = cluster.members.clone();
        members.sort_unstable();
        tier2_edges.extend(binomial_tier(&members, cluster.representative, map));
    }
    let tier2 =
        LevelTier { level: LEVEL_SYSTEM_AREA + 1, edges: tier2_edges, clusters: machine_groups_all };

    LevelSchedule { root, tiers: vec![tier0, tier1, tier2] }
}

/// The baseline: one binomial tree over communicator ranks relabeled relative
/// to the root, ignoring topology. `members` is in communicator order.
pub fn binomial_schedule(map: &TopologyMap, members: &[usize], root_index: usize) -> LevelSchedule {
    let edges = binomial_edges(members, root_index)
        .into_iter()
        .map(|(parent, child)| TreeEdge {
            parent,
            child,
            method: select_method(map, parent, child),
        })
        .collect();
    LevelSchedule {
        root: members[root_index],
        tiers: vec![LevelTier {
            level: 0,
            clusters: vec![Cluster {
                members: members.to_vec(),
                representative: members[root_index],
            }],
            edges,
        }],
    }
}

/// Per-level message accounting for one collective run.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LevelCounts {
    pub wide_area: u64,
    pub local_area: u64,
    pub system_area: u64,
    pub vendor: u64,
}

impl LevelCounts {
    pub fn add(&mut self, other: &LevelCounts) {
        self.wide_area += other.wide_area;
        self.local_area += other.local_area;
        self.system_area += other.system_area;
        self.vendor += other.vendor;
    }

    pub fn total(&self) -> u64 {
        self.wide_area + self.local_area + self.system_area + self.vendor
    }

    pub fn as_array(&self) -> [u64; 4] {
        [self.wide_area, self.local_area, self.system_area, self.vendor]
    }

    pub fn from_array(a: [u64; 4]) -> LevelCounts {
        LevelCounts { wide_area: a[0], local_area: a[1], system_area: a[2], vendor: a[3] }
    }

    pub fn record(&mut self, map: &TopologyMap, from: usize, to: usize) {
        if !same_color(map, from, to, LEVEL_LOCAL_AREA) {
            self.wide_area += 1;
        } else if !same_color(map, from, to, LEVEL_SYSTEM_AREA) {
            self.local_area += 1;
        } else if select_method(map, from, to) == Method::Vendor {
            self.vendor += 1;
        } else {
            self.system_area += 1;
        }
    }
}

/// Classify every point-to-point message of a run trace by the deepest level
/// its endpoints share.
pub fn count_level_messages(map: &TopologyMap, edges: &[(usize, usize)]) -> LevelCounts {
    let mut counts = LevelCounts::default();
    for &(from, to) in edges {
        counts.record(map, from, to);
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{compute_topology, example_grid_layout, JobLayout, SubjobSpec};

    fn grid_map() -> TopologyMap {
        compute_topology(&example_grid_layout()).unwrap()
    }

    #[test]
    fn binomial_eight_ranks_matches_classic_construction() {
        let participants: Vec<usize> = (0..8).collect();
        let edges = binomial_edges(&participants, 0);
        let expected: Vec<(usize, usize)> =
            vec![(0, 1), (0, 2), (2, 3), (0, 4), (4, 5), (4, 6), (6, 7)];
        assert_eq!(edges.len(), 7);
        for e in &expected {
            assert!(edges.contains(e), "missing edge {e:?}");
        }
        // log2(8) = 3 rounds: deepest chain is root -> 4 -> 6 -> 7.
    }

    #[test]
    fn binomial_two_ranks_single_message() {
        assert_eq!(binomial_edges(&[5, 9], 0), vec![(5, 9)]);
    }

    #[test]
    fn binomial_edge_count_is_n_minus_1() {
        for n in 1..20 {
            let p: Vec<usize> = (0..n).collect();
            for root in 0..n {
                assert_eq!(binomial_edges(&p, root).len(), n - 1);
            }
        }
    }

    #[test]
    fn schedule_on_example_grid_root0() {
        let map = grid_map();
        let members: Vec<usize> = (0..12).collect();
        let sched = build_schedule(&map, &members, 0);

        // Site representatives are 0 (root's site) and 4 (smallest at B).
        let reps: Vec<usize> = sched.tiers[0].clusters.iter().map(|c| c.representative).collect();
        assert_eq!(reps, vec![0, 4]);
        assert_eq!(sched.tiers[0].edges, vec![TreeEdge { parent: 0, child: 4, method: Method::Tcp }]);

        // Within site B the machine representatives are 4 and 8.
        assert!(sched.tiers[1]
            .edges
            .contains(&TreeEdge { parent: 4, child: 8, method: Method::Tcp }));
        assert_eq!(sched.tiers[1].edges.len(), 1);

        // Intra-machine binomial trees over {0..3} (vendor), {4..7}, {8..11}.
        assert_eq!(sched.tiers[2].edges.len(), 9);
        let vendor_edges: Vec<_> =
            sched.tiers[2].edges.iter().filter(|e| e.method == Method::Vendor).collect();
        assert_eq!(vendor_edges.len(), 3);
        assert!(vendor_edges.iter().all(|e| e.parent < 4 && e.child < 4));

        // The union is a spanning tree: 11 edges, every non-root has one parent.
        assert_eq!(sched.edge_count(), 11);
        for r in 1..12 {
            assert_eq!(sched.all_edges().filter(|e| e.child == r).count(), 1);
        }
        assert!(sched.parent_of(0).is_none());
    }

    #[test]
    fn schedule_root5_representative_rule() {
        let map = grid_map();
        let members: Vec<usize> = (0..12).collect();
        let sched = build_schedule(&map, &members, 5);
        let mut reps: Vec<usize> =
            sched.tiers[0].clusters.iter().map(|c| c.representative).collect();
        reps.sort_unstable();
        // Site B holds the root, so its representative is 5; site A gets its
        // smallest rank.
        assert_eq!(reps, vec![0, 5]);
        assert_eq!(sched.edge_count(), 11);
    }

    #[test]
    fn schedule_single_machine_degenerate() {
        let layout = JobLayout::new(vec![SubjobSpec::new("A", "M", 4, false)]);
        let map = compute_topology(&layout).unwrap();
        let sched = build_schedule(&map, &[0, 1, 2, 3], 2);
        assert!(sched.tiers[0].edges.is_empty());
        assert!(sched.tiers[1].edges.is_empty());
        assert_eq!(sched.tiers[2].edges.len(), 3);
        assert!(sched.all_edges().all(|e| e.parent == 2 || sched.parent_of(e.parent).is_some()));
    }

    #[test]
    fn level_counts_multilevel_vs_binomial_on_example_grid() {
        let map = grid_map();
        let members: Vec<usize> = (0..12).collect();

        let multilevel = build_schedule(&map, &members, 0);
        let edges: Vec<(usize, usize)> =
            multilevel.all_edges().map(|e| (e.parent, e.child)).collect();
        let counts = count_level_messages(&map, &edges);
        assert_eq!(
            counts,
            LevelCounts { wide_area: 1, local_area: 1, system_area: 6, vendor: 3 }
        );

        let binomial = binomial_schedule(&map, &members, 0);
        let edges: Vec<(usize, usize)> = binomial.all_edges().map(|e| (e.parent, e.child)).collect();
        let counts = count_level_messages(&map, &edges);
        // The rank-ordered binomial tree crosses the site boundary twice,
        // via 0->4 and 0->8.
        assert_eq!(counts.wide_area, 2);
        assert_eq!(counts.total(), 11);
    }

    #[test]
    fn multilevel_wide_area_is_sites_minus_one() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(0x57a7);
        for _ in 0..60 {
            let nsites = rng.gen_range(1..=4);
            let mut subjobs = Vec::new();
            for s in 0..nsites {
                for m in 0..rng.gen_range(1..=2) {
                    subjobs.push(SubjobSpec::new(
                        &format!("S{s}"),
                        &format!("S{s}M{m}"),
                        rng.gen_range(1..=3),
                        rng.gen_bool(0.4),
                    ));
                }
            }
            let layout = JobLayout::new(subjobs);
            let map = compute_topology(&layout).unwrap();
            let members: Vec<usize> = (0..map.world_size()).collect();
            let root = members[rng.gen_range(0..members.len())];
            let sched = build_schedule(&map, &members, root);
            let edges: Vec<(usize, usize)> = sched.all_edges().map(|e| (e.parent, e.child)).collect();
            let counts = count_level_messages(&map, &edges);
            assert_eq!(counts.wide_area as usize, nsites - 1);
            assert_eq!(counts.total() as usize, map.world_size() - 1);
        }
    }
}
