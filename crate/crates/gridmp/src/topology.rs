//! Multilevel clustering of world ranks into depths and colors.
//!
//! Every process is assigned a topology depth (3 for TCP-only processes,
//! 4 for processes that can also use the vendor channel) and one color per
//! level. Equal colors at a level mean the two processes can talk to each
//! other at that network level. Levels are fixed:
//!
//! * level 0 — wide area (always a single color)
//! * level 1 — local area (one color per site)
//! * level 2 — system area (one color per machine)
//! * level 3 — vendor channel (one color per vendor-capable subjob)

use crate::error::{Error, Result};

pub const LEVEL_WIDE_AREA: usize = 0;
pub const LEVEL_LOCAL_AREA: usize = 1;
pub const LEVEL_SYSTEM_AREA: usize = 2;
pub const LEVEL_VENDOR: usize = 3;

/// One unit of the job: `count` processes on one machine of one site,
/// optionally wired together by the vendor channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjobSpec {
    pub site_id: String,
    pub machine_id: String,
    pub count: usize,
    pub vendor: bool,
}

impl SubjobSpec {
    pub fn new(site: &str, machine: &str, count: usize, vendor: bool) -> SubjobSpec {
        SubjobSpec {
            site_id: site.to_string(),
            machine_id: machine.to_string(),
            count,
            vendor,
        }
    }
}

/// Ordered subjobs; world ranks are assigned contiguously in subjob order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobLayout {
    pub subjobs: Vec<SubjobSpec>,
}

impl JobLayout {
    pub fn new(subjobs: Vec<SubjobSpec>) -> JobLayout {
        JobLayout { subjobs }
    }

    pub fn world_size(&self) -> usize {
        self.subjobs.iter().map(|s| s.count).sum()
    }

    /// Index of the subjob that owns a world rank.
    pub fn subjob_of_rank(&self, rank: usize) -> Option<usize> {
        let mut base = 0;
        for (j, s) in self.subjobs.iter().enumerate() {
            if rank < base + s.count {
                return Some(j);
            }
            base += s.count;
        }
        None
    }

    /// First world rank of a subjob.
    pub fn base_rank(&self, subjob: usize) -> usize {
        self.subjobs[..subjob].iter().map(|s| s.count).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.subjobs.is_empty() {
            return Err(Error::InvalidLayout("no subjobs".into()));
        }
        let mut machine_site: Vec<(&str, &str)> = Vec::new();
        for (j, s) in self.subjobs.iter().enumerate() {
            if s.count == 0 {
                return Err(Error::InvalidLayout(format!("subjob {j} has count 0")));
            }
            if s.site_id.is_empty() || s.machine_id.is_empty() {
                return Err(Error::InvalidLayout(format!(
                    "subjob {j} has an empty site or machine id"
                )));
            }
            match machine_site.iter().find(|(m, _)| *m == s.machine_id) {
                Some((_, site)) if *site != s.site_id => {
                    return Err(Error::InvalidLayout(format!(
                        "machine {} appears under sites {} and {}",
                        s.machine_id, site, s.site_id
                    )));
                }
                Some(_) => {}
                None => machine_site.push((&s.machine_id, &s.site_id)),
            }
        }
        Ok(())
    }
}

/// Per-rank depths and per-level color vectors for a whole job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyMap {
    depths: Vec<usize>,
    colors: Vec<Vec<i32>>,
}

impl TopologyMap {
    pub fn world_size(&self) -> usize {
        self.depths.len()
    }

    pub fn depth(&self, rank: usize) -> usize {
        self.depths[rank]
    }

    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    /// Color vector of one rank; length equals `depth(rank)`.
    pub fn colors(&self, rank: usize) -> &[i32] {
        &self.colors[rank]
    }

    /// Single-rank map used by the no-launcher fallback.
    pub fn singleton() -> TopologyMap {
        TopologyMap { depths: vec![3], colors: vec![vec![0, 0, 0]] }
    }

    /// Canonical text form: one line per rank, `rank depth c0 c1 c2 [c3]`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in 0..self.world_size() {
            out.push_str(&r.to_string());
            out.push(' ');
            out.push_str(&self.depths[r].to_string());
            for c in &self.colors[r] {
                out.push(' ');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<TopologyMap> {
        let mut depths = Vec::new();
        let mut colors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Protocol {
                peer: 0,
                detail: format!("bad topology line {}: {line:?}", i + 1),
            };
            if fields.len() < 2 {
                return Err(bad());
            }
            let rank: usize = fields[0].parse().map_err(|_| bad())?;
            let depth: usize = fields[1].parse().map_err(|_| bad())?;
            if rank != i || !(3..=4).contains(&depth) || fields.len() != 2 + depth {
                return Err(bad());
            }
            let mut cv = Vec::with_capacity(depth);
            for f in &fields[2..] {
                cv.push(f.parse().map_err(|_| bad())?);
            }
            depths.push(depth);
            colors.push(cv);
        }
        if depths.is_empty() {
            return Err(Error::Protocol { peer: 0, detail: "empty topology table".into() });
        }
        Ok(TopologyMap { depths, colors })
    }
}

/// Compute the multilevel clustering of all world ranks from the job layout.
///
/// Colors at each level are consecutive integers starting at 0, numbered by
/// first appearance in ascending world-rank order. Level 0 is always a single
/// wide-area color.
pub fn compute_topology(layout: &JobLayout) -> Result<TopologyMap> {
    layout.validate()?;

    // First-appearance color tables keyed by site, (site, machine), and
    // vendor subjob index.
    let mut site_colors: Vec<&str> = Vec::new();
    let mut machine_colors: Vec<(&str, &str)> = Vec::new();
    let mut vendor_colors: Vec<usize> = Vec::new();

    let mut depths = Vec::with_capacity(layout.world_size());
    let mut colors = Vec::with_capacity(layout.world_size());

    for (j, s) in layout.subjobs.iter().enumerate() {
        let site = color_of(&mut site_colors, s.site_id.as_str());
        let machine =
            color_of(&mut machine_colors, (s.site_id.as_str(), s.machine_id.as_str()));
        let vendor = s.vendor.then(|| color_of(&mut vendor_colors, j));
        for _ in 0..s.count {
            let mut cv = vec![0, site, machine];
            if let Some(v) = vendor {
                cv.push(v);
            }
            depths.push(if s.vendor { 4 } else { 3 });
            colors.push(cv);
        }
    }

    Ok(TopologyMap { depths, colors })
}

fn color_of<K: PartialEq>(table: &mut Vec<K>, key: K) -> i32 {
    match table.iter().position(|k| *k == key) {
        Some(i) => i as i32,
        None => {
            table.push(key);
            (table.len() - 1) as i32
        }
    }
}

/// True iff both ranks have a color at `level` and the colors are equal.
///
/// Panics if either rank is out of range (usage error).
pub fn same_color(map: &TopologyMap, r: usize, s: usize, level: usize) -> bool {
    assert!(r < map.world_size() && s < map.world_size(), "rank out of range");
    map.depth(r) > level && map.depth(s) > level && map.colors(r)[level] == map.colors(s)[level]
}

/// The equivalence classes of `same_color` at one level. Ranks whose depth
/// does not reach the level are reported separately as unclustered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelClusters {
    /// One member list per color, ordered by color; members ascend.
    pub clusters: Vec<Vec<usize>>,
    /// Ranks with depth <= level, ascending.
    pub unclustered: Vec<usize>,
}

pub fn clusters_at_level(map: &TopologyMap, level: usize) -> LevelClusters {
    let mut clusters: Vec<(i32, Vec<usize>)> = Vec::new();
    let mut unclustered = Vec::new();
    for r in 0..map.world_size() {
        if map.depth(r) <= level {
            unclustered.push(r);
            continue;
        }
        let color = map.colors(r)[level];
        match clusters.iter_mut().find(|(c, _)| *c == color) {
            Some((_, members)) => members.push(r),
            None => clusters.push((color, vec![r])),
        }
    }
    clusters.sort_by_key(|(c, _)| *c);
    LevelClusters { clusters: clusters.into_iter().map(|(_, m)| m).collect(), unclustered }
}

/// The 12-process example layout: 4 vendor-capable ranks on one machine at
/// site A, 8 TCP ranks split across two machines at site B.
pub fn example_grid_layout() -> JobLayout {
    JobLayout::new(vec![
        SubjobSpec::new("A", "SP", 4, true),
        SubjobSpec::new("B", "C1", 4, false),
        SubjobSpec::new("B", "C2", 4, false),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn example_grid_depths_and_colors() {
        let map = compute_topology(&example_grid_layout()).unwrap();
        assert_eq!(map.world_size(), 12);
        assert_eq!(map.depths(), &[4, 4, 4, 4, 3, 3, 3, 3, 3, 3, 3, 3]);
        for r in 0..4 {
            assert_eq!(map.colors(r), &[0, 0, 0, 0]);
        }
        for r in 4..8 {
            assert_eq!(map.colors(r), &[0, 1, 1]);
        }
        for r in 8..12 {
            assert_eq!(map.colors(r), &[0, 1, 2]);
        }
    }

    #[test]
    fn single_process_layout() {
        let map =
            compute_topology(&JobLayout::new(vec![SubjobSpec::new("A", "M", 1, true)])).unwrap();
        assert_eq!(map.depths(), &[4]);
        assert_eq!(map.colors(0), &[0, 0, 0, 0]);
    }

    #[test]
    fn two_machines_one_site_second_vendor() {
        // Hand-applied level rules, cross-checked below by brute force.
        let layout = JobLayout::new(vec![
            SubjobSpec::new("A", "M1", 2, false),
            SubjobSpec::new("A", "M2", 2, true),
        ]);
        let map = compute_topology(&layout).unwrap();
        assert_eq!(map.depths(), &[3, 3, 4, 4]);
        assert_eq!(map.colors(0), &[0, 0, 0]);
        assert_eq!(map.colors(1), &[0, 0, 0]);
        assert_eq!(map.colors(2), &[0, 0, 1, 0]);
        assert_eq!(map.colors(3), &[0, 0, 1, 0]);
        check_against_brute_force(&layout, &map);
    }

    #[test]
    fn rejects_machine_under_two_sites() {
        let layout = JobLayout::new(vec![
            SubjobSpec::new("A", "M", 1, false),
            SubjobSpec::new("B", "M", 1, false),
        ]);
        assert!(matches!(compute_topology(&layout), Err(Error::InvalidLayout(_))));
    }

    #[test]
    fn rejects_zero_count() {
        let layout = JobLayout::new(vec![SubjobSpec::new("A", "M", 0, false)]);
        assert!(matches!(compute_topology(&layout), Err(Error::InvalidLayout(_))));
    }

    #[test]
    fn rejects_empty_layout() {
        assert!(compute_topology(&JobLayout::new(vec![])).is_err());
    }

    #[test]
    fn same_color_example_grid() {
        let map = compute_topology(&example_grid_layout()).unwrap();
        assert!(same_color(&map, 4, 8, LEVEL_LOCAL_AREA));
        assert!(!same_color(&map, 4, 8, LEVEL_SYSTEM_AREA));
        // Reflexivity at every level below the rank's depth.
        for r in 0..12 {
            for level in 0..map.depth(r) {
                assert!(same_color(&map, r, r, level));
            }
        }
        // Depth-3 ranks have no vendor color at all.
        assert!(!same_color(&map, 4, 4, LEVEL_VENDOR));
    }

    #[test]
    fn clusters_example_grid() {
        let map = compute_topology(&example_grid_layout()).unwrap();
        let l2 = clusters_at_level(&map, LEVEL_SYSTEM_AREA);
        assert_eq!(l2.clusters, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9, 10, 11]]);
        assert!(l2.unclustered.is_empty());

        let l3 = clusters_at_level(&map, LEVEL_VENDOR);
        assert_eq!(l3.clusters, vec![vec![0, 1, 2, 3]]);
        assert_eq!(l3.unclustered, (4..12).collect::<Vec<_>>());
    }

    #[test]
    fn clusters_single_rank() {
        let map = TopologyMap::singleton();
        let l0 = clusters_at_level(&map, LEVEL_WIDE_AREA);
        assert_eq!(l0.clusters, vec![vec![0]]);
    }

    #[test]
    fn text_roundtrip() {
        let map = compute_topology(&example_grid_layout()).unwrap();
        let text = map.to_text();
        assert!(text.starts_with("0 4 0 0 0 0\n"));
        assert!(text.ends_with("11 3 0 1 2\n"));
        assert_eq!(TopologyMap::from_text(&text).unwrap(), map);
    }

    #[test]
    fn from_text_rejects_garbage() {
        assert!(TopologyMap::from_text("").is_err());
        assert!(TopologyMap::from_text("0 5 0 0 0 0 0\n").is_err());
        assert!(TopologyMap::from_text("1 3 0 0 0\n").is_err());
        assert!(TopologyMap::from_text("0 4 0 0 0\n").is_err());
    }

    #[test]
    fn determinism() {
        let layout = example_grid_layout();
        assert_eq!(compute_topology(&layout).unwrap(), compute_topology(&layout).unwrap());
    }

    fn random_layout(rng: &mut StdRng, max_ranks: usize) -> JobLayout {
        let sites = ["S0", "S1", "S2", "S3"];
        let mut subjobs = Vec::new();
        let mut total = 0;
        let nsub = rng.gen_range(1..=6);
        for j in 0..nsub {
            if total >= max_ranks {
                break;
            }
            let site = sites[rng.gen_range(0..sites.len())];
            // One of a few machines per site; machine ids embed the site so a
            // machine never appears under two sites.
            let machine = format!("{site}-m{}", rng.gen_range(0..3));
            let count = rng.gen_range(1..=4.min(max_ranks - total));
            subjobs.push(SubjobSpec {
                site_id: site.to_string(),
                machine_id: machine,
                count,
                vendor: rng.gen_bool(0.5),
            });
            total += count;
            let _ = j;
        }
        JobLayout::new(subjobs)
    }

    /// Independent partitioner: groups ranks directly by (site),
    /// (site, machine), and vendor subjob, ignoring the color mechanism.
    fn check_against_brute_force(layout: &JobLayout, map: &TopologyMap) {
        let n = layout.world_size();
        let key = |rank: usize| {
            let j = layout.subjob_of_rank(rank).unwrap();
            let s = &layout.subjobs[j];
            (s.site_id.clone(), s.machine_id.clone(), s.vendor, j)
        };
        for r in 0..n {
            let (site_r, mach_r, vendor_r, j_r) = key(r);
            assert_eq!(map.depth(r), if vendor_r { 4 } else { 3 });
            for s in 0..n {
                let (site_s, mach_s, vendor_s, j_s) = key(s);
                assert!(same_color(map, r, s, 0));
                assert_eq!(same_color(map, r, s, 1), site_r == site_s);
                assert_eq!(
                    same_color(map, r, s, 2),
                    site_r == site_s && mach_r == mach_s
                );
                assert_eq!(same_color(map, r, s, 3), vendor_r && vendor_s && j_r == j_s);
            }
        }
    }

    #[test]
    fn random_layouts_match_brute_force_partitioner() {
        let mut rng = StdRng::seed_from_u64(0x5eed_7090);
        for _ in 0..200 {
            let layout = random_layout(&mut rng, 64);
            let map = compute_topology(&layout).unwrap();
            check_against_brute_force(&layout, &map);
        }
    }

    #[test]
    fn nesting_and_numbering_properties() {
        let mut rng = StdRng::seed_from_u64(0xc01a_b0a7);
        for _ in 0..200 {
            let layout = random_layout(&mut rng, 64);
            let map = compute_topology(&layout).unwrap();
            let n = map.world_size();
            // Nesting: equal colors at level k imply equal colors at k-1.
            for r in 0..n {
                for s in 0..n {
                    for k in 1..4 {
                        if same_color(&map, r, s, k) {
                            assert!(same_color(&map, r, s, k - 1));
                        }
                    }
                }
            }
            // Consecutive color numbering by first appearance.
            for level in 0..4 {
                let mut seen: Vec<i32> = Vec::new();
                for r in 0..n {
                    if map.depth(r) > level {
                        let c = map.colors(r)[level];
                        if !seen.contains(&c) {
                            assert_eq!(c, seen.len() as i32);
                            seen.push(c);
                        }
                    }
                }
            }
            assert!((0..n).all(|r| map.colors(r)[0] == 0));
        }
    }
}
