//! Collective operations over live local jobs: value correctness against
//! sequential oracles, per-level message accounting, and barrier semantics.

use gridmp::harness::run_local_job;
use gridmp::{
    example_grid_layout, monotonic_ns, CollAlgo, JobLayout, LevelCounts, ReduceOp, SubjobSpec,
    WORLD,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn sum_counts(counts: &[LevelCounts]) -> LevelCounts {
    let mut total = LevelCounts::default();
    for c in counts {
        total.add(c);
    }
    total
}

#[test]
fn multilevel_bcast_counts_on_example_grid() {
    let per_rank = run_local_job(&example_grid_layout(), |mut rt| {
        let mut buf = [if rt.rank() == 0 { [7i32, 7, 7] } else { [0; 3] }][0];
        rt.bcast_with(CollAlgo::Multilevel, &mut buf, 0, WORLD).unwrap();
        assert_eq!(buf, [7, 7, 7]);
        rt.last_coll_counts()
    })
    .unwrap();
    let total = sum_counts(&per_rank);
    assert_eq!(
        total,
        LevelCounts { wide_area: 1, local_area: 1, system_area: 6, vendor: 3 }
    );
}

#[test]
fn binomial_bcast_counts_on_example_grid() {
    let per_rank = run_local_job(&example_grid_layout(), |mut rt| {
        let mut buf = [if rt.rank() == 0 { 13i64 } else { 0 }];
        rt.bcast_with(CollAlgo::Binomial, &mut buf, 0, WORLD).unwrap();
        assert_eq!(buf[0], 13);
        rt.last_coll_counts()
    })
    .unwrap();
    let total = sum_counts(&per_rank);
    assert_eq!(total.wide_area, 2, "rank-ordered binomial crosses the site boundary twice");
    assert_eq!(total.total(), 11);
}

#[test]
fn counts_are_independent_of_message_size() {
    for size in [8usize, 65536] {
        let per_rank = run_local_job(&example_grid_layout(), |mut rt| {
            let mut buf = vec![rt.rank() as u8; size];
            if rt.rank() != 0 {
                buf.fill(0);
            }
            rt.bcast_with(CollAlgo::Multilevel, &mut buf, 0, WORLD).unwrap();
            rt.last_coll_counts()
        })
        .unwrap();
        assert_eq!(
            sum_counts(&per_rank),
            LevelCounts { wide_area: 1, local_area: 1, system_area: 6, vendor: 3 }
        );
    }
}

#[test]
fn size_one_communicator_sends_nothing() {
    let layout = JobLayout::new(vec![SubjobSpec::new("A", "M", 1, false)]);
    let per_rank = run_local_job(&layout, |mut rt| {
        let mut buf = [1i32; 4];
        rt.bcast(&mut buf, 0, WORLD).unwrap();
        rt.last_coll_counts()
    })
    .unwrap();
    assert_eq!(sum_counts(&per_rank).total(), 0);
}

#[test]
fn reduce_sum_of_world_ranks() {
    let results = run_local_job(&example_grid_layout(), |mut rt| {
        let contribution = [rt.rank() as i32];
        rt.reduce(&contribution, ReduceOp::Sum, 0, WORLD).unwrap()
    })
    .unwrap();
    assert_eq!(results[0], Some(vec![66])); // 0 + 1 + ... + 11
    assert!(results[1..].iter().all(|r| r.is_none()));
}

#[test]
fn reduce_max_and_min() {
    let layout = JobLayout::new(vec![SubjobSpec::new("A", "M", 3, false)]);
    let vals = [3i64, 9, 1];
    let results = run_local_job(&layout, |mut rt| {
        let v = [vals[rt.rank()]];
        let mx = rt.reduce(&v, ReduceOp::Max, 0, WORLD).unwrap();
        let mn = rt.reduce(&v, ReduceOp::Min, 0, WORLD).unwrap();
        (mx, mn)
    })
    .unwrap();
    assert_eq!(results[0].0, Some(vec![9]));
    assert_eq!(results[0].1, Some(vec![1]));
}

#[test]
fn reduce_on_bytes_is_a_usage_error() {
    let layout = JobLayout::new(vec![SubjobSpec::new("A", "M", 1, false)]);
    run_local_job(&layout, |mut rt| {
        let err = rt.reduce(&[1u8, 2], ReduceOp::Sum, 0, WORLD).unwrap_err();
        assert!(matches!(err, gridmp::Error::Usage(_)));
    })
    .unwrap();
}

fn random_layout(rng: &mut StdRng, max_ranks: usize) -> JobLayout {
    let nsites = rng.gen_range(1..=3);
    let mut subjobs = Vec::new();
    let mut total = 0;
    for s in 0..nsites {
        for m in 0..rng.gen_range(1..=2usize) {
            if total >= max_ranks {
                break;
            }
            let count = rng.gen_range(1..=3).min(max_ranks - total);
            total += count;
            subjobs.push(SubjobSpec::new(
                &format!("S{s}"),
                &format!("S{s}M{m}"),
                count,
                rng.gen_bool(0.5),
            ));
        }
    }
    JobLayout::new(subjobs)
}

/// Both algorithms must deliver bitwise-identical buffers at every rank, and
/// the reduction must match a sequential fold.
#[test]
fn randomized_collective_equivalence_and_reduction_oracle() {
    let mut rng = StdRng::seed_from_u64(0xc0ffee);
    for _ in 0..25 {
        let layout = random_layout(&mut rng, 10);
        let n = layout.world_size();
        let root = rng.gen_range(0..n);
        let len = rng.gen_range(0..40usize);
        let payload: Vec<f64> = (0..len).map(|_| rng.gen_range(-1e6..1e6)).collect();
        let contribs: Vec<Vec<f64>> =
            (0..n).map(|_| (0..len).map(|_| rng.gen_range(-1e3..1e3)).collect()).collect();

        // Sequential fold oracle in ascending rank order.
        let mut expect_sum = vec![0f64; len];
        for c in &contribs {
            for (a, b) in expect_sum.iter_mut().zip(c) {
                *a += b;
            }
        }

        let payload2 = payload.clone();
        let contribs2 = contribs.clone();
        let results = run_local_job(&layout, move |mut rt| {
            let me = rt.rank();
            let mut multi = if me == root { payload2.clone() } else { vec![0f64; len] };
            rt.bcast_with(CollAlgo::Multilevel, &mut multi, root, WORLD).unwrap();
            let mut bino = if me == root { payload2.clone() } else { vec![0f64; len] };
            rt.bcast_with(CollAlgo::Binomial, &mut bino, root, WORLD).unwrap();
            let reduced = rt.reduce(&contribs2[me], ReduceOp::Sum, root, WORLD).unwrap();
            (multi, bino, reduced)
        })
        .unwrap();

        for (me, (multi, bino, reduced)) in results.into_iter().enumerate() {
            assert_eq!(multi, payload, "multilevel bcast corrupted data at rank {me}");
            assert_eq!(bino, payload, "binomial bcast corrupted data at rank {me}");
            match reduced {
                Some(got) if me == root => {
                    for (g, e) in got.iter().zip(&expect_sum) {
                        let tol = 1e-12 * e.abs().max(1.0);
                        assert!((g - e).abs() <= tol, "sum {g} differs from oracle {e}");
                    }
                }
                None if me != root => {}
                other => panic!("rank {me} returned unexpected reduction {other:?}"),
            }
        }
    }
}

/// Reductions must be bitwise deterministic for a fixed layout.
#[test]
fn float_reduction_is_deterministic_run_to_run() {
    let layout = example_grid_layout();
    let contribs: Vec<f64> = (0..12).map(|r| (r as f64) * 0.1 + 1e-9).collect();
    let mut first: Option<Vec<f64>> = None;
    for _ in 0..3 {
        let contribs = contribs.clone();
        let results = run_local_job(&layout, move |mut rt| {
            let v = [contribs[rt.rank()]];
            rt.reduce(&v, ReduceOp::Sum, 0, WORLD).unwrap()
        })
        .unwrap();
        let got = results[0].clone().unwrap();
        match &first {
            None => first = Some(got),
            Some(f) => assert_eq!(
                f.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                got.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            ),
        }
    }
}

#[test]
fn barrier_holds_until_everyone_arrives() {
    let layout = example_grid_layout();
    let results = run_local_job(&layout, |mut rt| {
        // Staggered arrivals.
        std::thread::sleep(std::time::Duration::from_millis((rt.rank() as u64 % 4) * 40));
        let entered = monotonic_ns();
        rt.barrier(WORLD).unwrap();
        let exited = monotonic_ns();
        (entered, exited)
    })
    .unwrap();
    let latest_entry = results.iter().map(|(e, _)| *e).max().unwrap();
    for (rank, (_, exited)) in results.iter().enumerate() {
        assert!(
            *exited >= latest_entry,
            "rank {rank} left the barrier before the last entry"
        );
    }
}

#[test]
fn repeated_barriers_do_not_deadlock() {
    let layout = JobLayout::new(vec![
        SubjobSpec::new("A", "M1", 2, true),
        SubjobSpec::new("A", "M2", 2, false),
    ]);
    run_local_job(&layout, |mut rt| {
        for _ in 0..100 {
            rt.barrier(WORLD).unwrap();
        }
    })
    .unwrap();
}
