//! Poll-avoidance behavior of the progress engine: vendor-only workloads
//! must never touch TCP, TCP-only workloads must never probe the vendor
//! method, and mixed wildcard receives poll both.

use gridmp::harness::run_local_job;
use gridmp::{JobLayout, RecvSource, RecvTag, SubjobSpec, WORLD};

/// Ranks 0 and 1 share a vendor channel; rank 2 is TCP-only elsewhere.
fn mixed_layout() -> JobLayout {
    JobLayout::new(vec![
        SubjobSpec::new("A", "M0", 2, true),
        SubjobSpec::new("B", "M1", 1, false),
    ])
}

#[test]
fn all_vendor_workload_never_polls_tcp() {
    let layout = JobLayout::new(vec![SubjobSpec::new("A", "M", 2, true)]);
    let counters = run_local_job(&layout, |mut rt| {
        let me = rt.rank();
        let peer = 1 - me;
        rt.reset_poll_counters();
        for i in 0..200i32 {
            if me == 0 {
                rt.send(&[i], peer, 1, WORLD).unwrap();
                let mut buf = [0i32; 1];
                rt.recv(&mut buf, RecvSource::Rank(peer), RecvTag::Tag(1), WORLD).unwrap();
            } else {
                let mut buf = [0i32; 1];
                rt.recv(&mut buf, RecvSource::Rank(peer), RecvTag::Tag(1), WORLD).unwrap();
                rt.send(&[i], peer, 1, WORLD).unwrap();
            }
        }
        rt.poll_counters()
    })
    .unwrap();
    for (rank, c) in counters.iter().enumerate() {
        assert_eq!(c.tcp_polls, 0, "rank {rank} polled TCP {} times", c.tcp_polls);
    }
}

#[test]
fn pure_tcp_workload_never_probes_vendor() {
    let layout = JobLayout::new(vec![
        SubjobSpec::new("A", "M1", 1, false),
        SubjobSpec::new("B", "M2", 1, false),
    ]);
    let counters = run_local_job(&layout, |mut rt| {
        let me = rt.rank();
        let peer = 1 - me;
        rt.reset_poll_counters();
        for i in 0..100i32 {
            if me == 0 {
                rt.send(&[i], peer, 1, WORLD).unwrap();
                let mut buf = [0i32; 1];
                rt.recv(&mut buf, RecvSource::Rank(peer), RecvTag::Tag(1), WORLD).unwrap();
            } else {
                let mut buf = [0i32; 1];
                rt.recv(&mut buf, RecvSource::Rank(peer), RecvTag::Tag(1), WORLD).unwrap();
                rt.send(&[i], peer, 1, WORLD).unwrap();
            }
        }
        rt.poll_counters()
    })
    .unwrap();
    for (rank, c) in counters.iter().enumerate() {
        assert_eq!(c.vendor_probes, 0, "rank {rank} probed the vendor method");
        assert!(c.tcp_polls > 0, "rank {rank} must have blocked on TCP");
    }
}

#[test]
fn any_source_over_mixed_world_polls_both() {
    let counters = run_local_job(&mixed_layout(), |mut rt| {
        let me = rt.rank();
        match me {
            0 => {
                // Establish the TCP channel first so both methods are live.
                let mut ready = [0i32; 1];
                rt.recv(&mut ready, RecvSource::Rank(2), RecvTag::Tag(0), WORLD).unwrap();
                rt.reset_poll_counters();
                for _ in 0..50 {
                    let mut buf = [0i32; 1];
                    rt.recv(&mut buf, RecvSource::Any, RecvTag::Tag(1), WORLD).unwrap();
                }
                let c = rt.poll_counters();
                rt.send(&[0i32], 1, 2, WORLD).unwrap();
                rt.send(&[0i32], 2, 2, WORLD).unwrap();
                c
            }
            1 => {
                for i in 0..50i32 {
                    rt.send(&[i], 0, 1, WORLD).unwrap();
                }
                let mut buf = [0i32; 1];
                rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(2), WORLD).unwrap();
                rt.poll_counters()
            }
            _ => {
                rt.send(&[0i32], 0, 0, WORLD).unwrap();
                let mut buf = [0i32; 1];
                rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(2), WORLD).unwrap();
                rt.poll_counters()
            }
        }
    })
    .unwrap();
    let c0 = counters[0];
    assert!(c0.vendor_probes > 0, "AnySource at a vendor-capable rank must probe vendor");
    assert!(c0.tcp_polls > 0, "AnySource over a mixed world must poll TCP");
}

#[test]
fn specified_pending_stays_vendor_only() {
    let counters = run_local_job(&mixed_layout(), |mut rt| {
        let me = rt.rank();
        match me {
            0 => {
                // One incomplete receive from a same-machine source keeps
                // the executing receive in the vendor-probing category.
                let pending =
                    rt.irecv::<i32>(1, RecvSource::Rank(1), RecvTag::Tag(99), WORLD).unwrap();
                rt.reset_poll_counters();
                for _ in 0..100 {
                    let mut buf = [0i32; 1];
                    rt.recv(&mut buf, RecvSource::Rank(1), RecvTag::Tag(1), WORLD).unwrap();
                }
                let c = rt.poll_counters();
                assert_eq!(c.tcp_polls, 0, "specified-pending must not poll TCP");
                assert!(c.vendor_probes > 0, "specified-pending probes the vendor method");
                rt.send(&[0i32], 1, 2, WORLD).unwrap();
                let (_, _) = rt.wait_recv::<i32>(pending).unwrap();
                c
            }
            1 => {
                for i in 0..100i32 {
                    rt.send(&[i], 0, 1, WORLD).unwrap();
                }
                let mut buf = [0i32; 1];
                rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(2), WORLD).unwrap();
                rt.send(&[7i32], 0, 99, WORLD).unwrap();
                rt.poll_counters()
            }
            _ => rt.poll_counters(),
        }
    })
    .unwrap();
    assert_eq!(counters[0].tcp_polls, 0);
}

/// A plain specified receive delegates to a blocking read: no probe rounds
/// of either flavor are recorded at all.
#[test]
fn specified_receive_records_no_polling() {
    let counters = run_local_job(&mixed_layout(), |mut rt| {
        let me = rt.rank();
        match me {
            0 => {
                rt.reset_poll_counters();
                for _ in 0..100 {
                    let mut buf = [0i32; 1];
                    rt.recv(&mut buf, RecvSource::Rank(1), RecvTag::Tag(1), WORLD).unwrap();
                }
                rt.poll_counters()
            }
            1 => {
                for i in 0..100i32 {
                    rt.send(&[i], 0, 1, WORLD).unwrap();
                }
                rt.poll_counters()
            }
            _ => rt.poll_counters(),
        }
    })
    .unwrap();
    assert_eq!(counters[0].tcp_polls, 0);
    assert_eq!(counters[0].vendor_probes, 0, "specified receives block instead of probing");
}
