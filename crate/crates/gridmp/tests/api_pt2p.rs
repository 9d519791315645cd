//! Point-to-point semantics over fully bootstrapped local jobs.

use gridmp::harness::run_local_job;
use gridmp::{
    example_grid_layout, JobLayout, RecvSource, RecvTag, RecvTest, SubjobSpec, WORLD,
};

/// Two vendor ranks on one machine plus one TCP rank elsewhere.
fn mixed_layout() -> JobLayout {
    JobLayout::new(vec![
        SubjobSpec::new("A", "M0", 2, true),
        SubjobSpec::new("B", "M1", 1, false),
    ])
}

#[test]
fn send_recv_int32_with_status() {
    run_local_job(&mixed_layout(), |mut rt| {
        match rt.rank() {
            0 => {
                rt.send(&[42i32], 1, 7, WORLD).unwrap();
            }
            1 => {
                let mut buf = [0i32; 1];
                let st = rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(7), WORLD).unwrap();
                assert_eq!(buf[0], 42);
                assert_eq!((st.source, st.tag, st.count), (0, 7, 1));
            }
            _ => {}
        }
        rt.finalize().unwrap();
    })
    .unwrap();
}

#[test]
fn empty_message_completes_with_count_zero() {
    run_local_job(&mixed_layout(), |mut rt| {
        match rt.rank() {
            0 => rt.send(&[] as &[i64], 1, 3, WORLD).unwrap(),
            1 => {
                let mut buf = [0i64; 4];
                let st = rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(3), WORLD).unwrap();
                assert_eq!(st.count, 0);
            }
            _ => {}
        }
    })
    .unwrap();
}

#[test]
fn cross_method_delivery_is_value_identical() {
    // Rank 0 sits in the vendor group, rank 4 is TCP-only at the other site.
    run_local_job(&example_grid_layout(), |mut rt| {
        let payload: Vec<f64> = (0..257).map(|i| i as f64 * 0.5 - 3.25).collect();
        match rt.rank() {
            0 => rt.send(&payload, 4, 9, WORLD).unwrap(),
            4 => {
                let mut buf = vec![0f64; payload.len()];
                let st = rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(9), WORLD).unwrap();
                assert_eq!(buf, payload);
                assert_eq!(st.count, payload.len());
            }
            _ => {}
        }
    })
    .unwrap();
}

#[test]
fn irecv_then_send_then_wait() {
    run_local_job(&mixed_layout(), |mut rt| match rt.rank() {
        0 => {
            let req = rt.irecv::<i32>(4, RecvSource::Rank(1), RecvTag::Tag(5), WORLD).unwrap();
            rt.send(&[1i32], 1, 6, WORLD).unwrap(); // let the peer know we're ready
            let (data, st) = rt.wait_recv::<i32>(req).unwrap();
            assert_eq!(data, vec![10, 20]);
            assert_eq!(st.count, 2);
        }
        1 => {
            let mut buf = [0i32; 1];
            rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(6), WORLD).unwrap();
            rt.send(&[10i32, 20], 0, 5, WORLD).unwrap();
        }
        _ => {}
    })
    .unwrap();
}

#[test]
fn completion_order_matches_send_order() {
    run_local_job(&mixed_layout(), |mut rt| match rt.rank() {
        0 => {
            let r1 = rt.irecv::<i32>(1, RecvSource::Rank(1), RecvTag::Tag(5), WORLD).unwrap();
            let r2 = rt.irecv::<i32>(1, RecvSource::Rank(1), RecvTag::Tag(5), WORLD).unwrap();
            rt.send(&[0i32], 1, 6, WORLD).unwrap();
            let (first, _) = rt.wait_recv::<i32>(r1).unwrap();
            let (second, _) = rt.wait_recv::<i32>(r2).unwrap();
            assert_eq!((first[0], second[0]), (111, 222));
        }
        1 => {
            let mut buf = [0i32; 1];
            rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(6), WORLD).unwrap();
            rt.send(&[111i32], 0, 5, WORLD).unwrap();
            rt.send(&[222i32], 0, 5, WORLD).unwrap();
        }
        _ => {}
    })
    .unwrap();
}

#[test]
fn unexpected_message_then_matching_recv() {
    run_local_job(&mixed_layout(), |mut rt| match rt.rank() {
        0 => {
            // Make sure the message has arrived and is buffered as
            // unexpected before the receive is posted.
            let mut sync = [0i32; 1];
            rt.recv(&mut sync, RecvSource::Rank(1), RecvTag::Tag(1), WORLD).unwrap();
            while rt.engine_stats().unexpected_len == 0 {
                assert!(rt
                    .iprobe(RecvSource::Rank(1), RecvTag::Tag(2), WORLD)
                    .unwrap()
                    .map(|e| e.count == 1)
                    .unwrap_or(true));
            }
            let mut buf = [0i32; 1];
            let st = rt.recv(&mut buf, RecvSource::Rank(1), RecvTag::Tag(2), WORLD).unwrap();
            assert_eq!(buf[0], 77);
            assert_eq!(st.source, 1);
        }
        1 => {
            rt.send(&[0i32], 0, 1, WORLD).unwrap();
            rt.send(&[77i32], 0, 2, WORLD).unwrap();
        }
        _ => {}
    })
    .unwrap();
}

#[test]
fn any_tag_matches_earliest_arrival() {
    run_local_job(&mixed_layout(), |mut rt| match rt.rank() {
        0 => {
            // Wait until both tagged messages are buffered.
            while rt.engine_stats().unexpected_len < 2 {
                let _ = rt.iprobe(RecvSource::Rank(1), RecvTag::Any, WORLD).unwrap();
                std::thread::yield_now();
            }
            let mut buf = [0i32; 1];
            let st = rt.recv(&mut buf, RecvSource::Rank(1), RecvTag::Any, WORLD).unwrap();
            assert_eq!(st.tag, 5, "earliest arrival wins under AnyTag");
            let st = rt.recv(&mut buf, RecvSource::Rank(1), RecvTag::Any, WORLD).unwrap();
            assert_eq!(st.tag, 9);
        }
        1 => {
            rt.send(&[1i32], 0, 5, WORLD).unwrap();
            rt.send(&[2i32], 0, 9, WORLD).unwrap();
        }
        _ => {}
    })
    .unwrap();
}

#[test]
fn iprobe_for_missing_message_keeps_returning_none() {
    run_local_job(&mixed_layout(), |mut rt| {
        if rt.rank() == 0 {
            for _ in 0..50 {
                assert!(rt
                    .iprobe(RecvSource::Rank(1), RecvTag::Tag(12345), WORLD)
                    .unwrap()
                    .is_none());
            }
        }
    })
    .unwrap();
}

#[test]
fn truncation_is_an_error() {
    run_local_job(&mixed_layout(), |mut rt| match rt.rank() {
        0 => {
            let mut small = [0i32; 2];
            let err = rt
                .recv(&mut small, RecvSource::Rank(1), RecvTag::Tag(4), WORLD)
                .unwrap_err();
            assert!(matches!(err, gridmp::Error::Truncation { .. }), "got {err}");
        }
        1 => rt.send(&[1i32, 2, 3, 4], 0, 4, WORLD).unwrap(),
        _ => {}
    })
    .unwrap();
}

#[test]
fn isend_completes_and_wait_send_is_ok() {
    run_local_job(&mixed_layout(), |mut rt| match rt.rank() {
        0 => {
            let req = rt.isend(&[5i32], 1, 8, WORLD).unwrap();
            rt.wait_send(req).unwrap();
        }
        1 => {
            let mut buf = [0i32; 1];
            rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(8), WORLD).unwrap();
            assert_eq!(buf[0], 5);
        }
        _ => {}
    })
    .unwrap();
}

#[test]
fn test_recv_polls_without_blocking() {
    run_local_job(&mixed_layout(), |mut rt| match rt.rank() {
        0 => {
            let mut req = rt.irecv::<i32>(1, RecvSource::Rank(1), RecvTag::Tag(2), WORLD).unwrap();
            rt.send(&[0i32], 1, 1, WORLD).unwrap();
            loop {
                match rt.test_recv::<i32>(req).unwrap() {
                    RecvTest::Ready(data, st) => {
                        assert_eq!(data, vec![9]);
                        assert_eq!(st.tag, 2);
                        break;
                    }
                    RecvTest::Pending(r) => {
                        req = r;
                        std::thread::yield_now();
                    }
                }
            }
        }
        1 => {
            let mut buf = [0i32; 1];
            rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(1), WORLD).unwrap();
            rt.send(&[9i32], 0, 2, WORLD).unwrap();
        }
        _ => {}
    })
    .unwrap();
}

#[test]
fn send_to_self_loops_back() {
    run_local_job(&mixed_layout(), |mut rt| {
        if rt.rank() == 2 {
            rt.send(&[33i32], 2, 0, WORLD).unwrap();
            let mut buf = [0i32; 1];
            let st = rt.recv(&mut buf, RecvSource::Rank(2), RecvTag::Tag(0), WORLD).unwrap();
            assert_eq!(buf[0], 33);
            assert_eq!(st.source, 2);
        }
    })
    .unwrap();
}

#[test]
fn singleton_world_without_bootstrap() {
    let rt = gridmp::Runtime::init_with(gridmp::BootstrapConfig::default()).unwrap();
    assert_eq!(rt.size(), 1);
    assert_eq!(rt.rank(), 0);
    assert_eq!(rt.topology().depth(0), 3);
    assert!(rt.released_at_ns().is_none());
}

#[test]
fn init_fails_against_unreachable_bootstrap() {
    let cfg = gridmp::BootstrapConfig {
        rank: 0,
        size: 2,
        bootstrap: Some("127.0.0.1:1".into()),
        timeout: std::time::Duration::from_secs(1),
        ..gridmp::BootstrapConfig::default()
    };
    match gridmp::Runtime::init_with(cfg) {
        Err(err) => assert!(matches!(err, gridmp::Error::Startup(_))),
        Ok(_) => panic!("init against a dead rendezvous must fail"),
    }
}
