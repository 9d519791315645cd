//! All-pairs exchange stress: every rank fires a distinct payload at every
//! other rank simultaneously, for many rounds, maximizing connection races
//! on the first round. Verifies payload integrity, then asserts the channel
//! registry: exactly one channel per peer and method, adopted exactly once,
//! with every contiguous send issued as a single gathered write.

use gridmp::{RecvSource, RecvTag, WORLD};
use gridmp_acceptance::edge_payload;

fn main() {
    let rounds: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let mut rt = gridmp::Runtime::init().unwrap_or_else(|e| {
        eprintln!("init failed: {e}");
        std::process::exit(7);
    });
    let n = rt.size();
    let me = rt.rank();

    for round in 0..rounds {
        let tag = round as i32;
        for peer in (0..n).filter(|&p| p != me) {
            let req = rt.isend(&edge_payload(me, peer, round, 16), peer, tag, WORLD).unwrap();
            rt.wait_send(req).unwrap();
        }
        for peer in (0..n).filter(|&p| p != me) {
            let mut buf = vec![0i32; 16];
            let st =
                rt.recv(&mut buf, RecvSource::Rank(peer), RecvTag::Tag(tag), WORLD).unwrap();
            assert_eq!(st.count, 16);
            assert_eq!(buf, edge_payload(peer, me, round, 16), "payload corrupted");
        }
    }

    let stats = rt.channel_stats();
    let mut pairs = std::collections::HashSet::new();
    for s in &stats {
        assert_eq!(
            s.adoptions, 1,
            "rank {me}: channel to {} over {:?} adopted {} times",
            s.peer, s.method, s.adoptions
        );
        assert!(pairs.insert((s.peer, s.method)), "rank {me}: duplicate channel entry");
        assert_eq!(
            s.counters.write_ops, s.counters.messages_sent,
            "rank {me}: gathered-write violation toward {}",
            s.peer
        );
    }
    assert_eq!(pairs.len(), n - 1, "rank {me}: expected one channel per peer");

    println!("ALLPAIRS OK {me}");
    rt.finalize().unwrap();
}
