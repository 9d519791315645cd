//! The two communication methods and their plumbing: endpoints, lazy
//! bidirectional channels with race-resolved establishment, gathered-write
//! framing, and byte-order conversion.
//!
//! The vendor channel — the stand-in for an underlying vendor MPI — is a
//! same-machine byte stream over abstract-namespace local sockets, keyed by
//! the subjob's `vendor_key`. Everything else travels over TCP.

mod channel;
mod handshake;
pub(crate) mod io;

pub use channel::{Chan, ChanCounters, RecvMsg};
pub use handshake::{
    encode_hello, Acceptor, Adopted, HandshakeShared, VERDICT_REJECT, VERDICT_WELCOME,
};
pub use io::{poll_fds, wait_fd, ByteStream};


use std::net::{SocketAddr, TcpListener, TcpStream};
use std::os::linux::net::SocketAddrExt;
use std::os::unix::net::{SocketAddr as UnixAddr, UnixListener, UnixStream};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::topology::TopologyMap;
use crate::wire::{Dtype, WireHeader, HEADER_LEN};

/// The two communication methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Vendor,
    Tcp,
}

/// Pick the most efficient method between two ranks: the vendor channel iff
/// both are depth 4 and share a vendor-level color, TCP otherwise.
pub fn select_method(map: &TopologyMap, a: usize, b: usize) -> Method {
    if map.depth(a) == 4 && map.depth(b) == 4 && map.colors(a)[3] == map.colors(b)[3] {
        Method::Vendor
    } else {
        Method::Tcp
    }
}

/// Where a process can be reached, as published through the bootstrap table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub world_rank: usize,
    pub tcp_addr: SocketAddr,
    pub vendor_key: Option<String>,
}

/// Snapshot of one channel's instrumentation, for registry dumps in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelStats {
    pub peer: usize,
    pub method: Method,
    pub counters: ChanCounters,
    /// How many times a channel was adopted for this (peer, method) key.
    /// Anything other than 1 means race resolution failed.
    pub adoptions: u32,
}

fn vendor_addr(key: &str, rank: usize) -> std::io::Result<UnixAddr> {
    UnixAddr::from_abstract_name(format!("{key}.{rank}").as_bytes())
}

/// Bind this rank's vendor listener under the subjob's rendezvous key.
pub fn vendor_listen(key: &str, rank: usize) -> Result<UnixListener> {
    let addr = vendor_addr(key, rank).map_err(|e| Error::Startup(e.to_string()))?;
    UnixListener::bind_addr(&addr)
        .map_err(|e| Error::Startup(format!("vendor listener {key}.{rank}: {e}")))
}

/// Connect to a peer's vendor listener.
pub fn vendor_connect(key: &str, peer: usize) -> Result<UnixStream> {
    let addr = vendor_addr(key, peer).map_err(|e| Error::transport(peer, &e))?;
    UnixStream::connect_addr(&addr).map_err(|e| Error::transport(peer, &e))
}

/// Result of the intramachine round-trip comparison between the two methods.
#[derive(Debug, Clone, Copy)]
pub struct LatencyComparison {
    pub vendor_median_ns: u64,
    pub tcp_median_ns: u64,
    pub reps: usize,
    pub low_confidence: bool,
}

/// Measure small-message round-trip medians over both methods between two
/// same-machine ranks. Harness-level: builds throwaway raw channels on this
/// host, below the progress engine. The claim it supports is ordinal only.
pub fn vendor_vs_tcp_roundtrip(
    map: &TopologyMap,
    r: usize,
    s: usize,
    reps: usize,
) -> Result<LatencyComparison> {
    if r >= map.world_size() || s >= map.world_size() {
        return Err(Error::Usage("rank out of range".into()));
    }
    if r == s || select_method(map, r, s) != Method::Vendor {
        return Err(Error::Usage(format!(
            "ranks {r} and {s} do not share a vendor channel (not on the same machine)"
        )));
    }
    if reps == 0 {
        return Err(Error::Usage("reps must be >= 1".into()));
    }

    let key = format!("gridmp-lat-{}-{}", std::process::id(), monotonic_suffix());
    let vlist = vendor_listen(&key, 0)?;
    let echo_v = std::thread::spawn(move || {
        let (s, _) = vlist.accept().unwrap();
        echo_frames(ByteStream::Unix(s), reps);
    });
    let vstream = vendor_connect(&key, 0)?;
    let vendor_median_ns = roundtrip_median(ByteStream::Unix(vstream), reps)?;
    echo_v.join().map_err(|_| Error::Usage("echo thread panicked".into()))?;

    let tlist = TcpListener::bind(("127.0.0.1", 0)).map_err(|e| Error::transport(s, &e))?;
    let taddr = tlist.local_addr().map_err(|e| Error::transport(s, &e))?;
    let echo_t = std::thread::spawn(move || {
        let (s, _) = tlist.accept().unwrap();
        s.set_nodelay(true).unwrap();
        echo_frames(ByteStream::Tcp(s), reps);
    });
    let tstream = TcpStream::connect(taddr).map_err(|e| Error::transport(s, &e))?;
    tstream.set_nodelay(true).map_err(|e| Error::transport(s, &e))?;
    let tcp_median_ns = roundtrip_median(ByteStream::Tcp(tstream), reps)?;
    echo_t.join().map_err(|_| Error::Usage("echo thread panicked".into()))?;

    Ok(LatencyComparison { vendor_median_ns, tcp_median_ns, reps, low_confidence: reps < 2 })
}

fn monotonic_suffix() -> u128 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    let n = NEXT.fetch_add(1, Ordering::Relaxed);
    crate::monotonic_ns() ^ ((n as u128) << 96)
}

fn echo_frames(mut stream: ByteStream, reps: usize) {
    let warmup = warmup_for(reps);
    let mut buf = [0u8; HEADER_LEN];
    for _ in 0..reps + warmup {
        if read_exact_blocking(&mut stream, &mut buf).is_err() {
            return;
        }
        if stream.write_all(&buf).is_err() {
            return;
        }
    }
}

fn read_exact_blocking(stream: &mut ByteStream, buf: &mut [u8]) -> std::io::Result<()> {
    let mut fill = 0;
    while fill < buf.len() {
        match stream.read(&mut buf[fill..]) {
            Ok(0) => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => fill += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                io::wait_fd(std::os::fd::AsRawFd::as_raw_fd(stream), libc::POLLIN, None)?;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn warmup_for(reps: usize) -> usize {
    (reps / 10).min(100)
}

fn roundtrip_median(mut stream: ByteStream, reps: usize) -> Result<u64> {
    let hdr = WireHeader::new(Dtype::Bytes, 0, 0, 0, 0).encode();
    let mut buf = [0u8; HEADER_LEN];
    let warmup = warmup_for(reps);
    let mut samples = Vec::with_capacity(reps);
    for i in 0..reps + warmup {
        let t0 = Instant::now();
        stream
            .write_all(&hdr)
            .map_err(|e| Error::Transport { peer: None, detail: e.to_string() })?;
        read_exact_blocking(&mut stream, &mut buf)
            .map_err(|e| Error::Transport { peer: None, detail: e.to_string() })?;
        if i >= warmup {
            samples.push(t0.elapsed());
        }
    }
    Ok(median_ns(&mut samples))
}

pub(crate) fn median_ns(samples: &mut [Duration]) -> u64 {
    samples.sort();
    samples[samples.len() / 2].as_nanos() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{compute_topology, example_grid_layout, JobLayout, SubjobSpec};

    #[test]
    fn method_selection_on_example_grid() {
        let map = compute_topology(&example_grid_layout()).unwrap();
        assert_eq!(select_method(&map, 0, 2), Method::Vendor);
        assert_eq!(select_method(&map, 0, 4), Method::Tcp);
        assert_eq!(select_method(&map, 4, 5), Method::Tcp);
        // Loopback: vendor iff depth 4.
        assert_eq!(select_method(&map, 0, 0), Method::Vendor);
        assert_eq!(select_method(&map, 4, 4), Method::Tcp);
    }

    #[test]
    fn roundtrip_comparison_requires_vendor_pair() {
        let map = compute_topology(&example_grid_layout()).unwrap();
        // Ranks 0 and 4 are on different machines.
        assert!(matches!(
            vendor_vs_tcp_roundtrip(&map, 0, 4, 10),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn roundtrip_comparison_single_rep_is_low_confidence() {
        let map = compute_topology(&JobLayout::new(vec![SubjobSpec::new("A", "M", 2, true)]))
            .unwrap();
        let m = vendor_vs_tcp_roundtrip(&map, 0, 1, 1).unwrap();
        assert!(m.low_confidence);
        assert!(m.vendor_median_ns > 0 && m.tcp_median_ns > 0);
    }
}
