//! Startup rendezvous: every process registers its endpoint with the
//! launcher, which holds all of them at a barrier and releases the job only
//! after the whole world has registered.
//!
//! The protocol is newline-delimited text over TCP:
//!
//! ```text
//! child -> launcher:  REG <rank> <host:port> [vendor_key]
//! launcher -> child:  TABLE <n>
//!                     <rank> <host:port> [vendor_key]     (n lines)
//!                     <rank> <depth> <c0> <c1> <c2> [c3]  (n lines)
//!                     GO
//! ```

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::monotonic_ns;
use crate::topology::TopologyMap;
use crate::transport::Endpoint;

fn endpoint_fields(ep: &Endpoint) -> String {
    match &ep.vendor_key {
        Some(k) => format!("{} {} {}", ep.world_rank, ep.tcp_addr, k),
        None => format!("{} {}", ep.world_rank, ep.tcp_addr),
    }
}

fn parse_endpoint_fields(fields: &[&str], line: &str) -> Result<Endpoint> {
    if fields.len() < 2 || fields.len() > 3 {
        return Err(Error::Startup(format!("malformed endpoint line {line:?}")));
    }
    let world_rank: usize = fields[0]
        .parse()
        .map_err(|_| Error::Startup(format!("bad rank in endpoint line {line:?}")))?;
    let tcp_addr: SocketAddr = fields[1]
        .parse()
        .map_err(|_| Error::Startup(format!("bad address in endpoint line {line:?}")))?;
    Ok(Endpoint { world_rank, tcp_addr, vendor_key: fields.get(2).map(|s| s.to_string()) })
}

pub fn format_reg(ep: &Endpoint) -> String {
    format!("REG {}\n", endpoint_fields(ep))
}

pub fn parse_reg(line: &str) -> Result<Endpoint> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.first() != Some(&"REG") {
        return Err(Error::Startup(format!("expected REG, got {line:?}")));
    }
    parse_endpoint_fields(&fields[1..], line)
}

/// One registered child held at the startup barrier.
pub struct Registered {
    pub endpoint: Endpoint,
    pub at_ns: u128,
    stream: TcpStream,
}

pub struct BootstrapServer {
    listener: TcpListener,
}

impl BootstrapServer {
    pub fn bind(host: &str) -> Result<BootstrapServer> {
        let listener = TcpListener::bind((host, 0))
            .map_err(|e| Error::Startup(format!("bootstrap bind on {host}: {e}")))?;
        listener.set_nonblocking(true).map_err(|e| Error::Startup(e.to_string()))?;
        Ok(BootstrapServer { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.listener.local_addr().map_err(|e| Error::Startup(e.to_string()))
    }

    /// Accept registrations until all `expected` ranks have arrived. On
    /// timeout or cancellation the error names the ranks still missing.
    pub fn collect(
        &self,
        expected: usize,
        timeout: Duration,
        cancel: Option<&AtomicBool>,
    ) -> Result<Vec<Registered>> {
        self.collect_with(expected, timeout, cancel, |_, _| {})
    }

    /// `collect` with a callback invoked as `(rank, at_ns)` per registration.
    pub fn collect_with(
        &self,
        expected: usize,
        timeout: Duration,
        cancel: Option<&AtomicBool>,
        mut on_register: impl FnMut(usize, u128),
    ) -> Result<Vec<Registered>> {
        let deadline = Instant::now() + timeout;
        let mut regs: HashMap<usize, Registered> = HashMap::new();
        let mut pending: Vec<(TcpStream, Vec<u8>)> = Vec::new();

        while regs.len() < expected {
            if cancel.map(|c| c.load(Ordering::SeqCst)).unwrap_or(false) {
                return Err(Error::Startup("startup interrupted".into()));
            }
            if Instant::now() > deadline {
                let mut missing: Vec<usize> =
                    (0..expected).filter(|r| !regs.contains_key(r)).collect();
                missing.sort_unstable();
                return Err(Error::Startup(format!(
                    "registration timeout: ranks {missing:?} never registered"
                )));
            }

            match self.listener.accept() {
                Ok((s, _)) => {
                    s.set_nonblocking(true).map_err(|e| Error::Startup(e.to_string()))?;
                    pending.push((s, Vec::new()));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
                Err(e) => return Err(Error::Startup(format!("bootstrap accept: {e}"))),
            }

            let mut i = 0;
            while i < pending.len() {
                let mut byte = [0u8; 1];
                let mut remove = false;
                let mut line_done = false;
                loop {
                    match pending[i].0.read(&mut byte) {
                        Ok(0) => {
                            remove = true;
                            break;
                        }
                        Ok(_) => {
                            if byte[0] == b'\n' {
                                line_done = true;
                                break;
                            }
                            pending[i].1.push(byte[0]);
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                        Err(_) => {
                            remove = true;
                            break;
                        }
                    }
                }
                if line_done {
                    let (stream, buf) = pending.swap_remove(i);
                    let line = String::from_utf8_lossy(&buf).into_owned();
                    let endpoint = parse_reg(&line)?;
                    if endpoint.world_rank >= expected {
                        return Err(Error::Startup(format!(
                            "registration for out-of-range rank {}",
                            endpoint.world_rank
                        )));
                    }
                    if regs.contains_key(&endpoint.world_rank) {
                        return Err(Error::Startup(format!(
                            "rank {} registered twice",
                            endpoint.world_rank
                        )));
                    }
                    let at_ns = monotonic_ns();
                    on_register(endpoint.world_rank, at_ns);
                    regs.insert(endpoint.world_rank, Registered { endpoint, at_ns, stream });
                } else if remove {
                    pending.swap_remove(i);
                } else {
                    i += 1;
                }
            }
            std::thread::sleep(Duration::from_millis(2));
        }

        let mut out: Vec<Registered> = regs.into_values().collect();
        out.sort_by_key(|r| r.endpoint.world_rank);
        Ok(out)
    }
}

/// Send the endpoint table, the topology map, and the release token to every
/// registered child. Returns the release instant.
pub fn release_all(clients: &mut [Registered], map: &TopologyMap) -> Result<u128> {
    let mut table = String::new();
    table.push_str(&format!("TABLE {}\n", clients.len()));
    for c in clients.iter() {
        table.push_str(&endpoint_fields(&c.endpoint));
        table.push('\n');
    }
    table.push_str(&map.to_text());
    table.push_str("GO\n");

    let at = monotonic_ns();
    for c in clients.iter_mut() {
        c.stream
            .set_nonblocking(false)
            .and_then(|_| c.stream.write_all(table.as_bytes()))
            .map_err(|e| {
                Error::Startup(format!("release to rank {}: {e}", c.endpoint.world_rank))
            })?;
    }
    Ok(at)
}

/// Everything a process learns from the bootstrap exchange.
pub struct BootstrapResult {
    pub endpoints: Vec<Endpoint>,
    pub map: TopologyMap,
    pub released_at_ns: u128,
}

/// Client side: register this process's endpoint and block at the startup
/// barrier until the launcher releases the job.
pub fn register_and_wait(
    bootstrap: &str,
    endpoint: &Endpoint,
    timeout: Duration,
) -> Result<BootstrapResult> {
    let addr = bootstrap
        .to_socket_addrs()
        .map_err(|e| Error::Startup(format!("bad bootstrap address {bootstrap:?}: {e}")))?
        .next()
        .ok_or_else(|| Error::Startup(format!("bootstrap address {bootstrap:?} resolves to nothing")))?;
    let stream = TcpStream::connect_timeout(&addr, timeout)
        .map_err(|e| Error::Startup(format!("bootstrap rendezvous {bootstrap}: {e}")))?;
    stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| Error::Startup(e.to_string()))?;
    let mut reader = BufReader::new(stream);

    reader
        .get_mut()
        .write_all(format_reg(endpoint).as_bytes())
        .map_err(|e| Error::Startup(format!("sending registration: {e}")))?;

    let timeout_err = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::WouldBlock || e.kind() == std::io::ErrorKind::TimedOut {
            Error::Startup("timed out waiting for the startup barrier release".into())
        } else {
            Error::Startup(format!("bootstrap read: {e}"))
        }
    };
    let read_line = |reader: &mut BufReader<TcpStream>| -> Result<String> {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(timeout_err)?;
        if n == 0 {
            return Err(Error::Startup("launcher closed the rendezvous connection".into()));
        }
        Ok(line.trim_end().to_string())
    };

    let header = read_line(&mut reader)?;
    let n: usize = header
        .strip_prefix("TABLE ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Startup(format!("expected TABLE header, got {header:?}")))?;

    let mut endpoints = Vec::with_capacity(n);
    for _ in 0..n {
        let line = read_line(&mut reader)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        endpoints.push(parse_endpoint_fields(&fields, &line)?);
    }
    endpoints.sort_by_key(|e| e.world_rank);
    for (i, e) in endpoints.iter().enumerate() {
        if e.world_rank != i {
            return Err(Error::Startup(format!("endpoint table is missing rank {i}")));
        }
    }

    let mut map_text = String::new();
    for _ in 0..n {
        map_text.push_str(&read_line(&mut reader)?);
        map_text.push('\n');
    }
    let map = TopologyMap::from_text(&map_text)
        .map_err(|e| Error::Startup(format!("bad topology table: {e}")))?;

    let go = read_line(&mut reader)?;
    if go != "GO" {
        return Err(Error::Startup(format!("expected GO release token, got {go:?}")));
    }
    Ok(BootstrapResult { endpoints, map, released_at_ns: monotonic_ns() })
}
