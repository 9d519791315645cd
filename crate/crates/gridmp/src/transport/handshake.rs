//! Connection establishment.
//!
//! Channels are created lazily on first send. The initiator opens a socket
//! and sends an 8-byte hello carrying its world rank; the accepting side
//! answers with a one-byte verdict. When two processes connect to each other
//! simultaneously, the connection initiated by the lower world rank wins and
//! the other is rejected, so exactly one channel survives per pair and
//! method.
//!
//! Accepting and the hello/verdict exchange run on a small background thread
//! per process so that an eager sender is never stalled by a receiver that is
//! currently blocked in a vendor-only receive. Adopted connections are handed
//! to the progress engine through a mailbox paired with a wakeup pipe; all
//! message traffic stays on the engine's thread.

use std::collections::HashSet;
use std::io::{self, Write};
use std::net::TcpListener;
use std::os::fd::AsRawFd;
use std::os::unix::net::{UnixListener, UnixStream};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::io::{poll_fds, ByteStream};
use super::Method;

pub const HELLO_MAGIC: [u8; 4] = *b"GMPH";
pub const VERDICT_WELCOME: u8 = b'W';
pub const VERDICT_REJECT: u8 = b'R';

pub fn encode_hello(rank: usize) -> [u8; 8] {
    let mut b = [0u8; 8];
    b[0..4].copy_from_slice(&HELLO_MAGIC);
    b[4..8].copy_from_slice(&(rank as u32).to_be_bytes());
    b
}

/// A connection the acceptor welcomed, waiting for the engine to pick it up.
pub struct Adopted {
    pub peer: usize,
    pub method: Method,
    pub stream: ByteStream,
}

/// State shared between the engine thread and the acceptor thread. The
/// acceptor's welcome/reject decision and the engine's connect bookkeeping
/// both happen under this lock, which is what makes race resolution
/// deterministic.
#[derive(Default)]
pub struct HandshakeShared {
    /// Outgoing connects the engine has started but not yet resolved.
    pub inflight: HashSet<(usize, Method)>,
    /// Keys of channels that already exist (engine-adopted or welcomed).
    pub established: HashSet<(usize, Method)>,
    /// Welcomed incoming connections awaiting engine pickup.
    pub adopted: Vec<Adopted>,
    pub stop: bool,
}

pub struct Acceptor {
    pub shared: Arc<Mutex<HandshakeShared>>,
    /// Engine-side end of the wakeup pipe; readable whenever `adopted` may
    /// have entries.
    pub notify_rx: UnixStream,
    thread: Option<JoinHandle<()>>,
}

impl Acceptor {
    pub fn spawn(
        self_rank: usize,
        tcp_listener: TcpListener,
        vendor_listener: Option<UnixListener>,
    ) -> io::Result<Acceptor> {
        let shared = Arc::new(Mutex::new(HandshakeShared::default()));
        let (notify_rx, notify_tx) = UnixStream::pair()?;
        notify_rx.set_nonblocking(true)?;
        tcp_listener.set_nonblocking(true)?;
        if let Some(l) = &vendor_listener {
            l.set_nonblocking(true)?;
        }
        let shared2 = Arc::clone(&shared);
        let thread = std::thread::Builder::new()
            .name(format!("gridmp-accept-{self_rank}"))
            .spawn(move || {
                accept_loop(self_rank, tcp_listener, vendor_listener, shared2, notify_tx)
            })?;
        Ok(Acceptor { shared, notify_rx, thread: Some(thread) })
    }

    pub fn stop(&mut self) {
        if let Some(t) = self.thread.take() {
            self.shared.lock().unwrap().stop = true;
            let _ = t.join();
        }
    }
}

impl Drop for Acceptor {
    fn drop(&mut self) {
        self.stop();
    }
}

struct Pending {
    stream: ByteStream,
    method: Method,
    buf: [u8; 8],
    fill: usize,
}

fn accept_loop(
    self_rank: usize,
    tcp: TcpListener,
    vendor: Option<UnixListener>,
    shared: Arc<Mutex<HandshakeShared>>,
    notify_tx: UnixStream,
) {
    let mut pending: Vec<Pending> = Vec::new();
    loop {
        if shared.lock().unwrap().stop {
            return;
        }

        loop {
            match tcp.accept() {
                Ok((s, _)) => {
                    let _ = s.set_nodelay(true);
                    let _ = s.set_nonblocking(true);
                    pending.push(Pending {
                        stream: ByteStream::Tcp(s),
                        method: Method::Tcp,
                        buf: [0; 8],
                        fill: 0,
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(_) => break,
            }
        }
        if let Some(l) = &vendor {
            loop {
                match l.accept() {
                    Ok((s, _)) => {
                        let _ = s.set_nonblocking(true);
                        pending.push(Pending {
                            stream: ByteStream::Unix(s),
                            method: Method::Vendor,
                            buf: [0; 8],
                            fill: 0,
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                    Err(_) => break,
                }
            }
        }

        let mut done: Vec<usize> = Vec::new();
        for (i, p) in pending.iter_mut().enumerate() {
            match p.stream.read(&mut p.buf[p.fill..]) {
                Ok(0) => done.push(i),
                Ok(n) => {
                    p.fill += n;
                    if p.fill == 8 {
                        done.push(i);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
                Err(_) => done.push(i),
            }
        }
        for &i in done.iter().rev() {
            let p = pending.swap_remove(i);
            if p.fill == 8 && p.buf[0..4] == HELLO_MAGIC {
                let peer = u32::from_be_bytes(p.buf[4..8].try_into().unwrap()) as usize;
                resolve_hello(self_rank, peer, p, &shared, &notify_tx);
            }
        }

        // Sleep on the listener fds (and pending hellos) between rounds.
        let mut fds = vec![(tcp.as_raw_fd(), libc::POLLIN)];
        if let Some(l) = &vendor {
            fds.push((l.as_raw_fd(), libc::POLLIN));
        }
        for p in &pending {
            fds.push((p.stream.as_raw_fd(), libc::POLLIN));
        }
        let _ = poll_fds(&fds, Some(Duration::from_millis(50)));
    }
}

fn resolve_hello(
    self_rank: usize,
    peer: usize,
    mut p: Pending,
    shared: &Arc<Mutex<HandshakeShared>>,
    notify_tx: &UnixStream,
) {
    let key = (peer, p.method);
    let welcome = {
        let mut st = shared.lock().unwrap();
        // Lower-rank initiator wins a race; an established channel makes any
        // further hello a duplicate.
        if st.established.contains(&key) || (st.inflight.contains(&key) && self_rank < peer) {
            false
        } else {
            st.established.insert(key);
            true
        }
    };
    let verdict = if welcome { VERDICT_WELCOME } else { VERDICT_REJECT };
    if p.stream.write_all(&[verdict]).is_err() || !welcome {
        return;
    }
    shared.lock().unwrap().adopted.push(Adopted { peer, method: p.method, stream: p.stream });
    let _ = (&*notify_tx).write(&[1u8]);
}
