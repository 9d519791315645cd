//! Child output collation: every child stdout/stderr line is forwarded with
//! a `[rank N] ` prefix, one line at a time so lines never interleave
//! mid-line. A partial line left at exit is flushed with the same prefix.

use std::io::{BufRead, BufReader, Read, Write};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Stdout,
    Stderr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedLine {
    pub rank: usize,
    pub stream: StreamKind,
    pub line: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollateMode {
    /// Forward to the launcher's stdout/stderr with a `[rank N] ` prefix.
    Prefix,
    /// Collect lines in memory (tests and programmatic callers).
    Capture,
    /// Children inherit the launcher's streams untouched.
    Inherit,
}

pub(crate) type CaptureSink = Arc<Mutex<Vec<CapturedLine>>>;

/// Pump one child stream to its destination, line-atomically.
pub(crate) fn spawn_collator(
    rank: usize,
    stream: StreamKind,
    source: impl Read + Send + 'static,
    capture: Option<CaptureSink>,
) -> JoinHandle<()> {
    std::thread::spawn(move || {
        let mut reader = BufReader::new(source);
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match reader.read_until(b'\n', &mut buf) {
                Ok(0) => return,
                Ok(_) => {
                    let had_newline = buf.last() == Some(&b'\n');
                    if had_newline {
                        buf.pop();
                        if buf.last() == Some(&b'\r') {
                            buf.pop();
                        }
                    }
                    let line = String::from_utf8_lossy(&buf);
                    match &capture {
                        Some(sink) => sink
                            .lock()
                            .unwrap()
                            .push(CapturedLine { rank, stream, line: line.into_owned() }),
                        None => match stream {
                            StreamKind::Stdout => {
                                let out = std::io::stdout();
                                let mut lock = out.lock();
                                let _ = writeln!(lock, "[rank {rank}] {line}");
                            }
                            StreamKind::Stderr => {
                                let err = std::io::stderr();
                                let mut lock = err.lock();
                                let _ = writeln!(lock, "[rank {rank}] {line}");
                            }
                        },
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(_) => return,
            }
        }
    })
}
