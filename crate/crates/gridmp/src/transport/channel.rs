//! One bidirectional channel per process pair and method.

use std::io::{self, IoSlice};
use std::os::fd::AsRawFd;

use crate::error::{Error, Result};
use crate::wire::{convert_to_native, WireHeader, HEADER_LEN};

use super::io::{wait_fd, ByteStream};
use super::Method;

/// A complete framed message, payload already in native byte order.
#[derive(Debug)]
pub struct RecvMsg {
    pub hdr: WireHeader,
    pub payload: Vec<u8>,
}

/// Send/receive instrumentation for one channel.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ChanCounters {
    pub messages_sent: u64,
    /// Logical gathered writes; partial writes are retried internally and
    /// still count once.
    pub write_ops: u64,
    pub bytes_sent: u64,
    pub messages_received: u64,
}

enum ReadState {
    Header,
    Payload(WireHeader),
}

/// Incremental frame decoder; survives arbitrary read fragmentation.
struct FrameReader {
    state: ReadState,
    hdr_buf: [u8; HEADER_LEN],
    payload: Vec<u8>,
    fill: usize,
}

impl FrameReader {
    fn new() -> FrameReader {
        FrameReader { state: ReadState::Header, hdr_buf: [0; HEADER_LEN], payload: Vec::new(), fill: 0 }
    }
}

pub struct Chan {
    pub peer: usize,
    pub method: Method,
    pub counters: ChanCounters,
    pub alive: bool,
    stream: ByteStream,
    reader: FrameReader,
}

impl Chan {
    pub fn new(peer: usize, method: Method, stream: ByteStream) -> Chan {
        Chan {
            peer,
            method,
            counters: ChanCounters::default(),
            alive: true,
            stream,
            reader: FrameReader::new(),
        }
    }

    pub fn raw_fd(&self) -> std::os::fd::RawFd {
        self.stream.as_raw_fd()
    }

    /// Submit header and payload as one gathered write and push it fully into
    /// the socket. If the socket back-pressures, incoming frames are drained
    /// while waiting (returned for dispatch) so two peers pushing large
    /// messages at each other cannot deadlock.
    pub fn send_frame(&mut self, hdr: &WireHeader, payload: &[u8]) -> Result<Vec<RecvMsg>> {
        debug_assert_eq!(hdr.payload_len as usize, payload.len());
        let hdr_bytes = hdr.encode();
        let total = HEADER_LEN + payload.len();
        let mut bufs = [IoSlice::new(&hdr_bytes), IoSlice::new(payload)];
        let mut slices: &mut [IoSlice<'_>] = &mut bufs;
        let mut written = 0usize;
        let mut drained = Vec::new();

        self.counters.write_ops += 1;
        while written < total {
            match self.stream.write_vectored(slices) {
                Ok(0) => {
                    self.alive = false;
                    return Err(Error::Transport {
                        peer: Some(self.peer),
                        detail: "channel closed during send".into(),
                    });
                }
                Ok(n) => {
                    written += n;
                    IoSlice::advance_slices(&mut slices, n);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    let (mut msgs, eof) = self.read_frames()?;
                    drained.append(&mut msgs);
                    if eof {
                        self.alive = false;
                        return Err(Error::Transport {
                            peer: Some(self.peer),
                            detail: "peer closed while send was in flight".into(),
                        });
                    }
                    wait_fd(self.stream.as_raw_fd(), libc::POLLOUT | libc::POLLIN, None)
                        .map_err(|e| Error::transport(self.peer, &e))?;
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    self.alive = false;
                    return Err(Error::transport(self.peer, &e));
                }
            }
        }
        self.counters.messages_sent += 1;
        self.counters.bytes_sent += total as u64;
        Ok(drained)
    }

    /// Drain every complete frame currently available without blocking.
    /// Returns the frames and whether the peer closed the stream. On a
    /// protocol or transport error the channel is left dead.
    pub fn read_frames(&mut self) -> Result<(Vec<RecvMsg>, bool)> {
        let mut out = Vec::new();
        let res = pump(&mut self.reader, &mut self.stream, self.peer, &mut out);
        match res {
            Ok(eof) => {
                self.counters.messages_received += out.len() as u64;
                if eof {
                    self.alive = false;
                }
                Ok((out, eof))
            }
            Err(e) => {
                self.alive = false;
                Err(e)
            }
        }
    }
}

/// Advance the frame state machine until the socket has no more bytes.
/// Returns true on clean EOF at a frame boundary; EOF mid-frame is a
/// truncated-stream transport error.
fn pump(
    reader: &mut FrameReader,
    stream: &mut ByteStream,
    peer: usize,
    out: &mut Vec<RecvMsg>,
) -> Result<bool> {
    loop {
        let (buf, at_boundary) = match reader.state {
            ReadState::Header => (&mut reader.hdr_buf[..], true),
            ReadState::Payload(_) => (&mut reader.payload[..], false),
        };
        let want = buf.len();

        if reader.fill == want {
            advance_state(reader, peer, out)?;
            continue;
        }

        match stream.read(&mut buf[reader.fill..]) {
            Ok(0) => {
                if at_boundary && reader.fill == 0 {
                    return Ok(true);
                }
                return Err(Error::Transport {
                    peer: Some(peer),
                    detail: "stream truncated mid-message".into(),
                });
            }
            Ok(n) => {
                reader.fill += n;
                if reader.fill == want {
                    advance_state(reader, peer, out)?;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(false),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::transport(peer, &e)),
        }
    }
}

fn advance_state(reader: &mut FrameReader, peer: usize, out: &mut Vec<RecvMsg>) -> Result<()> {
    match reader.state {
        ReadState::Header => {
            let hdr = WireHeader::decode(&reader.hdr_buf, peer)?;
            reader.payload = vec![0; hdr.payload_len as usize];
            reader.fill = 0;
            reader.state = ReadState::Payload(hdr);
        }
        ReadState::Payload(hdr) => {
            let mut payload = std::mem::take(&mut reader.payload);
            convert_to_native(&hdr, &mut payload);
            out.push(RecvMsg { hdr, payload });
            reader.fill = 0;
            reader.state = ReadState::Header;
        }
    }
    Ok(())
}
