//! Byte-stream abstraction over the two socket families plus a thin poll(2)
//! wrapper used by the progress loops.

use std::io::{self, IoSlice, Read, Write};
use std::net::TcpStream;
use std::os::fd::{AsRawFd, RawFd};
use std::os::unix::net::UnixStream;
use std::time::Duration;

/// A connected socket of either method. All engine-side streams run in
/// nonblocking mode.
#[derive(Debug)]
pub enum ByteStream {
    Tcp(TcpStream),
    Unix(UnixStream),
}

impl ByteStream {
    pub fn set_nonblocking(&self, nb: bool) -> io::Result<()> {
        match self {
            ByteStream::Tcp(s) => s.set_nonblocking(nb),
            ByteStream::Unix(s) => s.set_nonblocking(nb),
        }
    }

    pub fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            ByteStream::Tcp(s) => s.read(buf),
            ByteStream::Unix(s) => s.read(buf),
        }
    }

    pub fn write_vectored(&mut self, bufs: &[IoSlice<'_>]) -> io::Result<usize> {
        match self {
            ByteStream::Tcp(s) => s.write_vectored(bufs),
            ByteStream::Unix(s) => s.write_vectored(bufs),
        }
    }

    pub fn write_all(&mut self, mut buf: &[u8]) -> io::Result<()> {
        while !buf.is_empty() {
            match self.write(buf) {
                Ok(0) => return Err(io::ErrorKind::WriteZero.into()),
                Ok(n) => buf = &buf[n..],
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    wait_fd(self.as_raw_fd(), libc::POLLOUT, None)?;
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

}

impl AsRawFd for ByteStream {
    fn as_raw_fd(&self) -> RawFd {
        match self {
            ByteStream::Tcp(s) => s.as_raw_fd(),
            ByteStream::Unix(s) => s.as_raw_fd(),
        }
    }
}

impl Write for ByteStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            ByteStream::Tcp(s) => s.write(buf),
            ByteStream::Unix(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            ByteStream::Tcp(s) => s.flush(),
            ByteStream::Unix(s) => s.flush(),
        }
    }
}

fn poll_timeout_ms(timeout: Option<Duration>) -> libc::c_int {
    match timeout {
        None => -1,
        Some(d) => d.as_millis().min(i32::MAX as u128) as libc::c_int,
    }
}

/// Wait for events on a set of fds. Returns the indices with pending events.
/// An empty result means the timeout elapsed.
pub fn poll_fds(fds: &[(RawFd, i16)], timeout: Option<Duration>) -> io::Result<Vec<usize>> {
    let mut pfds: Vec<libc::pollfd> = fds
        .iter()
        .map(|&(fd, events)| libc::pollfd { fd, events, revents: 0 })
        .collect();
    loop {
        let rc = unsafe {
            libc::poll(pfds.as_mut_ptr(), pfds.len() as libc::nfds_t, poll_timeout_ms(timeout))
        };
        if rc < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return Err(err);
        }
        return Ok(pfds
            .iter()
            .enumerate()
            .filter(|(_, p)| p.revents != 0)
            .map(|(i, _)| i)
            .collect());
    }
}

/// Block until one fd has an event (or the timeout passes).
pub fn wait_fd(fd: RawFd, events: i16, timeout: Option<Duration>) -> io::Result<bool> {
    Ok(!poll_fds(&[(fd, events)], timeout)?.is_empty())
}
