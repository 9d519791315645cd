//! Spawn, register, release, supervise, tear down.

use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use gridmp::error::{Error, Result};
use gridmp::harness::local_vendor_key;
use gridmp::monotonic_ns;
use gridmp::rendezvous::{release_all, BootstrapServer, Registered};
use gridmp::topology::JobLayout;

use crate::collate::{spawn_collator, CaptureSink, CapturedLine, CollateMode, StreamKind};
use crate::job::JobDescription;
use crate::{EXIT_APP, EXIT_INTERRUPTED, EXIT_STARTUP};

/// Subjob life cycle, reported through `LaunchReport::subjob_events`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjobPhase {
    Pending,
    Running,
    AtBarrier,
    Released,
    Exited,
    Failed,
}

pub struct LaunchOptions {
    pub collate: CollateMode,
    /// External interrupt flag (the CLI wires SIGINT/SIGTERM into it).
    pub cancel: Option<Arc<AtomicBool>>,
    /// Grace period between the polite stop and the forced kill.
    pub grace: Duration,
}

impl Default for LaunchOptions {
    fn default() -> LaunchOptions {
        LaunchOptions { collate: CollateMode::Prefix, cancel: None, grace: Duration::from_secs(5) }
    }
}

#[derive(Debug)]
pub struct LaunchReport {
    pub exit_code: i32,
    /// (rank, monotonic ns) per registration, in registration order.
    pub registrations: Vec<(usize, u128)>,
    /// Monotonic instant the release token went out, if it did.
    pub released_at_ns: Option<u128>,
    /// How many times the release was broadcast (always 0 or 1).
    pub releases_sent: u32,
    /// (rank, exit code) per child; `None` means killed by a signal.
    pub child_exits: Vec<(usize, Option<i32>)>,
    /// (monotonic ns, subjob index, phase) transitions.
    pub subjob_events: Vec<(u128, usize, SubjobPhase)>,
    /// Captured output lines (CollateMode::Capture only).
    pub captured: Vec<CapturedLine>,
    pub diagnostics: Vec<String>,
}

struct ChildProc {
    rank: usize,
    subjob: usize,
    child: Child,
    exit: Option<Option<i32>>,
}

impl ChildProc {
    fn pid(&self) -> libc::pid_t {
        self.child.id() as libc::pid_t
    }

    fn poll(&mut self) -> Option<Option<i32>> {
        if self.exit.is_none() {
            if let Ok(Some(status)) = self.child.try_wait() {
                self.exit = Some(status.code());
            }
        }
        self.exit
    }
}

/// Stop every still-running child: polite SIGTERM, a grace period, then
/// SIGKILL, then reap.
fn terminate_all(children: &mut [ChildProc], grace: Duration) {
    for c in children.iter_mut() {
        if c.poll().is_none() {
            unsafe {
                libc::kill(c.pid(), libc::SIGTERM);
            }
        }
    }
    let deadline = Instant::now() + grace;
    while Instant::now() < deadline {
        if children.iter_mut().all(|c| c.poll().is_some()) {
            return;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    for c in children.iter_mut() {
        if c.poll().is_none() {
            unsafe {
                libc::kill(c.pid(), libc::SIGKILL);
            }
            if let Ok(status) = c.child.wait() {
                c.exit = Some(status.code());
            }
        }
    }
}

struct JobState {
    children: Vec<ChildProc>,
    collators: Vec<std::thread::JoinHandle<()>>,
    events: Vec<(u128, usize, SubjobPhase)>,
    diagnostics: Vec<String>,
}

impl JobState {
    fn phase(&mut self, subjob: usize, phase: SubjobPhase) {
        self.events.push((monotonic_ns(), subjob, phase));
    }

    fn finish(
        mut self,
        exit_code: i32,
        registrations: Vec<(usize, u128)>,
        released_at_ns: Option<u128>,
        capture: Option<CaptureSink>,
    ) -> LaunchReport {
        let child_exits =
            self.children.iter_mut().map(|c| (c.rank, c.poll().unwrap_or(None))).collect();
        drop(self.children); // closes pipes so collators see EOF
        for t in self.collators {
            let _ = t.join();
        }
        LaunchReport {
            exit_code,
            registrations,
            released_at_ns,
            releases_sent: released_at_ns.map(|_| 1).unwrap_or(0),
            child_exits,
            subjob_events: self.events,
            captured: capture
                .map(|c| std::mem::take(&mut *c.lock().unwrap()))
                .unwrap_or_default(),
            diagnostics: self.diagnostics,
        }
    }
}

/// Launch a whole job and supervise it to completion. Exit code 0 means
/// every process exited 0.
pub fn launch(job: &JobDescription, opts: &LaunchOptions) -> Result<LaunchReport> {
    let layout: JobLayout = job.layout();
    let map = gridmp::compute_topology(&layout)?;
    let world_size = layout.world_size();

    let server = BootstrapServer::bind(&job.bind)?;
    let bootstrap_addr = server.local_addr()?.to_string();
    let salt = std::process::id() as u64 ^ (monotonic_ns() as u64);

    let capture: Option<CaptureSink> = match opts.collate {
        CollateMode::Capture => Some(Arc::new(Mutex::new(Vec::new()))),
        _ => None,
    };
    let mut state = JobState {
        children: Vec::with_capacity(world_size),
        collators: Vec::new(),
        events: Vec::new(),
        diagnostics: Vec::new(),
    };

    // Spawn every process with its bootstrap environment.
    for (j, sj) in job.subjobs.iter().enumerate() {
        state.phase(j, SubjobPhase::Pending);
        let vendor_key = sj.vendor.then(|| local_vendor_key(salt, j));
        for i in 0..sj.count {
            let rank = layout.base_rank(j) + i;
            let mut cmd = Command::new(&sj.exe);
            cmd.args(&sj.args)
                .env("GRIDMP_RANK", rank.to_string())
                .env("GRIDMP_SIZE", world_size.to_string())
                .env("GRIDMP_BOOTSTRAP", &bootstrap_addr)
                .env("GRIDMP_SUBJOB", j.to_string())
                .env("GRIDMP_TIMEOUT", (job.timeout.as_secs() + 10).to_string())
                .stdin(Stdio::null());
            if let Some(k) = &vendor_key {
                cmd.env("GRIDMP_VENDOR_KEY", k);
            }
            for (k, v) in &sj.extra_env {
                cmd.env(k, v);
            }
            match opts.collate {
                CollateMode::Inherit => {
                    cmd.stdout(Stdio::inherit()).stderr(Stdio::inherit());
                }
                _ => {
                    cmd.stdout(Stdio::piped()).stderr(Stdio::piped());
                }
            }
            let mut child = match cmd.spawn() {
                Ok(c) => c,
                Err(e) => {
                    state.diagnostics.push(format!(
                        "subjob {j} ({}): cannot start {:?}: {e}",
                        sj.site, sj.exe
                    ));
                    state.phase(j, SubjobPhase::Failed);
                    terminate_all(&mut state.children, opts.grace);
                    return Ok(state.finish(EXIT_STARTUP, Vec::new(), None, capture));
                }
            };
            if let Some(out) = child.stdout.take() {
                state.collators.push(spawn_collator(rank, StreamKind::Stdout, out, capture.clone()));
            }
            if let Some(errs) = child.stderr.take() {
                state.collators.push(spawn_collator(rank, StreamKind::Stderr, errs, capture.clone()));
            }
            state.children.push(ChildProc { rank, subjob: j, child, exit: None });
        }
    }

    // Registration phase: the rendezvous runs on its own thread while this
    // one supervises children and watches the interrupt flag.
    let collect_cancel = Arc::new(AtomicBool::new(false));
    let (reg_tx, reg_rx) = mpsc::channel::<(usize, u128)>();
    let (done_tx, done_rx) = mpsc::channel::<Result<Vec<Registered>>>();
    let timeout = job.timeout;
    let collect_thread = {
        let cancel = Arc::clone(&collect_cancel);
        std::thread::spawn(move || {
            let res = server.collect_with(world_size, timeout, Some(&cancel), |rank, ns| {
                let _ = reg_tx.send((rank, ns));
            });
            let _ = done_tx.send(res);
        })
    };

    let mut registrations: Vec<(usize, u128)> = Vec::new();
    let mut subjob_seen = vec![0usize; job.subjobs.len()];
    let mut interrupted = false;
    let mut early_failure: Option<String> = None;
    let mut drain_registrations =
        |state: &mut JobState, registrations: &mut Vec<(usize, u128)>| {
            for (rank, ns) in reg_rx.try_iter() {
                let j = layout.subjob_of_rank(rank).expect("registered rank within layout");
                if subjob_seen[j] == 0 {
                    state.phase(j, SubjobPhase::Running);
                }
                subjob_seen[j] += 1;
                if subjob_seen[j] == job.subjobs[j].count {
                    state.phase(j, SubjobPhase::AtBarrier);
                }
                registrations.push((rank, ns));
            }
        };
    let collected = loop {
        drain_registrations(&mut state, &mut registrations);
        if opts.cancel.as_ref().map(|c| c.load(Ordering::SeqCst)).unwrap_or(false) {
            interrupted = true;
            collect_cancel.store(true, Ordering::SeqCst);
        }
        // A child dying before release takes the whole job down.
        for c in state.children.iter_mut() {
            if let Some(code) = c.poll() {
                if code != Some(0) && early_failure.is_none() {
                    early_failure = Some(format!(
                        "rank {} (subjob {}) failed before the startup barrier (status {:?})",
                        c.rank, c.subjob, code
                    ));
                    collect_cancel.store(true, Ordering::SeqCst);
                }
            }
        }
        match done_rx.recv_timeout(Duration::from_millis(20)) {
            Ok(res) => break res,
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                break Err(Error::Startup("rendezvous thread vanished".into()));
            }
        }
    };
    let _ = collect_thread.join();
    drain_registrations(&mut state, &mut registrations);

    let mut clients = match collected {
        Ok(c) => c,
        Err(e) => {
            let (code, msg) = if interrupted {
                (EXIT_INTERRUPTED, "interrupted during startup".to_string())
            } else if let Some(f) = early_failure {
                (EXIT_STARTUP, f)
            } else {
                // Name the subjobs of the missing ranks alongside the ranks.
                let missing: Vec<String> = (0..world_size)
                    .filter(|r| !registrations.iter().any(|(rr, _)| rr == r))
                    .map(|r| format!("rank {r} (subjob {})", layout.subjob_of_rank(r).unwrap()))
                    .collect();
                (EXIT_STARTUP, format!("{e}; missing: {}", missing.join(", ")))
            };
            state.diagnostics.push(msg);
            for j in 0..job.subjobs.len() {
                state.phase(j, SubjobPhase::Failed);
            }
            terminate_all(&mut state.children, opts.grace);
            return Ok(state.finish(code, registrations, None, capture));
        }
    };

    // The startup barrier: everyone registered, release exactly once.
    let released_at = release_all(&mut clients, &map)?;
    drop(clients); // the launcher relays no application traffic
    for j in 0..job.subjobs.len() {
        state.phase(j, SubjobPhase::Released);
    }

    // Steady state: wait for children, honoring interrupts.
    let mut app_failed = false;
    loop {
        if opts.cancel.as_ref().map(|c| c.load(Ordering::SeqCst)).unwrap_or(false) {
            state.diagnostics.push("interrupted; terminating the job".into());
            terminate_all(&mut state.children, opts.grace);
            return Ok(state.finish(EXIT_INTERRUPTED, registrations, Some(released_at), capture));
        }
        let mut all_done = true;
        for c in state.children.iter_mut() {
            match c.poll() {
                Some(code) => {
                    if code != Some(0) {
                        app_failed = true;
                    }
                }
                None => all_done = false,
            }
        }
        if all_done {
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    for (j, sj) in job.subjobs.iter().enumerate() {
        let failed = state
            .children
            .iter_mut()
            .filter(|c| c.subjob == j)
            .any(|c| c.poll() != Some(Some(0)));
        state.phase(j, if failed { SubjobPhase::Failed } else { SubjobPhase::Exited });
        let _ = sj;
    }
    if app_failed {
        for c in state.children.iter_mut() {
            if let Some(code) = c.poll() {
                if code != Some(0) {
                    state
                        .diagnostics
                        .push(format!("rank {} exited with status {:?}", c.rank, code));
                }
            }
        }
    }
    let code = if app_failed { EXIT_APP } else { 0 };
    Ok(state.finish(code, registrations, Some(released_at), capture))
}
