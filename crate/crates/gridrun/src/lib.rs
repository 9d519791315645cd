//! gridrun: parse a job description, spawn every subjob process locally,
//! run the rendezvous exchange, hold the job at the startup barrier until
//! the whole world has registered, collate child output, and tear the job
//! down on failure or interrupt.
//!
//! "Sites" and "machines" are labels: all processes run on this host and the
//! labels shape only the topology and method selection.

mod collate;
mod job;
mod launch;

pub use collate::{CapturedLine, CollateMode, StreamKind};
pub use job::{parse_job, JobDescription, LaunchSubjob};
pub use launch::{launch, LaunchOptions, LaunchReport, SubjobPhase};

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

/// Exit code for parse or validation failures.
pub const EXIT_PARSE: i32 = 2;
/// Exit code for startup failures (spawn, registration, release).
pub const EXIT_STARTUP: i32 = 3;
/// Exit code when an application process failed after release.
pub const EXIT_APP: i32 = 4;
/// Exit code after an interrupt-triggered teardown.
pub const EXIT_INTERRUPTED: i32 = 130;

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    unsafe {
        libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
        libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
    }
}

/// Entry point of the `gridrun` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    let mut jobfile: Option<String> = None;
    let mut timeout_override: Option<u64> = None;
    let mut collate = CollateMode::Prefix;
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "-f" | "--jobfile" => jobfile = args.next(),
            "--timeout" => match args.next().and_then(|s| s.parse().ok()) {
                Some(s) => timeout_override = Some(s),
                None => {
                    eprintln!("gridrun: --timeout needs a whole number of seconds");
                    return EXIT_PARSE;
                }
            },
            "--no-collate" => collate = CollateMode::Inherit,
            "-h" | "--help" => {
                println!("usage: gridrun -f <jobfile> [--timeout S] [--no-collate]");
                println!();
                println!("job file directives, one per line ('#' starts a comment):");
                println!("  subjob site=<word> machine=<word> count=<int> vendor=<true|false> \\");
                println!("         exe=<path> [-- <args...>]");
                println!("  option timeout=<seconds>");
                println!("  option bind=<host>");
                return 0;
            }
            other => {
                eprintln!("gridrun: unknown argument {other:?}");
                return EXIT_PARSE;
            }
        }
    }
    let Some(jobfile) = jobfile else {
        eprintln!("gridrun: a job file is required (-f <jobfile>)");
        return EXIT_PARSE;
    };
    let text = match std::fs::read_to_string(&jobfile) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("gridrun: cannot read {jobfile}: {e}");
            return EXIT_PARSE;
        }
    };
    let mut job = match parse_job(&text) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("gridrun: {e}");
            return EXIT_PARSE;
        }
    };
    if let Some(secs) = timeout_override {
        job.timeout = std::time::Duration::from_secs(secs);
    }

    install_signal_handlers();
    let cancel = Arc::new(AtomicBool::new(false));
    let opts = LaunchOptions {
        collate,
        cancel: Some(Arc::clone(&cancel)),
        ..LaunchOptions::default()
    };
    // Bridge the process-wide signal flag into the launch cancel flag.
    let watcher_stop = Arc::new(AtomicBool::new(false));
    let watcher = {
        let cancel = Arc::clone(&cancel);
        let stop = Arc::clone(&watcher_stop);
        std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                if INTERRUPTED.load(Ordering::SeqCst) {
                    cancel.store(true, Ordering::SeqCst);
                    return;
                }
                std::thread::sleep(std::time::Duration::from_millis(20));
            }
        })
    };

    let report = launch(&job, &opts);
    watcher_stop.store(true, Ordering::SeqCst);
    let _ = watcher.join();
    match report {
        Ok(r) => {
            for d in &r.diagnostics {
                eprintln!("gridrun: {d}");
            }
            r.exit_code
        }
        Err(e) => {
            eprintln!("gridrun: {e}");
            EXIT_STARTUP
        }
    }
}
