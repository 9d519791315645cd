//! Scriptable test application for launcher tests: initializes the runtime,
//! prints whatever the flags ask for, then exits how it is told to.

use std::io::Write;
use std::time::Duration;

fn main() {
    let mut lines = 0usize;
    let mut exit_code = 0i32;
    let mut delay_ms = 0u64;
    let mut hold_secs = 0u64;
    let mut partial = false;
    let mut print_released = false;
    let mut print_pid = false;
    let mut skip_init = false;
    let mut bcast_counts = false;

    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        let mut next_u64 = || args.next().and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
        match a.as_str() {
            "--lines" => lines = next_u64() as usize,
            "--exit" => exit_code = next_u64() as i32,
            "--delay-ms" => delay_ms = next_u64(),
            "--hold-secs" => hold_secs = next_u64(),
            "--partial" => partial = true,
            "--print-released" => print_released = true,
            "--print-pid" => print_pid = true,
            "--skip-init" => skip_init = true,
            "--bcast-counts" => bcast_counts = true,
            other => {
                eprintln!("gridmp-testapp: unknown flag {other:?}");
                std::process::exit(64);
            }
        }
    }

    if delay_ms > 0 {
        std::thread::sleep(Duration::from_millis(delay_ms));
    }
    if skip_init {
        // Simulates a subjob that starts but never reaches the rendezvous.
        std::thread::sleep(Duration::from_secs(600));
        return;
    }

    let mut rt = match gridmp::Runtime::init() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("init failed: {e}");
            std::process::exit(7);
        }
    };
    let rank = rt.rank();

    if bcast_counts {
        // Broadcast with the environment-selected default algorithm and
        // report this rank's per-level send counts.
        let mut buf = [rank as i32; 4];
        rt.bcast(&mut buf, 0, gridmp::WORLD).unwrap();
        let c = rt.last_coll_counts();
        println!("COUNTS {rank} {} {} {} {}", c.wide_area, c.local_area, c.system_area, c.vendor);
    }

    if print_pid {
        println!("PID {}", std::process::id());
    }
    if print_released {
        println!("RELEASED {}", rt.released_at_ns().unwrap_or(0));
    }
    for i in 0..lines {
        println!("line {rank} {i}");
    }
    if partial {
        print!("partial-tail-{rank}");
        std::io::stdout().flush().unwrap();
    }
    if hold_secs > 0 {
        std::io::stdout().flush().unwrap();
        std::thread::sleep(Duration::from_secs(hold_secs));
    }
    rt.finalize().unwrap();
    std::process::exit(exit_code);
}
