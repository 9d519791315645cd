//! Minimal application used by launcher-level acceptance checks.

use std::io::Write;
use std::time::Duration;

fn main() {
    let mut delay_ms = 0u64;
    let mut hold_secs = 0u64;
    let mut print_released = false;
    let mut print_pid = false;

    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        let mut next_u64 = || args.next().and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
        match a.as_str() {
            "--delay-ms" => delay_ms = next_u64(),
            "--hold-secs" => hold_secs = next_u64(),
            "--print-released" => print_released = true,
            "--print-pid" => print_pid = true,
            other => {
                eprintln!("acc-app: unknown flag {other:?}");
                std::process::exit(64);
            }
        }
    }

    if delay_ms > 0 {
        std::thread::sleep(Duration::from_millis(delay_ms));
    }
    let rt = gridmp::Runtime::init().unwrap_or_else(|e| {
        eprintln!("init failed: {e}");
        std::process::exit(7);
    });
    if print_pid {
        println!("PID {}", std::process::id());
    }
    if print_released {
        println!("RELEASED {}", rt.released_at_ns().unwrap_or(0));
    }
    std::io::stdout().flush().unwrap();
    if hold_secs > 0 {
        std::thread::sleep(Duration::from_secs(hold_secs));
    }
    rt.finalize().unwrap();
}
