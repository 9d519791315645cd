//! Desk-scale job harness: runs a whole multi-rank job inside one process,
//! one thread per rank, with a real rendezvous exchange and real sockets.
//! Used by tests and benchmarks; the launcher covers the multi-process path.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use crate::comm::{BootstrapConfig, Runtime};
use crate::error::{Error, Result};
use crate::rendezvous::{release_all, BootstrapServer};
use crate::topology::{compute_topology, JobLayout};

static JOB_SALT: AtomicU64 = AtomicU64::new(0);

/// Vendor rendezvous key for one subjob of a local job.
pub fn local_vendor_key(salt: u64, subjob: usize) -> String {
    format!("gridmp-{}-{}-j{}", std::process::id(), salt, subjob)
}

/// Run `f` once per rank of `layout`, each rank on its own thread with a
/// fully bootstrapped runtime. Returns the per-rank results in rank order.
pub fn run_local_job<F, R>(layout: &JobLayout, f: F) -> Result<Vec<R>>
where
    F: Fn(Runtime) -> R + Send + Sync,
    R: Send,
{
    let map = compute_topology(layout)?;
    let n = layout.world_size();
    let server = BootstrapServer::bind("127.0.0.1")?;
    let addr = server.local_addr()?.to_string();
    let salt = JOB_SALT.fetch_add(1, Ordering::Relaxed);
    let trace = std::env::var("GRIDMP_TRACE").as_deref() == Ok("1");

    let vendor_keys: Vec<Option<String>> = layout
        .subjobs
        .iter()
        .enumerate()
        .map(|(j, s)| s.vendor.then(|| local_vendor_key(salt, j)))
        .collect();

    std::thread::scope(|scope| {
        let server_thread = scope.spawn(|| -> Result<u128> {
            let mut regs = server.collect(n, Duration::from_secs(60), None)?;
            release_all(&mut regs, &map)
        });

        let mut workers = Vec::with_capacity(n);
        for rank in 0..n {
            let subjob = layout.subjob_of_rank(rank).expect("rank within layout");
            let cfg = BootstrapConfig {
                rank,
                size: n,
                bootstrap: Some(addr.clone()),
                subjob,
                vendor_key: vendor_keys[subjob].clone(),
                tcp_bind: None,
                timeout: Duration::from_secs(60),
                trace,
                ..BootstrapConfig::default()
            };
            let f = &f;
            workers.push(
                std::thread::Builder::new()
                    .name(format!("gridmp-rank-{rank}"))
                    .spawn_scoped(scope, move || -> Result<R> {
                        let rt = Runtime::init_with(cfg)?;
                        Ok(f(rt))
                    })
                    .expect("spawning worker thread"),
            );
        }

        let mut results = Vec::with_capacity(n);
        for (rank, w) in workers.into_iter().enumerate() {
            match w.join() {
                Ok(r) => results.push(r?),
                Err(p) => {
                    let msg = p
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "worker panicked".into());
                    return Err(Error::Usage(format!("rank {rank} panicked: {msg}")));
                }
            }
        }
        server_thread
            .join()
            .map_err(|_| Error::Startup("bootstrap server thread panicked".into()))??;
        Ok(results)
    })
}
