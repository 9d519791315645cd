//! Benchmark scenarios over a live runtime, mpptest style: ping-pong
//! latency/bandwidth, receive-category overhead, and per-level message
//! counts of the collective algorithms. Every scenario yields CSV rows;
//! rank 0 owns the output.

use std::time::{Duration, Instant};

use gridmp::{
    select_method, CollAlgo, Error, LevelCounts, Method, RecvSource, RecvTag, ReduceOp, Result,
    Runtime, WORLD,
};

pub const PINGPONG_HEADER: &str = "size_bytes,reps,latency_us,bandwidth_bps,low_confidence";
pub const CATEGORY_HEADER: &str = "category,reps,median_latency_us,vendor_probes,tcp_polls";
pub const BCAST_HEADER: &str =
    "algo,size_bytes,reps,median_time_us,wide_area_msgs,local_area_msgs,system_area_msgs,vendor_msgs";

#[derive(Debug, Clone, PartialEq)]
pub struct PingpongRow {
    pub size_bytes: usize,
    pub reps: usize,
    /// Half the median round trip, in microseconds.
    pub latency_us: f64,
    pub bandwidth_bps: f64,
    pub low_confidence: bool,
}

impl PingpongRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.3},{:.0},{}",
            self.size_bytes,
            self.reps,
            self.latency_us,
            self.bandwidth_bps,
            self.low_confidence as u8
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryRow {
    pub category: String,
    pub reps: usize,
    pub median_latency_us: f64,
    pub vendor_probes: u64,
    pub tcp_polls: u64,
}

impl CategoryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.3},{},{}",
            self.category, self.reps, self.median_latency_us, self.vendor_probes, self.tcp_polls
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcastRow {
    pub algo: String,
    pub size_bytes: usize,
    pub reps: usize,
    pub median_time_us: f64,
    pub counts: LevelCounts,
}

impl BcastRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.3},{},{},{},{}",
            self.algo,
            self.size_bytes,
            self.reps,
            self.median_time_us,
            self.counts.wide_area,
            self.counts.local_area,
            self.counts.system_area,
            self.counts.vendor
        )
    }
}

fn warmup_for(reps: usize) -> usize {
    (reps / 10).min(100)
}

fn median_us(samples: &mut [Duration]) -> f64 {
    samples.sort();
    samples[samples.len() / 2].as_nanos() as f64 / 1000.0
}

/// Two-rank ping-pong over whatever method connects ranks 0 and 1. Returns
/// rows at rank 0, an empty vector elsewhere.
pub fn pingpong(rt: &mut Runtime, sizes: &[usize], reps: usize) -> Result<Vec<PingpongRow>> {
    if rt.size() != 2 {
        return Err(Error::Usage(format!(
            "pingpong needs exactly 2 ranks, got {}",
            rt.size()
        )));
    }
    if reps == 0 {
        return Err(Error::Usage("reps must be >= 1".into()));
    }
    let me = rt.rank();
    let peer = 1 - me;
    let mut rows = Vec::new();
    for &size in sizes {
        let payload = vec![0u8; size];
        let mut buf = vec![0u8; size];
        let warmup = warmup_for(reps);
        let mut samples = Vec::with_capacity(reps);
        for i in 0..reps + warmup {
            if me == 0 {
                let t0 = Instant::now();
                rt.send(&payload, peer, 1, WORLD)?;
                rt.recv(&mut buf, RecvSource::Rank(peer), RecvTag::Tag(1), WORLD)?;
                if i >= warmup {
                    samples.push(t0.elapsed());
                }
            } else {
                rt.recv(&mut buf, RecvSource::Rank(peer), RecvTag::Tag(1), WORLD)?;
                rt.send(&buf, peer, 1, WORLD)?;
            }
        }
        if me == 0 {
            let latency_us = median_us(&mut samples) / 2.0;
            rows.push(PingpongRow {
                size_bytes: size,
                reps,
                latency_us,
                bandwidth_bps: if latency_us > 0.0 {
                    size as f64 / (latency_us / 1e6)
                } else {
                    0.0
                },
                low_confidence: reps < 2,
            });
        }
    }
    Ok(rows)
}

const TAG_PING: i32 = 1;
const TAG_NEVER: i32 = 777;
const TAG_DONE: i32 = 900;

/// Receive-category overhead: the same vendor-channel ping-pong measured
/// under the three receive contexts. Needs ranks 0 and 1 on one machine
/// with the vendor method and at least one TCP-method rank in the world.
pub fn category_bench(rt: &mut Runtime, reps: usize) -> Result<Vec<CategoryRow>> {
    let map = rt.topology().clone();
    if rt.size() < 3 || select_method(&map, 0, 1) != Method::Vendor {
        return Err(Error::Usage(
            "category bench needs ranks 0,1 sharing the vendor method plus a TCP rank".into(),
        ));
    }
    let tcp_rank = (0..rt.size())
        .find(|&r| select_method(&map, 0, r) == Method::Tcp && r != 0)
        .ok_or_else(|| Error::Usage("no TCP-method rank in the world".into()))?;

    let me = rt.rank();
    match me {
        0 => {
            // Open the TCP channel so multimethod polling has a live socket.
            let mut sync = [0u8; 1];
            rt.send(&[1u8], tcp_rank, TAG_PING, WORLD)?;
            rt.recv(&mut sync, RecvSource::Rank(tcp_rank), RecvTag::Tag(TAG_PING), WORLD)?;

            let mut rows = Vec::new();
            let warmup = warmup_for(reps);
            let measure = |rt: &mut Runtime,
                               name: &str,
                               any_source: bool|
             -> Result<CategoryRow> {
                let c0 = rt.poll_counters();
                let mut samples = Vec::with_capacity(reps);
                let mut buf = [0u8; 1];
                for i in 0..reps + warmup {
                    let t0 = Instant::now();
                    rt.send(&[0u8], 1, TAG_PING, WORLD)?;
                    let source =
                        if any_source { RecvSource::Any } else { RecvSource::Rank(1) };
                    rt.recv(&mut buf, source, RecvTag::Tag(TAG_PING), WORLD)?;
                    if i >= warmup {
                        samples.push(t0.elapsed());
                    }
                }
                let c1 = rt.poll_counters();
                Ok(CategoryRow {
                    category: name.into(),
                    reps,
                    median_latency_us: median_us(&mut samples) / 2.0,
                    vendor_probes: c1.vendor_probes - c0.vendor_probes,
                    tcp_polls: c1.tcp_polls - c0.tcp_polls,
                })
            };

            // Specified: concrete same-machine source, nothing outstanding.
            rows.push(measure(rt, "specified", false)?);

            // Specified-pending: one incomplete same-machine irecv stays
            // outstanding across the measurement.
            let pending = rt.irecv::<u8>(1, RecvSource::Rank(1), RecvTag::Tag(TAG_NEVER), WORLD)?;
            rows.push(measure(rt, "specified_pending", false)?);
            rt.send(&[0u8], 1, TAG_DONE, WORLD)?; // ask for the tag-777 filler
            let _ = rt.wait_recv::<u8>(pending)?;

            // Multimethod: wildcard source over the mixed world.
            rows.push(measure(rt, "multimethod", true)?);

            rt.send(&[0u8], 1, TAG_DONE, WORLD)?;
            rt.send(&[0u8], tcp_rank, TAG_DONE, WORLD)?;
            Ok(rows)
        }
        1 => {
            let warmup = warmup_for(reps);
            let mut buf = [0u8; 1];
            for phase in 0..3 {
                for _ in 0..reps + warmup {
                    rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(TAG_PING), WORLD)?;
                    rt.send(&buf, 0, TAG_PING, WORLD)?;
                }
                if phase == 1 {
                    rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(TAG_DONE), WORLD)?;
                    rt.send(&[7u8], 0, TAG_NEVER, WORLD)?;
                }
            }
            rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(TAG_DONE), WORLD)?;
            Ok(Vec::new())
        }
        r if r == tcp_rank => {
            let mut buf = [0u8; 1];
            rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(TAG_PING), WORLD)?;
            rt.send(&buf, 0, TAG_PING, WORLD)?;
            rt.recv(&mut buf, RecvSource::Rank(0), RecvTag::Tag(TAG_DONE), WORLD)?;
            Ok(Vec::new())
        }
        _ => Ok(Vec::new()),
    }
}

/// Broadcast timing and per-level message counts for one algorithm across
/// message sizes. Rows come back at rank 0.
pub fn bcast_bench(
    rt: &mut Runtime,
    algo: CollAlgo,
    sizes: &[usize],
    reps: usize,
) -> Result<Vec<BcastRow>> {
    if reps == 0 {
        return Err(Error::Usage("reps must be >= 1".into()));
    }
    let me = rt.rank();
    let mut rows = Vec::new();
    for &size in sizes {
        let mut buf = vec![me as u8; size];
        let mut samples = Vec::with_capacity(reps);
        let mut local = LevelCounts::default();
        let warmup = warmup_for(reps);
        for i in 0..reps + warmup {
            if me == 0 {
                buf.fill(0x5a);
            }
            rt.barrier(WORLD)?;
            let t0 = Instant::now();
            rt.bcast_with(algo, &mut buf, 0, WORLD)?;
            if i == warmup {
                local = rt.last_coll_counts();
            }
            if i >= warmup {
                samples.push(t0.elapsed());
            }
        }
        // Aggregate the per-rank counts of one representative broadcast.
        let mine = local.as_array().map(|v| v as i64);
        let total = rt.reduce(&mine, ReduceOp::Sum, 0, WORLD)?;
        if me == 0 {
            let total = total.expect("root holds the reduction");
            rows.push(BcastRow {
                algo: match algo {
                    CollAlgo::Multilevel => "multilevel".into(),
                    CollAlgo::Binomial => "binomial".into(),
                },
                size_bytes: size,
                reps,
                median_time_us: median_us(&mut samples),
                counts: LevelCounts::from_array([
                    total[0] as u64,
                    total[1] as u64,
                    total[2] as u64,
                    total[3] as u64,
                ]),
            });
        }
    }
    Ok(rows)
}

/// Render rows with their documented header.
pub fn to_csv<R>(header: &str, rows: &[R], line: impl Fn(&R) -> String) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
