//! The application-facing surface: initialization, communicators,
//! point-to-point operations, topology attributes, and collectives.

use std::net::{IpAddr, TcpListener};
use std::time::Duration;

use crate::collectives::{binomial_schedule, build_schedule, CollAlgo, LevelCounts};
use crate::error::{Error, Result};
use crate::progress::{Engine, EngineStats, ReqKind, SourceSel, TagSel};
use crate::rendezvous::register_and_wait;
use crate::topology::TopologyMap;
use crate::transport::{vendor_listen, Acceptor, ChannelStats, Endpoint};
use crate::wire::{as_bytes, Dtype, WireData};

pub use crate::progress::PollCounters;

/// Communicator attribute key for the per-rank topology depths.
pub const ATTR_TOPOLOGY_DEPTHS: i32 = 1;
/// Communicator attribute key for the per-rank color vectors.
pub const ATTR_TOPOLOGY_COLORS: i32 = 2;

/// Source selector for receives, in communicator ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecvSource {
    Rank(usize),
    Any,
}

/// Tag selector for receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecvTag {
    Tag(i32),
    Any,
}

/// Completion information of a receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Status {
    /// Communicator rank of the sender.
    pub source: usize,
    pub tag: i32,
    /// Elements received.
    pub count: usize,
}

/// What `iprobe` reports about a pending message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    pub source: usize,
    pub tag: i32,
    pub dtype: Dtype,
    pub count: usize,
}

/// Handle to an in-flight nonblocking operation. Move-only: waiting consumes
/// the handle, so a completed-and-freed request cannot be waited on again.
#[derive(Debug)]
pub struct Request {
    id: usize,
    kind: ReqKind,
    dtype: Dtype,
    comm: CommId,
}

/// Outcome of a nonblocking completion test.
pub enum RecvTest<T> {
    Ready(Vec<T>, Status),
    Pending(Request),
}

/// Color argument of `comm_split`. Any integer (negatives included) is an
/// ordinary color; `Undefined` opts out and yields no communicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitColor {
    Color(i32),
    Undefined,
}

/// Element-wise reduction operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
}

/// Payload types reductions are defined for. Byte payloads reject every op.
pub trait Reducible: WireData {
    fn combine(op: ReduceOp, a: Self, b: Self) -> Result<Self>;
}

impl Reducible for i32 {
    fn combine(op: ReduceOp, a: Self, b: Self) -> Result<Self> {
        Ok(match op {
            ReduceOp::Sum => a.wrapping_add(b),
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        })
    }
}

impl Reducible for i64 {
    fn combine(op: ReduceOp, a: Self, b: Self) -> Result<Self> {
        Ok(match op {
            ReduceOp::Sum => a.wrapping_add(b),
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        })
    }
}

impl Reducible for f64 {
    fn combine(op: ReduceOp, a: Self, b: Self) -> Result<Self> {
        Ok(match op {
            ReduceOp::Sum => a + b,
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        })
    }
}

impl Reducible for u8 {
    fn combine(_op: ReduceOp, _a: Self, _b: Self) -> Result<Self> {
        Err(Error::Usage("reduction operations are undefined for byte payloads".into()))
    }
}

/// Communicator handle. The world communicator is `WORLD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommId(usize);

pub const WORLD: CommId = CommId(0);

/// Communicator-relative topology view, cached at communicator creation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyAttributes {
    pub depths: Vec<usize>,
    pub colors: Vec<Vec<i32>>,
}

impl TopologyAttributes {
    fn for_members(map: &TopologyMap, members: &[usize]) -> TopologyAttributes {
        TopologyAttributes {
            depths: members.iter().map(|&r| map.depth(r)).collect(),
            colors: members.iter().map(|&r| map.colors(r).to_vec()).collect(),
        }
    }
}

/// A borrowed attribute value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttrValue<'a> {
    Depths(&'a [usize]),
    Colors(&'a [Vec<i32>]),
}

struct CommState {
    ctx_p2p: i32,
    ctx_coll: i32,
    members: Vec<usize>,
    my_index: usize,
    attrs: TopologyAttributes,
    coll_seq: i32,
}

/// How a process finds its place in the world; normally read from the
/// bootstrap environment set by the launcher.
#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub rank: usize,
    pub size: usize,
    /// host:port of the launcher rendezvous; `None` runs a single-process
    /// world without a launcher.
    pub bootstrap: Option<String>,
    pub subjob: usize,
    pub vendor_key: Option<String>,
    pub tcp_bind: Option<IpAddr>,
    pub timeout: Duration,
    pub trace: bool,
    pub coll_default: CollAlgo,
}

impl Default for BootstrapConfig {
    fn default() -> BootstrapConfig {
        BootstrapConfig {
            rank: 0,
            size: 1,
            bootstrap: None,
            subjob: 0,
            vendor_key: None,
            tcp_bind: None,
            timeout: Duration::from_secs(600),
            trace: false,
            coll_default: CollAlgo::Multilevel,
        }
    }
}

impl BootstrapConfig {
    /// Read the GRIDMP_* environment set by gridrun. Without
    /// GRIDMP_BOOTSTRAP this falls back to a single-process world.
    pub fn from_env() -> Result<BootstrapConfig> {
        let get = |k: &str| std::env::var(k).ok();
        let mut cfg = BootstrapConfig {
            trace: get("GRIDMP_TRACE").as_deref() == Some("1"),
            ..BootstrapConfig::default()
        };
        if let Some(algo) = get("GRIDMP_COLL") {
            cfg.coll_default = match algo.as_str() {
                "multilevel" => CollAlgo::Multilevel,
                "binomial" => CollAlgo::Binomial,
                other => {
                    return Err(Error::Startup(format!("GRIDMP_COLL={other:?} is not an algorithm")))
                }
            };
        }
        if let Some(bind) = get("GRIDMP_TCP_BIND") {
            cfg.tcp_bind = Some(
                bind.parse()
                    .map_err(|_| Error::Startup(format!("GRIDMP_TCP_BIND={bind:?} is not an address")))?,
            );
        }
        if let Some(t) = get("GRIDMP_TIMEOUT") {
            let secs: u64 = t
                .parse()
                .map_err(|_| Error::Startup(format!("GRIDMP_TIMEOUT={t:?} is not a number")))?;
            cfg.timeout = Duration::from_secs(secs);
        }

        let bootstrap = get("GRIDMP_BOOTSTRAP");
        if bootstrap.is_none() {
            return Ok(cfg);
        }
        cfg.bootstrap = bootstrap;
        let need = |k: &str| {
            get(k).ok_or_else(|| Error::Startup(format!("{k} is missing from the environment")))
        };
        cfg.rank = need("GRIDMP_RANK")?
            .parse()
            .map_err(|_| Error::Startup("GRIDMP_RANK is not a number".into()))?;
        cfg.size = need("GRIDMP_SIZE")?
            .parse()
            .map_err(|_| Error::Startup("GRIDMP_SIZE is not a number".into()))?;
        cfg.subjob = get("GRIDMP_SUBJOB")
            .map(|s| s.parse().map_err(|_| Error::Startup("GRIDMP_SUBJOB is not a number".into())))
            .transpose()?
            .unwrap_or(0);
        cfg.vendor_key = get("GRIDMP_VENDOR_KEY");
        if cfg.size == 0 || cfg.rank >= cfg.size {
            return Err(Error::Startup(format!(
                "rank {} out of range for world size {}",
                cfg.rank, cfg.size
            )));
        }
        Ok(cfg)
    }
}

/// A per-process runtime instance. All calls happen on one application
/// thread; blocking calls drive the progress engine internally.
pub struct Runtime {
    engine: Engine,
    comms: Vec<Option<CommState>>,
    next_ctx: i32,
    coll_default: CollAlgo,
    subjob: usize,
    released_at_ns: Option<u128>,
    last_coll_counts: LevelCounts,
}

impl Runtime {
    /// Initialize from the bootstrap environment (the gridrun path).
    pub fn init() -> Result<Runtime> {
        Runtime::init_with(BootstrapConfig::from_env()?)
    }

    /// Initialize with an explicit configuration (harness and tests).
    pub fn init_with(cfg: BootstrapConfig) -> Result<Runtime> {
        let bind = cfg.tcp_bind.unwrap_or_else(|| "127.0.0.1".parse().unwrap());
        let listener = TcpListener::bind((bind, 0))
            .map_err(|e| Error::Startup(format!("binding the message listener: {e}")))?;
        let tcp_addr = listener.local_addr().map_err(|e| Error::Startup(e.to_string()))?;
        let vendor_listener = match &cfg.vendor_key {
            Some(key) => Some(vendor_listen(key, cfg.rank)?),
            None => None,
        };
        let vendor_capable = vendor_listener.is_some();
        let acceptor = Acceptor::spawn(cfg.rank, listener, vendor_listener)
            .map_err(|e| Error::Startup(format!("spawning the acceptor: {e}")))?;
        let my_endpoint =
            Endpoint { world_rank: cfg.rank, tcp_addr, vendor_key: cfg.vendor_key.clone() };

        let (map, endpoints, released_at_ns) = match &cfg.bootstrap {
            Some(addr) => {
                let res = register_and_wait(addr, &my_endpoint, cfg.timeout)?;
                if res.map.world_size() != cfg.size {
                    return Err(Error::Startup(format!(
                        "world size mismatch: launcher says {}, environment says {}",
                        res.map.world_size(),
                        cfg.size
                    )));
                }
                (res.map, res.endpoints, Some(res.released_at_ns))
            }
            None => {
                if cfg.size != 1 {
                    return Err(Error::Startup(
                        "GRIDMP_BOOTSTRAP is required for multi-process worlds".into(),
                    ));
                }
                (TopologyMap::singleton(), vec![my_endpoint], None)
            }
        };

        let world_size = map.world_size();
        let engine = Engine::new(cfg.rank, map, endpoints, acceptor, vendor_capable, cfg.trace);
        let world = CommState {
            ctx_p2p: 0,
            ctx_coll: 1,
            members: (0..world_size).collect(),
            my_index: cfg.rank,
            attrs: TopologyAttributes::for_members(engine.map(), &(0..world_size).collect::<Vec<_>>()),
            coll_seq: 0,
        };
        Ok(Runtime {
            engine,
            comms: vec![Some(world)],
            next_ctx: 2,
            coll_default: cfg.coll_default,
            subjob: cfg.subjob,
            released_at_ns,
            last_coll_counts: LevelCounts::default(),
        })
    }

    /// Shut the runtime down. Dropping does the same; this form surfaces it
    /// in application code.
    pub fn finalize(mut self) -> Result<()> {
        self.engine.shutdown();
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.engine.self_rank()
    }

    pub fn size(&self) -> usize {
        self.engine.map().world_size()
    }

    pub fn subjob(&self) -> usize {
        self.subjob
    }

    pub fn topology(&self) -> &TopologyMap {
        self.engine.map()
    }

    /// Monotonic instant at which this process passed the startup barrier.
    pub fn released_at_ns(&self) -> Option<u128> {
        self.released_at_ns
    }

    pub fn poll_counters(&self) -> PollCounters {
        self.engine.polls
    }

    pub fn reset_poll_counters(&mut self) {
        self.engine.reset_poll_counters();
    }

    pub fn channel_stats(&self) -> Vec<ChannelStats> {
        self.engine.channel_stats()
    }

    pub fn engine_stats(&self) -> EngineStats {
        self.engine.stats()
    }

    /// Per-rank level classification of the messages this rank sent during
    /// the most recent collective call.
    pub fn last_coll_counts(&self) -> LevelCounts {
        self.last_coll_counts
    }

    fn comm(&self, id: CommId) -> Result<&CommState> {
        self.comms
            .get(id.0)
            .and_then(|c| c.as_ref())
            .ok_or_else(|| Error::Usage(format!("communicator {} is freed or invalid", id.0)))
    }

    fn comm_mut(&mut self, id: CommId) -> Result<&mut CommState> {
        self.comms
            .get_mut(id.0)
            .and_then(|c| c.as_mut())
            .ok_or_else(|| Error::Usage(format!("communicator {} is freed or invalid", id.0)))
    }

    pub fn comm_rank(&self, comm: CommId) -> Result<usize> {
        Ok(self.comm(comm)?.my_index)
    }

    pub fn comm_size(&self, comm: CommId) -> Result<usize> {
        Ok(self.comm(comm)?.members.len())
    }

    /// World ranks of the members, in communicator order.
    pub fn comm_members(&self, comm: CommId) -> Result<&[usize]> {
        Ok(&self.comm(comm)?.members)
    }

    pub fn comm_free(&mut self, comm: CommId) -> Result<()> {
        if comm == WORLD {
            return Err(Error::Usage("the world communicator cannot be freed".into()));
        }
        self.comm(comm)?;
        self.comms[comm.0] = None;
        Ok(())
    }

    /// Cached topology attributes: found keys yield a borrowed view, unknown
    /// keys yield `None`.
    pub fn attr_get(&self, comm: CommId, key: i32) -> Result<Option<AttrValue<'_>>> {
        let c = self.comm(comm)?;
        Ok(match key {
            ATTR_TOPOLOGY_DEPTHS => Some(AttrValue::Depths(&c.attrs.depths)),
            ATTR_TOPOLOGY_COLORS => Some(AttrValue::Colors(&c.attrs.colors)),
            _ => None,
        })
    }

    fn check_tag(tag: i32) -> Result<i32> {
        if tag < 0 {
            return Err(Error::Usage(format!("tag {tag} is negative; wildcards are receive-only")));
        }
        Ok(tag)
    }

    fn world_of(&self, comm: CommId, rank: usize) -> Result<usize> {
        let c = self.comm(comm)?;
        c.members.get(rank).copied().ok_or_else(|| {
            Error::Usage(format!("rank {rank} out of range for a size-{} communicator", c.members.len()))
        })
    }

    fn status_of(&self, comm: CommId, source_world: usize, tag: i32, bytes: usize, dtype: Dtype) -> Result<Status> {
        let c = self.comm(comm)?;
        let source = c
            .members
            .iter()
            .position(|&m| m == source_world)
            .ok_or_else(|| Error::Usage(format!("message from non-member world rank {source_world}")))?;
        Ok(Status { source, tag, count: bytes / dtype.elem_size() })
    }

    /// Blocking standard-mode send.
    pub fn send<T: WireData>(
        &mut self,
        data: &[T],
        dest: usize,
        tag: i32,
        comm: CommId,
    ) -> Result<()> {
        let tag = Self::check_tag(tag)?;
        let dest_world = self.world_of(comm, dest)?;
        let ctx = self.comm(comm)?.ctx_p2p;
        self.engine.send_bytes(dest_world, ctx, tag, T::DTYPE, as_bytes(data))
    }

    fn post_recv<T: WireData>(
        &mut self,
        capacity_elems: usize,
        source: RecvSource,
        tag: RecvTag,
        comm: CommId,
    ) -> Result<usize> {
        let c = self.comm(comm)?;
        let ctx = c.ctx_p2p;
        let (src_sel, scope) = match source {
            RecvSource::Rank(r) => {
                let w = c.members.get(r).copied().ok_or_else(|| {
                    Error::Usage(format!(
                        "rank {r} out of range for a size-{} communicator",
                        c.members.len()
                    ))
                })?;
                (SourceSel::World(w), None)
            }
            RecvSource::Any => (SourceSel::Any, Some(c.members.clone())),
        };
        let tag_sel = match tag {
            RecvTag::Tag(t) => TagSel::Exact(Self::check_tag(t)?),
            RecvTag::Any => TagSel::Any,
        };
        Ok(self.engine.post_recv(
            ctx,
            src_sel,
            tag_sel,
            capacity_elems * T::DTYPE.elem_size(),
            scope,
        ))
    }

    /// Blocking receive into a caller buffer. A message longer than the
    /// buffer is a truncation error.
    pub fn recv<T: WireData>(
        &mut self,
        buf: &mut [T],
        source: RecvSource,
        tag: RecvTag,
        comm: CommId,
    ) -> Result<Status> {
        let id = self.post_recv::<T>(buf.len(), source, tag, comm)?;
        self.engine.wait_till_done(id)?;
        let completion = self.engine.take_completion(id)?;
        let bytes = completion.data.len();
        unsafe {
            std::ptr::copy_nonoverlapping(
                completion.data.as_ptr(),
                buf.as_mut_ptr() as *mut u8,
                bytes,
            );
        }
        self.status_of(comm, completion.source_world, completion.tag, bytes, T::DTYPE)
    }

    /// Nonblocking send. The eager push happens immediately; the request is
    /// complete on return and exists for call-shape symmetry.
    pub fn isend<T: WireData>(
        &mut self,
        data: &[T],
        dest: usize,
        tag: i32,
        comm: CommId,
    ) -> Result<Request> {
        self.send(data, dest, tag, comm)?;
        let id = self.engine.mark_send_done();
        Ok(Request { id, kind: ReqKind::Send, dtype: T::DTYPE, comm })
    }

    /// Nonblocking receive of up to `count` elements.
    pub fn irecv<T: WireData>(
        &mut self,
        count: usize,
        source: RecvSource,
        tag: RecvTag,
        comm: CommId,
    ) -> Result<Request> {
        let id = self.post_recv::<T>(count, source, tag, comm)?;
        Ok(Request { id, kind: ReqKind::Recv, dtype: T::DTYPE, comm })
    }

    /// Block until a receive completes; returns its data and status.
    pub fn wait_recv<T: WireData>(&mut self, req: Request) -> Result<(Vec<T>, Status)> {
        if req.kind != ReqKind::Recv {
            return Err(Error::Usage("wait_recv on a send request".into()));
        }
        if req.dtype != T::DTYPE {
            return Err(Error::Usage("wait_recv element type differs from irecv".into()));
        }
        self.engine.wait_till_done(req.id)?;
        let completion = self.engine.take_completion(req.id)?;
        let status =
            self.status_of(req.comm, completion.source_world, completion.tag, completion.data.len(), T::DTYPE)?;
        Ok((crate::wire::from_bytes(&completion.data)?, status))
    }

    /// Complete a send request.
    pub fn wait_send(&mut self, req: Request) -> Result<()> {
        if req.kind != ReqKind::Send {
            return Err(Error::Usage("wait_send on a receive request".into()));
        }
        self.engine.drop_req(req.id)
    }

    /// Nonblocking completion test for a receive.
    pub fn test_recv<T: WireData>(&mut self, req: Request) -> Result<RecvTest<T>> {
        if req.kind != ReqKind::Recv || req.dtype != T::DTYPE {
            return Err(Error::Usage("test_recv on a mismatched request".into()));
        }
        if !self.engine.test_round(req.id)? {
            return Ok(RecvTest::Pending(req));
        }
        let completion = self.engine.take_completion(req.id)?;
        let status =
            self.status_of(req.comm, completion.source_world, completion.tag, completion.data.len(), T::DTYPE)?;
        Ok(RecvTest::Ready(crate::wire::from_bytes(&completion.data)?, status))
    }

    /// Nonblocking probe for a matching message; never blocks, never
    /// consumes.
    pub fn iprobe(
        &mut self,
        source: RecvSource,
        tag: RecvTag,
        comm: CommId,
    ) -> Result<Option<Envelope>> {
        let c = self.comm(comm)?;
        let ctx = c.ctx_p2p;
        let (src_sel, scope) = match source {
            RecvSource::Rank(r) => {
                let w = c.members.get(r).copied().ok_or_else(|| {
                    Error::Usage(format!(
                        "rank {r} out of range for a size-{} communicator",
                        c.members.len()
                    ))
                })?;
                (SourceSel::World(w), None)
            }
            RecvSource::Any => (SourceSel::Any, Some(c.members.clone())),
        };
        let tag_sel = match tag {
            RecvTag::Tag(t) => TagSel::Exact(Self::check_tag(t)?),
            RecvTag::Any => TagSel::Any,
        };
        let spec = crate::progress::MatchSpec { ctx, source: src_sel, tag: tag_sel };
        let found = self.engine.iprobe(spec, scope.as_deref())?;
        match found {
            None => Ok(None),
            Some((source_world, tag, dtype, bytes)) => {
                let st = self.status_of(comm, source_world, tag, bytes, dtype)?;
                Ok(Some(Envelope { source: st.source, tag, dtype, count: bytes / dtype.elem_size() }))
            }
        }
    }

    fn next_coll_tag(&mut self, comm: CommId) -> Result<(i32, i32)> {
        let c = self.comm_mut(comm)?;
        let tag = c.coll_seq;
        c.coll_seq = c.coll_seq.wrapping_add(1) & i32::MAX;
        Ok((c.ctx_coll, tag))
    }

    /// Split `comm` into disjoint communicators by color, ordering members by
    /// (key, then rank in `comm`). `Undefined` yields `None`.
    pub fn comm_split(
        &mut self,
        comm: CommId,
        color: SplitColor,
        key: i32,
    ) -> Result<Option<CommId>> {
        let (members, my_index) = {
            let c = self.comm(comm)?;
            (c.members.clone(), c.my_index)
        };
        let (ctx, tag) = self.next_coll_tag(comm)?;
        let size = members.len();
        let root_world = members[0];
        let self_world = members[my_index];

        let (has, color_val) = match color {
            SplitColor::Color(c) => (1i32, c),
            SplitColor::Undefined => (0i32, 0),
        };
        let contribution = [has, color_val, key, self.next_ctx];

        let reply: Vec<i32> = if my_index == 0 {
            let mut contribs: Vec<[i32; 4]> = vec![[0; 4]; size];
            contribs[0] = contribution;
            for r in 1..size {
                let mut buf = [0i32; 4];
                self.coll_recv_exact(members[r], ctx, tag, &mut buf)?;
                contribs[r] = buf;
            }
            let new_ctx = contribs.iter().map(|c| c[3]).max().unwrap();

            // Group participating ranks by color; order each group by
            // (key, parent rank).
            let mut colors_seen: Vec<i32> = Vec::new();
            for c in &contribs {
                if c[0] == 1 && !colors_seen.contains(&c[1]) {
                    colors_seen.push(c[1]);
                }
            }
            let mut replies: Vec<Vec<i32>> = vec![Vec::new(); size];
            for &col in &colors_seen {
                let mut group: Vec<(i32, usize)> = (0..size)
                    .filter(|&r| contribs[r][0] == 1 && contribs[r][1] == col)
                    .map(|r| (contribs[r][2], r))
                    .collect();
                group.sort_unstable();
                let group_world: Vec<i32> =
                    group.iter().map(|&(_, r)| members[r] as i32).collect();
                for &(_, r) in &group {
                    let mut reply = vec![new_ctx, group_world.len() as i32];
                    reply.extend_from_slice(&group_world);
                    replies[r] = reply;
                }
            }
            for reply in replies.iter_mut() {
                if reply.is_empty() {
                    *reply = vec![new_ctx, 0];
                }
            }
            for r in 1..size {
                self.coll_send(&replies[r], members[r], ctx, tag)?;
            }
            replies[0].clone()
        } else {
            self.coll_send(&contribution, root_world, ctx, tag)?;
            self.coll_recv_upto(root_world, ctx, tag, 2 + size)?
        };

        let new_ctx = reply[0];
        let group_len = reply[1] as usize;
        self.next_ctx = self.next_ctx.max(new_ctx + 2);
        if group_len == 0 {
            return Ok(None);
        }
        let group: Vec<usize> = reply[2..2 + group_len].iter().map(|&r| r as usize).collect();
        let my_index = group
            .iter()
            .position(|&w| w == self_world)
            .expect("split reply must contain the caller");
        let attrs = TopologyAttributes::for_members(self.engine.map(), &group);
        let state = CommState {
            ctx_p2p: new_ctx,
            ctx_coll: new_ctx + 1,
            members: group,
            my_index,
            attrs,
            coll_seq: 0,
        };
        self.comms.push(Some(state));
        Ok(Some(CommId(self.comms.len() - 1)))
    }

    fn coll_send<T: WireData>(&mut self, data: &[T], dest_world: usize, ctx: i32, tag: i32) -> Result<()> {
        self.engine.send_bytes(dest_world, ctx, tag, T::DTYPE, as_bytes(data))
    }

    /// Receive exactly `buf.len()` elements from a concrete world rank on a
    /// collective context.
    fn coll_recv_exact<T: WireData>(
        &mut self,
        source_world: usize,
        ctx: i32,
        tag: i32,
        buf: &mut [T],
    ) -> Result<()> {
        let id = self.engine.post_recv(
            ctx,
            SourceSel::World(source_world),
            TagSel::Exact(tag),
            std::mem::size_of_val(buf),
            None,
        );
        self.engine.wait_till_done(id)?;
        let completion = self.engine.take_completion(id)?;
        if completion.data.len() != std::mem::size_of_val(buf) {
            return Err(Error::Protocol {
                peer: source_world,
                detail: format!(
                    "collective message of {} bytes where {} were expected",
                    completion.data.len(),
                    std::mem::size_of_val(buf)
                ),
            });
        }
        unsafe {
            std::ptr::copy_nonoverlapping(
                completion.data.as_ptr(),
                buf.as_mut_ptr() as *mut u8,
                completion.data.len(),
            );
        }
        Ok(())
    }

    fn coll_recv_upto(
        &mut self,
        source_world: usize,
        ctx: i32,
        tag: i32,
        max_elems: usize,
    ) -> Result<Vec<i32>> {
        let id = self.engine.post_recv(
            ctx,
            SourceSel::World(source_world),
            TagSel::Exact(tag),
            max_elems * 4,
            None,
        );
        self.engine.wait_till_done(id)?;
        let completion = self.engine.take_completion(id)?;
        crate::wire::from_bytes(&completion.data)
    }

    /// Broadcast with the configured default algorithm.
    pub fn bcast<T: WireData>(&mut self, buf: &mut [T], root: usize, comm: CommId) -> Result<()> {
        self.bcast_with(self.coll_default, buf, root, comm)
    }

    /// Broadcast `root`'s buffer to every member.
    pub fn bcast_with<T: WireData>(
        &mut self,
        algo: CollAlgo,
        buf: &mut [T],
        root: usize,
        comm: CommId,
    ) -> Result<()> {
        let (members, _my_index) = {
            let c = self.comm(comm)?;
            (c.members.clone(), c.my_index)
        };
        if root >= members.len() {
            return Err(Error::Usage(format!("root {root} out of range")));
        }
        let (ctx, tag) = self.next_coll_tag(comm)?;
        let self_world = self.engine.self_rank();
        let schedule = match algo {
            CollAlgo::Multilevel => build_schedule(self.engine.map(), &members, members[root]),
            CollAlgo::Binomial => binomial_schedule(self.engine.map(), &members, root),
        };
        self.last_coll_counts = LevelCounts::default();

        if let Some(edge) = schedule.parent_of(self_world) {
            self.coll_recv_exact(edge.parent, ctx, tag, buf)?;
        }
        for edge in schedule.children_of(self_world) {
            self.coll_send(buf, edge.child, ctx, tag)?;
            let mut counts = self.last_coll_counts;
            counts.record(self.engine.map(), self_world, edge.child);
            self.last_coll_counts = counts;
        }
        Ok(())
    }

    /// Element-wise reduction to `root` along the multilevel schedule.
    /// Combination order is fixed (ascending world rank at each combine), so
    /// results are deterministic run to run.
    pub fn reduce<T: Reducible>(
        &mut self,
        data: &[T],
        op: ReduceOp,
        root: usize,
        comm: CommId,
    ) -> Result<Option<Vec<T>>> {
        // Reject undefined op/dtype pairings up front, even when this rank
        // ends up combining nothing.
        T::combine(op, T::default(), T::default())?;
        let members = self.comm(comm)?.members.clone();
        if root >= members.len() {
            return Err(Error::Usage(format!("root {root} out of range")));
        }
        let (ctx, tag) = self.next_coll_tag(comm)?;
        let self_world = self.engine.self_rank();
        let schedule = build_schedule(self.engine.map(), &members, members[root]);
        self.last_coll_counts = LevelCounts::default();

        let mut contributions: Vec<(usize, Vec<T>)> = vec![(self_world, data.to_vec())];
        for edge in schedule.children_of(self_world) {
            let mut part = vec![T::default(); data.len()];
            self.coll_recv_exact(edge.child, ctx, tag, &mut part)?;
            contributions.push((edge.child, part));
        }
        contributions.sort_by_key(|(w, _)| *w);

        let mut iter = contributions.into_iter();
        let (_, mut acc) = iter.next().unwrap();
        for (_, part) in iter {
            for (a, b) in acc.iter_mut().zip(part) {
                *a = T::combine(op, *a, b)?;
            }
        }

        if let Some(edge) = schedule.parent_of(self_world) {
            self.coll_send(&acc, edge.parent, ctx, tag)?;
            let mut counts = self.last_coll_counts;
            counts.record(self.engine.map(), self_world, edge.parent);
            self.last_coll_counts = counts;
            Ok(None)
        } else {
            Ok(Some(acc))
        }
    }

    /// No member exits before every member has entered. Composed as a
    /// reduction of an empty token to rank 0 and a broadcast back out.
    pub fn barrier(&mut self, comm: CommId) -> Result<()> {
        let token: [i32; 0] = [];
        let up = self.reduce(&token, ReduceOp::Sum, 0, comm)?;
        let mut counts = self.last_coll_counts;
        let mut empty: [i32; 0] = [];
        self.bcast_with(CollAlgo::Multilevel, &mut empty, 0, comm)?;
        counts.add(&self.last_coll_counts);
        self.last_coll_counts = counts;
        drop(up);
        Ok(())
    }
}
