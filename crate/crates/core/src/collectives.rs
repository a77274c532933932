//! Compression-assisted ring collectives over simulated ranks.
//!
//! Every function takes one input per communicator position and returns what
//! each position holds afterwards, so value semantics are exact and testable.
//! Time is charged to the [`Simulator`] clock and each call appends one
//! [`TraceEvent`]. Single-member communicators are free and record nothing.
//!
//! Reduction order: after a ring reduce-scatter over `p` positions, chunk `i`
//! (held by position `i`) is the left fold
//! `((x[i+1] + x[i+2]) + ...) + x[i]`, indices mod `p`. Partial sums are
//! decompressed, added to, and recompressed at each hop. All-gather compresses
//! each shard once at its origin and forwards the compressed bytes unchanged;
//! every position, the origin included, ends with the decompressed shard.

use serde::Serialize;
use thiserror::Error;

use crate::codec::{self, CodecError, CodecSpec, FloatBuffer};
use crate::netsim::{RankId, Simulator};
use crate::parallel3d::CommPath;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CollectiveError {
    #[error("{len} values do not split into {parts} equal chunks")]
    BadChunking { len: usize, parts: usize },
    #[error("expected {expected} buffers, one per communicator position, got {got}")]
    BufferCount { expected: usize, got: usize },
    #[error("point-to-point send from rank {0} to itself")]
    SelfSend(usize),
    #[error("communicator lists rank {0} twice")]
    DuplicateRank(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// An ordered group of distinct ranks. Position order fixes the ring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Communicator {
    ranks: Vec<RankId>,
}

impl Communicator {
    pub fn new(ranks: Vec<RankId>) -> Result<Self, CollectiveError> {
        let mut seen = ranks.clone();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(CollectiveError::DuplicateRank(w[0].0));
        }
        Ok(Self { ranks })
    }

    pub(crate) fn from_ordered(ranks: Vec<RankId>) -> Self {
        Self { ranks }
    }

    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    pub fn ranks(&self) -> &[RankId] {
        &self.ranks
    }

    pub fn position_of(&self, rank: RankId) -> Option<usize> {
        self.ranks.iter().position(|r| *r == rank)
    }

    fn next(&self, pos: usize) -> RankId {
        self.ranks[(pos + 1) % self.ranks.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Collective {
    AllReduce,
    AllGather,
    ReduceScatter,
    P2P,
}

impl Collective {
    pub fn as_str(self) -> &'static str {
        match self {
            Collective::AllReduce => "allreduce",
            Collective::AllGather => "allgather",
            Collective::ReduceScatter => "reduce-scatter",
            Collective::P2P => "p2p",
        }
    }
}

/// Accounting for one communication call.
///
/// `raw_bytes` and `wire_bytes` are summed over every message every member
/// sent; divide by `comm_size` for the per-rank figure.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub step: usize,
    pub path: CommPath,
    pub collective: Collective,
    pub comm_size: usize,
    pub raw_bytes: u64,
    pub wire_bytes: u64,
    pub duration: f64,
    pub round_count: u32,
    /// Whether the codec on this call was lossy.
    pub lossy: bool,
}

pub const TRACE_CSV_HEADER: &str = "step,path,collective,comm_size,raw_bytes,wire_bytes,duration_s";

impl TraceEvent {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:e}",
            self.step,
            self.path,
            self.collective.as_str(),
            self.comm_size,
            self.raw_bytes,
            self.wire_bytes,
            self.duration
        )
    }
}

/// Writes the trace log as CSV.
pub fn trace_csv(events: &[TraceEvent]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for e in events {
        out.push_str(&e.csv_row());
        out.push('\n');
    }
    out
}

/// A message after crossing the wire.
struct Delivered {
    values: FloatBuffer,
    wire_bytes: usize,
}

fn transmit(spec: CodecSpec, values: &[f32]) -> Result<Delivered, CodecError> {
    if spec == CodecSpec::Identity {
        return Ok(Delivered {
            values: values.into(),
            wire_bytes: values.len() * 4,
        });
    }
    let c = codec::compress(spec, values)?;
    Ok(Delivered {
        values: codec::decompress(&c)?,
        wire_bytes: c.wire_bytes(),
    })
}

#[derive(Debug, Default)]
struct Tally {
    raw: u64,
    wire: u64,
    duration: f64,
    rounds: u32,
}

impl Tally {
    fn absorb(&mut self, other: Tally) {
        self.raw += other.raw;
        self.wire += other.wire;
        self.duration += other.duration;
        self.rounds += other.rounds;
    }
}

fn check_inputs<B: AsRef<[f32]>>(comm: &Communicator, bufs: &[B]) -> Result<(), CollectiveError> {
    if bufs.len() != comm.size() {
        return Err(CollectiveError::BufferCount {
            expected: comm.size(),
            got: bufs.len(),
        });
    }
    Ok(())
}

fn finish(sim: &mut Simulator, comm: &Communicator, path: CommPath, collective: Collective, spec: CodecSpec, tally: Tally) {
    let start = sim.clock.latest(comm.ranks());
    for &r in comm.ranks() {
        sim.clock.wait_until(r, start + tally.duration);
    }
    sim.clock.record(TraceEvent {
        step: 0,
        path,
        collective,
        comm_size: comm.size(),
        raw_bytes: tally.raw,
        wire_bytes: tally.wire,
        duration: tally.duration,
        round_count: tally.rounds,
        lossy: spec.is_lossy(),
    });
}

/// Sends `buf` from `src` to `dst`; returns what `dst` receives.
///
/// The send is eager: `src` is busy for compression plus transfer, and `dst`
/// decompresses once the message has arrived and it is free.
pub fn p2p(
    sim: &mut Simulator,
    path: CommPath,
    src: RankId,
    dst: RankId,
    buf: &[f32],
    spec: CodecSpec,
) -> Result<FloatBuffer, CollectiveError> {
    if src == dst {
        return Err(CollectiveError::SelfSend(src.0));
    }
    let raw = buf.len() * 4;
    let delivered = transmit(spec, buf)?;
    let topo = &sim.topology;
    let send = topo.codec_time(raw, spec) + topo.transfer_time(delivered.wire_bytes, topo.link_class(src, dst));
    let unpack = topo.codec_time(raw, spec);
    let arrival = sim.clock.now(src) + send;
    sim.clock.advance(src, send);
    sim.clock.wait_until(dst, arrival);
    sim.clock.advance(dst, unpack);
    sim.clock.record(TraceEvent {
        step: 0,
        path,
        collective: Collective::P2P,
        comm_size: 2,
        raw_bytes: raw as u64,
        wire_bytes: delivered.wire_bytes as u64,
        duration: send + unpack,
        round_count: 1,
        lossy: spec.is_lossy(),
    });
    Ok(delivered.values)
}

fn reduce_scatter_rounds<B: AsRef<[f32]>>(
    sim: &Simulator,
    comm: &Communicator,
    bufs: &[B],
    spec: CodecSpec,
) -> Result<(Vec<FloatBuffer>, Tally), CollectiveError> {
    check_inputs(comm, bufs)?;
    let p = comm.size();
    let len = bufs[0].as_ref().len();
    if len % p != 0 || bufs.iter().any(|b| b.as_ref().len() != len) {
        return Err(CollectiveError::BadChunking { len, parts: p });
    }
    let chunk = len / p;
    let slice = |pos: usize, c: usize| &bufs[pos].as_ref()[c * chunk..(c + 1) * chunk];
    if p == 1 {
        return Ok((vec![slice(0, 0).into()], Tally::default()));
    }
    let topo = &sim.topology;
    let raw = chunk * 4;
    let codec_cost = 2.0 * topo.codec_time(raw, spec);
    // carry[j]: the partial sum position j sends next round
    let mut carry: Vec<FloatBuffer> = (0..p).map(|j| slice(j, (j + p - 1) % p).into()).collect();
    let mut tally = Tally::default();
    for k in 0..p - 1 {
        let mut next = vec![FloatBuffer::default(); p];
        let mut round = 0.0f64;
        for j in 0..p {
            let delivered = transmit(spec, &carry[j])?;
            let dst = (j + 1) % p;
            let c = (j + 2 * p - 1 - k) % p;
            let mut acc = delivered.values;
            for (a, x) in acc.iter_mut().zip(slice(dst, c)) {
                *a += *x;
            }
            next[dst] = acc;
            let link = topo.link_class(comm.ranks()[j], comm.next(j));
            round = round.max(codec_cost + topo.transfer_time(delivered.wire_bytes, link));
            tally.raw += raw as u64;
            tally.wire += delivered.wire_bytes as u64;
        }
        carry = next;
        tally.duration += round;
        tally.rounds += 1;
    }
    Ok((carry, tally))
}

fn allgather_rounds<B: AsRef<[f32]>>(
    sim: &Simulator,
    comm: &Communicator,
    shards: &[B],
    spec: CodecSpec,
) -> Result<(Vec<FloatBuffer>, Tally), CollectiveError> {
    check_inputs(comm, shards)?;
    let p = comm.size();
    let len = shards[0].as_ref().len();
    if shards.iter().any(|s| s.as_ref().len() != len) {
        return Err(CollectiveError::BadChunking { len, parts: p });
    }
    if p == 1 {
        return Ok((vec![shards[0].as_ref().into()], Tally::default()));
    }
    let topo = &sim.topology;
    let raw = len * 4;
    let delivered = shards
        .iter()
        .map(|s| transmit(spec, s.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tally = Tally::default();
    for k in 0..p - 1 {
        let mut round = 0.0f64;
        for j in 0..p {
            let origin = (j + p - k) % p;
            let wire = delivered[origin].wire_bytes;
            let pack = if k == 0 { topo.codec_time(raw, spec) } else { 0.0 };
            let link = topo.link_class(comm.ranks()[j], comm.next(j));
            round = round.max(pack + topo.transfer_time(wire, link) + topo.codec_time(raw, spec));
            tally.raw += raw as u64;
            tally.wire += wire as u64;
        }
        tally.duration += round;
        tally.rounds += 1;
    }
    let mut full = FloatBuffer::zeros(len * p);
    for (i, d) in delivered.iter().enumerate() {
        full[i * len..(i + 1) * len].copy_from_slice(&d.values);
    }
    Ok((vec![full; p], tally))
}

/// Ring reduce-scatter: position `i` ends with chunk `i` of the element-wise
/// sum. Inputs must have equal lengths divisible by the communicator size.
pub fn ring_reduce_scatter<B: AsRef<[f32]>>(
    sim: &mut Simulator,
    path: CommPath,
    comm: &Communicator,
    bufs: &[B],
    spec: CodecSpec,
) -> Result<Vec<FloatBuffer>, CollectiveError> {
    let (out, tally) = reduce_scatter_rounds(sim, comm, bufs, spec)?;
    if comm.size() > 1 {
        finish(sim, comm, path, Collective::ReduceScatter, spec, tally);
    }
    Ok(out)
}

/// Ring all-gather: every position ends with the shards concatenated in
/// position order.
pub fn ring_allgather<B: AsRef<[f32]>>(
    sim: &mut Simulator,
    path: CommPath,
    comm: &Communicator,
    shards: &[B],
    spec: CodecSpec,
) -> Result<Vec<FloatBuffer>, CollectiveError> {
    let (out, tally) = allgather_rounds(sim, comm, shards, spec)?;
    if comm.size() > 1 {
        finish(sim, comm, path, Collective::AllGather, spec, tally);
    }
    Ok(out)
}

/// Reduce-scatter followed by all-gather, recorded as one event.
pub fn allreduce<B: AsRef<[f32]>>(
    sim: &mut Simulator,
    path: CommPath,
    comm: &Communicator,
    bufs: &[B],
    spec: CodecSpec,
) -> Result<Vec<FloatBuffer>, CollectiveError> {
    let (shards, mut tally) = reduce_scatter_rounds(sim, comm, bufs, spec)?;
    let (out, gather) = allgather_rounds(sim, comm, &shards, spec)?;
    tally.absorb(gather);
    if comm.size() > 1 {
        finish(sim, comm, path, Collective::AllReduce, spec, tally);
    }
    Ok(out)
}

/// [`allreduce`] followed by a full-precision division by the group size.
pub fn allreduce_mean<B: AsRef<[f32]>>(
    sim: &mut Simulator,
    path: CommPath,
    comm: &Communicator,
    bufs: &[B],
    spec: CodecSpec,
) -> Result<Vec<FloatBuffer>, CollectiveError> {
    let mut out = allreduce(sim, path, comm, bufs, spec)?;
    let p = comm.size() as f32;
    if comm.size() > 1 {
        for buf in &mut out {
            buf.iter_mut().for_each(|v| *v /= p);
        }
    }
    Ok(out)
}
