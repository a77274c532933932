//! Alpha-beta cost model of a GPU cluster.
//!
//! Ranks are numbered node-major: rank `r` lives on node `r / gpus_per_node`.
//! Every link within a node shares one bandwidth/latency pair, every link
//! between nodes another. There is no contention: within a collective round
//! all links run independently, and rounds serialize.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecSpec;
use crate::collectives::TraceEvent;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("topology field `{field}` must be positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("unknown topology preset `{0}` (expected lassen-like or desk-2x2)")]
    UnknownPreset(String),
}

/// Cluster shape and link costs. Bandwidths in bytes/s, latencies in s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub num_nodes: usize,
    pub gpus_per_node: usize,
    pub intra_bw: f64,
    pub inter_bw: f64,
    pub intra_lat: f64,
    pub inter_lat: f64,
    /// Compression and decompression throughput, bytes of raw data per second.
    pub codec_bw: f64,
    /// Sustained matmul throughput per rank, flop/s.
    pub compute_flops: f64,
}

pub const PRESETS: [&str; 2] = ["lassen-like", "desk-2x2"];

impl Topology {
    /// Four GPUs per node on a 100 Gb/s fabric with NVLink-class links inside
    /// the node. `num_nodes` defaults to 2 (8 ranks).
    pub fn lassen_like() -> Self {
        Self {
            num_nodes: 2,
            gpus_per_node: 4,
            intra_bw: 75.0e9,
            inter_bw: 12.5e9,
            intra_lat: 0.5e-6,
            inter_lat: 1.0e-6,
            codec_bw: 1.0e12,
            compute_flops: 2.0e12,
        }
    }

    /// A small 2-node, 2-GPU-per-node box with a slower fabric.
    pub fn desk_2x2() -> Self {
        Self {
            num_nodes: 2,
            gpus_per_node: 2,
            intra_bw: 25.0e9,
            inter_bw: 1.25e9,
            intra_lat: 2.0e-6,
            inter_lat: 10.0e-6,
            codec_bw: 200.0e9,
            compute_flops: 1.0e12,
        }
    }

    pub fn preset(name: &str) -> Result<Self, TopologyError> {
        match name {
            "lassen-like" => Ok(Self::lassen_like()),
            "desk-2x2" => Ok(Self::desk_2x2()),
            other => Err(TopologyError::UnknownPreset(other.to_string())),
        }
    }

    pub fn with_nodes(mut self, num_nodes: usize) -> Self {
        self.num_nodes = num_nodes;
        self
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let fields = [
            ("num_nodes", self.num_nodes as f64),
            ("gpus_per_node", self.gpus_per_node as f64),
            ("intra_bw", self.intra_bw),
            ("inter_bw", self.inter_bw),
            ("intra_lat", self.intra_lat),
            ("inter_lat", self.inter_lat),
            ("codec_bw", self.codec_bw),
            ("compute_flops", self.compute_flops),
        ];
        for (field, value) in fields {
            // NaN fails this comparison too
            if !(value > 0.0) {
                return Err(TopologyError::NonPositive { field, value });
            }
        }
        Ok(())
    }

    pub fn world_size(&self) -> usize {
        self.num_nodes * self.gpus_per_node
    }

    pub fn node_of(&self, rank: RankId) -> usize {
        rank.0 / self.gpus_per_node
    }

    pub fn link_class(&self, a: RankId, b: RankId) -> LinkClass {
        if a == b {
            LinkClass::SelfLoop
        } else if self.node_of(a) == self.node_of(b) {
            LinkClass::IntraNode
        } else {
            LinkClass::InterNode
        }
    }

    pub fn transfer_time(&self, bytes: usize, link: LinkClass) -> f64 {
        match link {
            LinkClass::SelfLoop => 0.0,
            LinkClass::IntraNode => self.intra_lat + bytes as f64 / self.intra_bw,
            LinkClass::InterNode => self.inter_lat + bytes as f64 / self.inter_bw,
        }
    }

    /// Time for one compression (or one decompression) of `raw_bytes`.
    pub fn codec_time(&self, raw_bytes: usize, spec: CodecSpec) -> f64 {
        match spec {
            CodecSpec::Identity => 0.0,
            _ => raw_bytes as f64 / self.codec_bw,
        }
    }

    pub fn compute_time(&self, flops: f64) -> f64 {
        flops / self.compute_flops
    }
}

impl Default for Topology {
    fn default() -> Self {
        Self::lassen_like()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RankId(pub usize);

impl RankId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkClass {
    SelfLoop,
    IntraNode,
    InterNode,
}

/// Per-rank simulated time plus the global event log.
#[derive(Debug, Clone, PartialEq)]
pub struct SimClock {
    now: Vec<f64>,
    events: Vec<TraceEvent>,
    step: usize,
}

impl SimClock {
    pub fn new(world_size: usize) -> Self {
        Self {
            now: vec![0.0; world_size],
            events: Vec::new(),
            step: 0,
        }
    }

    pub fn now(&self, rank: RankId) -> f64 {
        self.now[rank.0]
    }

    pub fn advance(&mut self, rank: RankId, dt: f64) {
        debug_assert!(dt >= 0.0);
        self.now[rank.0] += dt;
    }

    /// Moves `rank` forward to `t` if it is behind.
    pub fn wait_until(&mut self, rank: RankId, t: f64) {
        let slot = &mut self.now[rank.0];
        if *slot < t {
            *slot = t;
        }
    }

    /// Latest clock among `ranks`.
    pub fn latest(&self, ranks: &[RankId]) -> f64 {
        ranks.iter().map(|r| self.now[r.0]).fold(0.0, f64::max)
    }

    pub fn elapsed(&self) -> f64 {
        self.now.iter().copied().fold(0.0, f64::max)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn record(&mut self, mut event: TraceEvent) {
        event.step = self.step;
        self.events.push(event);
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events)
    }
}

/// Topology plus clock: the state one simulated run owns.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub topology: Topology,
    pub clock: SimClock,
}

impl Simulator {
    pub fn new(topology: Topology) -> Self {
        let clock = SimClock::new(topology.world_size());
        Self { topology, clock }
    }

    pub fn compute(&mut self, rank: RankId, flops: f64) {
        let dt = self.topology.compute_time(flops);
        self.clock.advance(rank, dt);
    }
}
