//! DP x PP x TP rank placement and per-path codec routing.
//!
//! Ranks are placed TP-innermost, then PP, then DP:
//! `rank = d * (pp * tp) + p * tp + t`. With `tp` dividing `gpus_per_node`,
//! every tensor-parallel group sits on one node and the data-parallel and
//! pipeline traffic is what crosses the fabric.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, CodecSpec};
use crate::collectives::{Collective, Communicator};
use crate::netsim::{RankId, Topology};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("dp {dp} x pp {pp} x tp {tp} = {product} does not match world size {world}")]
    BadLayout {
        dp: usize,
        pp: usize,
        tp: usize,
        product: usize,
        world: usize,
    },
    #[error("tp {tp} does not tile {gpus_per_node} GPUs per node; tensor-parallel groups would straddle nodes")]
    TpStraddlesNodes { tp: usize, gpus_per_node: usize },
    #[error("parallel degrees must be at least 1")]
    ZeroDegree,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemeError {
    #[error("model-parallel rate {mp_rate} is below data-parallel rate {dp_rate}")]
    InvalidScheme { mp_rate: u8, dp_rate: u8 },
    #[error("scheme `{name}` is missing an entry for {path}")]
    MissingPath { name: String, path: CommPath },
    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Position of a rank in the 3D grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Coords {
    pub d: usize,
    pub p: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelLayout {
    pub dp: usize,
    pub pp: usize,
    pub tp: usize,
    pub gpus_per_node: usize,
}

impl ParallelLayout {
    pub fn build(dp: usize, pp: usize, tp: usize, topology: &Topology) -> Result<Self, LayoutError> {
        if dp == 0 || pp == 0 || tp == 0 {
            return Err(LayoutError::ZeroDegree);
        }
        let world = topology.world_size();
        let product = dp * pp * tp;
        if product != world {
            return Err(LayoutError::BadLayout {
                dp,
                pp,
                tp,
                product,
                world,
            });
        }
        let gpn = topology.gpus_per_node;
        if tp <= gpn && !gpn.is_multiple_of(tp) {
            return Err(LayoutError::TpStraddlesNodes {
                tp,
                gpus_per_node: gpn,
            });
        }
        Ok(Self {
            dp,
            pp,
            tp,
            gpus_per_node: gpn,
        })
    }

    pub fn world_size(&self) -> usize {
        self.dp * self.pp * self.tp
    }

    pub fn coords(&self, rank: RankId) -> Coords {
        let r = rank.0;
        Coords {
            d: r / (self.pp * self.tp),
            p: (r / self.tp) % self.pp,
            t: r % self.tp,
        }
    }

    pub fn rank_at(&self, c: Coords) -> RankId {
        RankId(c.d * self.pp * self.tp + c.p * self.tp + c.t)
    }

    pub fn ranks(&self) -> impl Iterator<Item = RankId> {
        (0..self.world_size()).map(RankId)
    }

    /// Ranks sharing `(p, t)`, ordered by `d`.
    pub fn dp_group(&self, rank: RankId) -> Communicator {
        let c = self.coords(rank);
        Communicator::from_ordered((0..self.dp).map(|d| self.rank_at(Coords { d, ..c })).collect())
    }

    /// Ranks sharing `(d, p)`, ordered by `t`.
    pub fn tp_group(&self, rank: RankId) -> Communicator {
        let c = self.coords(rank);
        Communicator::from_ordered((0..self.tp).map(|t| self.rank_at(Coords { t, ..c })).collect())
    }

    /// The pipeline chain through `rank`: ranks sharing `(d, t)`, ordered by stage.
    pub fn pp_chain(&self, rank: RankId) -> Vec<RankId> {
        let c = self.coords(rank);
        (0..self.pp).map(|p| self.rank_at(Coords { p, ..c })).collect()
    }

    /// Previous and next pipeline stage of `rank`, if any.
    pub fn pp_neighbors(&self, rank: RankId) -> (Option<RankId>, Option<RankId>) {
        let c = self.coords(rank);
        let prev = (c.p > 0).then(|| self.rank_at(Coords { p: c.p - 1, ..c }));
        let next = (c.p + 1 < self.pp).then(|| self.rank_at(Coords { p: c.p + 1, ..c }));
        (prev, next)
    }

    /// One representative rank per distinct DP group.
    pub fn dp_groups(&self) -> Vec<Communicator> {
        let mut out = Vec::new();
        for p in 0..self.pp {
            for t in 0..self.tp {
                out.push(self.dp_group(self.rank_at(Coords { d: 0, p, t })));
            }
        }
        out
    }

    pub fn tp_groups(&self) -> Vec<Communicator> {
        let mut out = Vec::new();
        for d in 0..self.dp {
            for p in 0..self.pp {
                out.push(self.tp_group(self.rank_at(Coords { d, p, t: 0 })));
            }
        }
        out
    }
}

/// Every communication path of 3D parallelism plus ZeRO stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommPath {
    DpAllreduce,
    PpP2p,
    TpAllreduce,
    TpAllgather,
    Zero1Allgather,
    Zero1ReduceScatter,
}

impl CommPath {
    pub const ALL: [CommPath; 6] = [
        CommPath::DpAllreduce,
        CommPath::PpP2p,
        CommPath::TpAllreduce,
        CommPath::TpAllgather,
        CommPath::Zero1Allgather,
        CommPath::Zero1ReduceScatter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CommPath::DpAllreduce => "dp-allreduce",
            CommPath::PpP2p => "pp-p2p",
            CommPath::TpAllreduce => "tp-allreduce",
            CommPath::TpAllgather => "tp-allgather",
            CommPath::Zero1Allgather => "zero1-allgather",
            CommPath::Zero1ReduceScatter => "zero1-reduce-scatter",
        }
    }

    /// Parallelism stage the path belongs to.
    pub fn stage(self) -> &'static str {
        match self {
            CommPath::DpAllreduce => "DP",
            CommPath::PpP2p => "PP",
            CommPath::TpAllreduce | CommPath::TpAllgather => "TP",
            CommPath::Zero1Allgather | CommPath::Zero1ReduceScatter => "ZeRO stage 1",
        }
    }

    pub fn collective(self) -> Collective {
        match self {
            CommPath::DpAllreduce | CommPath::TpAllreduce => Collective::AllReduce,
            CommPath::PpP2p => Collective::P2P,
            CommPath::TpAllgather | CommPath::Zero1Allgather => Collective::AllGather,
            CommPath::Zero1ReduceScatter => Collective::ReduceScatter,
        }
    }

    /// Paths that stay inside one model replica (everything except DP).
    pub fn is_model_parallel(self) -> bool {
        self != CommPath::DpAllreduce
    }
}

impl fmt::Display for CommPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CommPath {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CommPath::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown communication path `{s}`"))
    }
}

/// Total map from [`CommPath`] to the codec its messages pass through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawScheme", into = "RawScheme")]
pub struct SchemeTable {
    name: String,
    paths: BTreeMap<CommPath, CodecSpec>,
}

#[derive(Serialize, Deserialize)]
struct RawScheme {
    name: String,
    paths: BTreeMap<CommPath, CodecSpec>,
}

impl TryFrom<RawScheme> for SchemeTable {
    type Error = SchemeError;
    fn try_from(raw: RawScheme) -> Result<Self, Self::Error> {
        SchemeTable::new(raw.name, raw.paths)
    }
}

impl From<SchemeTable> for RawScheme {
    fn from(s: SchemeTable) -> Self {
        RawScheme {
            name: s.name,
            paths: s.paths,
        }
    }
}

pub const DEFAULT_HIGH_RATE: u8 = 16;
pub const DEFAULT_LOW_RATE: u8 = 8;

impl SchemeTable {
    /// Builds a custom table; every path must be present.
    pub fn new(name: impl Into<String>, paths: BTreeMap<CommPath, CodecSpec>) -> Result<Self, SchemeError> {
        let name = name.into();
        for path in CommPath::ALL {
            match paths.get(&path) {
                Some(spec) => {
                    spec.validate()?;
                }
                None => return Err(SchemeError::MissingPath { name, path }),
            }
        }
        Ok(Self { name, paths })
    }

    fn uniform(name: String, spec: CodecSpec) -> Self {
        Self {
            name,
            paths: CommPath::ALL.into_iter().map(|p| (p, spec)).collect(),
        }
    }

    fn split(name: String, mp: CodecSpec, dp: CodecSpec) -> Self {
        let paths = CommPath::ALL
            .into_iter()
            .map(|p| (p, if p.is_model_parallel() { mp } else { dp }))
            .collect();
        Self { name, paths }
    }

    pub fn no_compression() -> Self {
        Self::uniform("no-compression".into(), CodecSpec::Identity)
    }

    /// The same codec on every path.
    pub fn naive(spec: CodecSpec) -> Result<Self, SchemeError> {
        let spec = spec.validate()?;
        let name = match spec {
            CodecSpec::Identity => "no-compression".to_string(),
            CodecSpec::Lossless => "naive-mpc".to_string(),
            CodecSpec::FixedRate(r) => format!("naive-zfp{r}"),
        };
        Ok(Self::uniform(name, spec))
    }

    /// Lossless on every model-parallel and ZeRO path, fixed-rate on DP.
    pub fn mz_hybrid(dp_rate: u8) -> Result<Self, SchemeError> {
        let dp = CodecSpec::fixed_rate(dp_rate)?;
        Ok(Self::split(format!("mz-hybrid-{dp_rate}"), CodecSpec::Lossless, dp))
    }

    /// High-rate fixed-rate on model-parallel and ZeRO paths, low-rate on DP.
    pub fn z_hybrid(mp_rate: u8, dp_rate: u8) -> Result<Self, SchemeError> {
        let mp = CodecSpec::fixed_rate(mp_rate)?;
        let dp = CodecSpec::fixed_rate(dp_rate)?;
        if mp_rate < dp_rate {
            return Err(SchemeError::InvalidScheme { mp_rate, dp_rate });
        }
        Ok(Self::split(format!("z-hybrid-{mp_rate}-{dp_rate}"), mp, dp))
    }

    /// Resolves a scheme by name: `no-compression` (or `baseline`),
    /// `naive-mpc`, `naive-zfp<r>`, `mz-hybrid[-<dp>]`, `z-hybrid[-<mp>-<dp>]`.
    pub fn by_name(name: &str) -> Result<Self, SchemeError> {
        let unknown = || SchemeError::UnknownScheme(name.to_string());
        let rate = |s: &str| s.parse::<u8>().map_err(|_| unknown());
        match name {
            "no-compression" | "baseline" => return Ok(Self::no_compression()),
            "naive-mpc" => return Self::naive(CodecSpec::Lossless),
            "mz-hybrid" => return Self::mz_hybrid(DEFAULT_LOW_RATE),
            "z-hybrid" => return Self::z_hybrid(DEFAULT_HIGH_RATE, DEFAULT_LOW_RATE),
            _ => {}
        }
        if let Some(r) = name.strip_prefix("naive-zfp") {
            Self::naive(CodecSpec::fixed_rate(rate(r)?)?)
        } else if let Some(r) = name.strip_prefix("mz-hybrid-") {
            Self::mz_hybrid(rate(r)?)
        } else if let Some(rest) = name.strip_prefix("z-hybrid-") {
            let (mp, dp) = rest.split_once('-').ok_or_else(unknown)?;
            Self::z_hybrid(rate(mp)?, rate(dp)?)
        } else {
            Err(unknown())
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn codec(&self, path: CommPath) -> CodecSpec {
        self.paths[&path]
    }

    pub fn entries(&self) -> impl Iterator<Item = (CommPath, CodecSpec)> + '_ {
        self.paths.iter().map(|(p, c)| (*p, *c))
    }

    /// One `path codec` line per row, in [`CommPath::ALL`] order.
    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        for path in CommPath::ALL {
            out.push_str(&format!("{:<22}{}\n", path.as_str(), self.codec(path)));
        }
        out
    }
}
