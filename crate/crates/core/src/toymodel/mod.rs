//! Deterministic 3D-parallel training of a residual MLP on a synthetic
//! teacher-student regression task.
//!
//! One [`Trainer::train_step`] runs, for every data-parallel replica:
//!
//! 1. GPipe forward over all microbatches, stage by stage. Each block does one
//!    tensor-parallel all-reduce; the last stage all-gathers head outputs.
//!    Stage boundaries are point-to-point sends on `pp-p2p`.
//! 2. GPipe backward over all microbatches. Each block does one all-reduce of
//!    its input gradient, the head one more.
//! 3. Data-parallel synchronisation: all-reduce on `dp-allreduce` then full
//!    Adam, or ZeRO-1 (see [`optim::zero1_update`]).
//!
//! Gradients accumulate sample by sample in global sample order, so any
//! microbatch split of a replica's samples gives the same per-rank sums.
//! Each replica's loss gradient is scaled by `2 / (samples_per_replica *
//! output_dim)`; the replica gradients are then averaged by the all-reduce.

pub mod model;
pub mod optim;
pub mod task;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, FloatBuffer};
use crate::collectives::{self, CollectiveError, TraceEvent};
use crate::netsim::{RankId, Simulator, Topology};
use crate::parallel3d::{CommPath, Coords, LayoutError, ParallelLayout, SchemeTable};

use model::{BlockCache, ModelParams, ShardLayout};
use optim::{AdamConfig, AdamState, GradientExchange, Zero1State};
use task::ToyTask;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid model config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
}

impl TrainError {
    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        TrainError::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }

    /// Non-finite data reached a lossy codec: the run diverged.
    fn is_divergence(&self) -> bool {
        matches!(
            self,
            TrainError::Collective(CollectiveError::Codec(CodecError::NonFiniteInput { .. }))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub num_blocks: usize,
    /// Inner width of each block; split across tensor-parallel ranks.
    pub hidden_dim: usize,
    /// Width of the residual stream (input and block output).
    pub input_dim: usize,
    pub output_dim: usize,
    /// Global batch, split evenly across data-parallel replicas.
    pub batch_size: usize,
    pub microbatches: usize,
    pub steps: usize,
    pub seed: u64,
    pub learning_rate: f32,
    pub adam_betas: (f32, f32),
    pub adam_epsilon: f32,
    pub eval_samples: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            hidden_dim: 64,
            input_dim: 16,
            output_dim: 16,
            batch_size: 64,
            microbatches: 2,
            steps: 100,
            seed: 0,
            learning_rate: 3.0e-3,
            adam_betas: (0.9, 0.95),
            adam_epsilon: 1.0e-8,
            eval_samples: 256,
        }
    }
}

impl ToyModelConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_epsilon,
        }
    }

    /// Checks the config on its own and against a layout.
    pub fn validate(&self, layout: &ParallelLayout) -> Result<(), TrainError> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("batch_size", self.batch_size),
            ("microbatches", self.microbatches),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(TrainError::invalid(field, "must be at least 1"));
            }
        }
        if !self.hidden_dim.is_multiple_of(layout.tp) {
            return Err(TrainError::invalid("hidden_dim", format!("{} is not divisible by tp {}", self.hidden_dim, layout.tp)));
        }
        if !self.output_dim.is_multiple_of(layout.tp) {
            return Err(TrainError::invalid("output_dim", format!("{} is not divisible by tp {}", self.output_dim, layout.tp)));
        }
        if !self.num_blocks.is_multiple_of(layout.pp) {
            return Err(TrainError::invalid("num_blocks", format!("{} is not divisible by pp {}", self.num_blocks, layout.pp)));
        }
        if !self.batch_size.is_multiple_of(layout.dp * self.microbatches) {
            return Err(TrainError::invalid(
                "batch_size",
                format!("{} is not divisible by dp {} x microbatches {}", self.batch_size, layout.dp, self.microbatches),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::invalid("learning_rate", "must be positive"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(TrainError::invalid("adam_betas", "must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(TrainError::invalid("adam_epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Byte and time totals for one communication path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathTotals {
    pub events: u64,
    pub raw_bytes: u64,
    pub wire_bytes: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub scheme: String,
    pub world_size: usize,
    /// Mean squared error of each completed step's global batch.
    pub train_loss: Vec<f64>,
    /// Held-out loss after the last completed step (NaN when diverged).
    pub final_eval_loss: f64,
    pub simulated_seconds: f64,
    pub samples_per_sec: f64,
    pub paths: BTreeMap<CommPath, PathTotals>,
    pub diverged: bool,
    pub steps_completed: usize,
}

impl RunMetrics {
    pub fn final_train_loss(&self) -> f64 {
        self.train_loss.last().copied().unwrap_or(f64::NAN)
    }

    /// Final eval loss with divergence mapped to +inf, for ordering.
    pub fn comparable_loss(&self) -> f64 {
        if self.diverged || !self.final_eval_loss.is_finite() {
            f64::INFINITY
        } else {
            self.final_eval_loss
        }
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,train_loss\n");
        for (i, l) in self.train_loss.iter().enumerate() {
            out.push_str(&format!("{i},{l:e}\n"));
        }
        out
    }
}

pub fn path_totals(events: &[TraceEvent]) -> BTreeMap<CommPath, PathTotals> {
    let mut out: BTreeMap<CommPath, PathTotals> = BTreeMap::new();
    for e in events {
        let t = out.entry(e.path).or_default();
        t.events += 1;
        t.raw_bytes += e.raw_bytes;
        t.wire_bytes += e.wire_bytes;
        t.seconds += e.duration;
    }
    out
}

/// Per-microbatch activations one rank keeps between forward and backward.
#[derive(Debug, Clone, Default)]
struct MicrobatchCache {
    blocks: Vec<BlockCache>,
    /// Input to the head (last stage only).
    head_input: Vec<f32>,
    /// This rank's slice of the loss gradient w.r.t. head outputs.
    dout_local: Vec<f32>,
}

#[derive(Debug, Clone)]
enum OptimizerState {
    Full(AdamState),
    Zero1(Zero1State),
}

#[derive(Debug, Clone)]
struct RankState {
    shape: ShardLayout,
    params: Vec<f32>,
    grads: Vec<f32>,
    opt: OptimizerState,
}

/// One simulated training run.
#[derive(Debug)]
pub struct Trainer {
    cfg: ToyModelConfig,
    layout: ParallelLayout,
    scheme: SchemeTable,
    zero1: Option<GradientExchange>,
    sim: Simulator,
    task: ToyTask,
    ranks: Vec<RankState>,
    blocks_per_stage: usize,
    step: usize,
}

impl Trainer {
    pub fn new(
        cfg: ToyModelConfig,
        topology: Topology,
        layout: ParallelLayout,
        scheme: SchemeTable,
        zero1: Option<GradientExchange>,
    ) -> Result<Self, TrainError> {
        cfg.validate(&layout)?;
        if layout.world_size() != topology.world_size() {
            return Err(LayoutError::BadLayout {
                dp: layout.dp,
                pp: layout.pp,
                tp: layout.tp,
                product: layout.world_size(),
                world: topology.world_size(),
            }
            .into());
        }
        let full = task::init_params(&cfg);
        let task = ToyTask::new(&cfg);
        let bps = cfg.num_blocks / layout.pp;
        let ranks = layout
            .ranks()
            .map(|r| {
                let c = layout.coords(r);
                let shape = ShardLayout::new(
                    cfg.input_dim,
                    cfg.hidden_dim / layout.tp,
                    cfg.output_dim / layout.tp,
                    bps,
                    c.p + 1 == layout.pp,
                );
                let params = shape.extract(&full, c.p * bps, c.t);
                let n = params.len();
                let opt = match zero1 {
                    None => OptimizerState::Full(AdamState::zeros(n)),
                    Some(_) => OptimizerState::Zero1(Zero1State::new(n, layout.dp, c.d)),
                };
                RankState {
                    shape,
                    params,
                    grads: vec![0.0; n],
                    opt,
                }
            })
            .collect();
        Ok(Self {
            cfg,
            layout,
            scheme,
            zero1,
            sim: Simulator::new(topology),
            task,
            ranks,
            blocks_per_stage: bps,
            step: 0,
        })
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn events(&self) -> &[TraceEvent] {
        self.sim.clock.events()
    }

    pub fn layout(&self) -> &ParallelLayout {
        &self.layout
    }

    /// Flat parameters held by `rank`.
    pub fn rank_params(&self, rank: RankId) -> &[f32] {
        &self.ranks[rank.0].params
    }

    /// Reassembles the full model from data-parallel replica `d`.
    pub fn model(&self, d: usize) -> ModelParams {
        let mut full = task::init_params(&self.cfg);
        for p in 0..self.layout.pp {
            for t in 0..self.layout.tp {
                let r = &self.ranks[self.layout.rank_at(Coords { d, p, t }).0];
                r.shape.scatter_into(&r.params, &mut full, p * self.blocks_per_stage, t);
            }
        }
        full
    }

    pub fn eval_loss(&self) -> f64 {
        let eval = self.task.eval_set();
        self.model(0).mse(&eval.inputs, &eval.targets)
    }

    fn rank_id(&self, d: usize, p: usize, t: usize) -> RankId {
        self.layout.rank_at(Coords { d, p, t })
    }

    fn charge(&mut self, rank: RankId, flops: f64) {
        self.sim.compute(rank, flops);
    }

    /// All-reduce over the tensor-parallel group of stage `(d, p)`, padding
    /// each buffer to a multiple of `tp`.
    fn tp_allreduce(&mut self, d: usize, p: usize, bufs: Vec<Vec<f32>>) -> Result<Vec<Vec<f32>>, TrainError> {
        let tp = self.layout.tp;
        if tp == 1 {
            return Ok(bufs);
        }
        let n = bufs[0].len();
        let padded: Vec<Vec<f32>> = bufs.iter().map(|b| optim::pad(b, tp)).collect();
        let comm = self.layout.tp_group(self.rank_id(d, p, 0));
        let spec = self.scheme.codec(CommPath::TpAllreduce);
        let out = collectives::allreduce(&mut self.sim, CommPath::TpAllreduce, &comm, &padded, spec)?;
        Ok(out.into_iter().map(|b| b[..n].to_vec()).collect())
    }

    /// Runs one optimizer step and returns the global batch's training loss.
    pub fn train_step(&mut self) -> Result<f64, TrainError> {
        let step = self.step;
        self.sim.clock.set_step(step);
        let cfg = self.cfg.clone();
        let (dp, pp, tp, m) = (self.layout.dp, self.layout.pp, self.layout.tp, cfg.microbatches);
        let (d_in, out_dim) = (cfg.input_dim, cfg.output_dim);
        let per_replica = cfg.batch_size / dp;
        let mb = per_replica / m;
        let out_local = out_dim / tp;
        let hidden_local = cfg.hidden_dim / tp;
        let grad_scale = 2.0 / (per_replica * out_dim) as f32;
        let block_flops = 2.0 * (2 * d_in * hidden_local * mb) as f64;
        let head_flops = 2.0 * (d_in * out_local * mb) as f64;
        let bps = self.blocks_per_stage;
        let batch = self.task.batch(step, cfg.batch_size);
        for r in &mut self.ranks {
            r.grads.fill(0.0);
        }
        let world = self.layout.world_size();
        let mut caches: Vec<Vec<MicrobatchCache>> = vec![vec![MicrobatchCache::default(); m]; world];
        let mut sq_err = 0.0f64;

        // forward
        for mbi in 0..m {
            for d in 0..dp {
                let first = d * per_replica + mbi * mb;
                let x0 = batch.inputs[first * d_in..(first + mb) * d_in].to_vec();
                let mut acts: Vec<Vec<f32>> = vec![x0; tp];
                for p in 0..pp {
                    let ranks: Vec<RankId> = (0..tp).map(|t| self.rank_id(d, p, t)).collect();
                    for b in 0..bps {
                        let mut partials = Vec::with_capacity(tp);
                        for (t, &r) in ranks.iter().enumerate() {
                            let st = &self.ranks[r.0];
                            let mut cache = BlockCache::default();
                            partials.push(model::block_forward_partial(&st.params, st.shape.blocks[b], &st.shape, &acts[t], &mut cache));
                            caches[r.0][mbi].blocks.push(cache);
                            self.charge(r, block_flops);
                        }
                        let sums = self.tp_allreduce(d, p, partials)?;
                        for (t, &r) in ranks.iter().enumerate() {
                            let st = &self.ranks[r.0];
                            acts[t] = model::block_forward_finish(&st.params, st.shape.blocks[b], &st.shape, &acts[t], &sums[t]);
                        }
                    }
                    if p + 1 < pp {
                        for (t, &r) in ranks.iter().enumerate() {
                            let dst = self.rank_id(d, p + 1, t);
                            let spec = self.scheme.codec(CommPath::PpP2p);
                            acts[t] = collectives::p2p(&mut self.sim, CommPath::PpP2p, r, dst, &acts[t], spec)?.into_inner();
                        }
                        continue;
                    }
                    // head on the last stage
                    let mut outs = Vec::with_capacity(tp);
                    for (t, &r) in ranks.iter().enumerate() {
                        let st = &self.ranks[r.0];
                        outs.push(model::head_forward(&st.params, &st.shape, &acts[t]));
                        caches[r.0][mbi].head_input = std::mem::take(&mut acts[t]);
                        self.charge(r, head_flops);
                    }
                    let gathered: Vec<FloatBuffer> = if tp == 1 {
                        outs.into_iter().map(FloatBuffer::from).collect()
                    } else {
                        let comm = self.layout.tp_group(ranks[0]);
                        let spec = self.scheme.codec(CommPath::TpAllgather);
                        collectives::ring_allgather(&mut self.sim, CommPath::TpAllgather, &comm, &outs, spec)?
                    };
                    let targets = &batch.targets[first * out_dim..(first + mb) * out_dim];
                    for (t, &r) in ranks.iter().enumerate() {
                        let mut dout_local = Vec::with_capacity(mb * out_local);
                        for s in 0..mb {
                            for j in t * out_local..(t + 1) * out_local {
                                // gathered layout: shard k holds sample-major rows of width out_local
                                let k = j / out_local;
                                let o = gathered[t][k * mb * out_local + s * out_local + j % out_local];
                                let e = o - targets[s * out_dim + j];
                                dout_local.push(e * grad_scale);
                            }
                        }
                        caches[r.0][mbi].dout_local = dout_local;
                    }
                    // loss from position 0's copy of the full outputs
                    for s in 0..mb {
                        for j in 0..out_dim {
                            let k = j / out_local;
                            let o = gathered[0][k * mb * out_local + s * out_local + j % out_local];
                            let e = (o - targets[s * out_dim + j]) as f64;
                            sq_err += e * e;
                        }
                    }
                }
            }
        }

        // backward
        for mbi in 0..m {
            for d in 0..dp {
                let mut grads_in: Vec<Vec<f32>> = Vec::new();
                for p in (0..pp).rev() {
                    let ranks: Vec<RankId> = (0..tp).map(|t| self.rank_id(d, p, t)).collect();
                    if p + 1 == pp {
                        let mut partials = Vec::with_capacity(tp);
                        for &r in &ranks {
                            let st = &mut self.ranks[r.0];
                            let c = &caches[r.0][mbi];
                            partials.push(model::head_backward_partial(&st.params, &mut st.grads, &st.shape, &c.head_input, &c.dout_local));
                            self.charge(r, 2.0 * head_flops);
                        }
                        grads_in = self.tp_allreduce(d, p, partials)?;
                    }
                    for b in (0..bps).rev() {
                        let mut partials = Vec::with_capacity(tp);
                        for (t, &r) in ranks.iter().enumerate() {
                            let st = &mut self.ranks[r.0];
                            let off = st.shape.blocks[b];
                            partials.push(model::block_backward_partial(&st.params, &mut st.grads, off, &st.shape, &caches[r.0][mbi].blocks[b], &grads_in[t]));
                            self.charge(r, 2.0 * block_flops);
                        }
                        let sums = self.tp_allreduce(d, p, partials)?;
                        for t in 0..tp {
                            grads_in[t] = model::block_backward_finish(&grads_in[t], &sums[t]);
                        }
                    }
                    if p > 0 {
                        for (t, &r) in ranks.iter().enumerate() {
                            let dst = self.rank_id(d, p - 1, t);
                            let spec = self.scheme.codec(CommPath::PpP2p);
                            grads_in[t] = collectives::p2p(&mut self.sim, CommPath::PpP2p, r, dst, &grads_in[t], spec)?.into_inner();
                        }
                    }
                }
            }
        }

        self.sync_data_parallel(step as u32 + 1)?;
        self.step += 1;
        Ok(sq_err / (cfg.batch_size * out_dim) as f64)
    }

    fn sync_data_parallel(&mut self, adam_step: u32) -> Result<(), TrainError> {
        let adam = self.cfg.adam();
        for comm in self.layout.dp_groups() {
            let members: Vec<usize> = comm.ranks().iter().map(|r| r.0).collect();
            let grads: Vec<Vec<f32>> = members.iter().map(|&i| std::mem::take(&mut self.ranks[i].grads)).collect();
            match self.zero1 {
                None => {
                    let dp = comm.size();
                    let padded: Vec<Vec<f32>> = grads.iter().map(|g| optim::pad(g, dp)).collect();
                    let spec = self.scheme.codec(CommPath::DpAllreduce);
                    let means = collectives::allreduce_mean(&mut self.sim, CommPath::DpAllreduce, &comm, &padded, spec)?;
                    for (&i, g) in members.iter().zip(&means) {
                        let st = &mut self.ranks[i];
                        let n = st.params.len();
                        let OptimizerState::Full(state) = &mut st.opt else { unreachable!("full optimizer without ZeRO") };
                        optim::adam_update(&adam, adam_step, &mut st.params, &g[..n], state);
                    }
                }
                Some(exchange) => {
                    let mut params: Vec<Vec<f32>> = members.iter().map(|&i| std::mem::take(&mut self.ranks[i].params)).collect();
                    let mut states: Vec<Zero1State> = members
                        .iter()
                        .map(|&i| match &self.ranks[i].opt {
                            OptimizerState::Zero1(s) => s.clone(),
                            OptimizerState::Full(_) => unreachable!("ZeRO optimizer expected"),
                        })
                        .collect();
                    optim::zero1_update(&mut self.sim, &comm, &self.scheme, exchange, &adam, adam_step, &grads, &mut params, &mut states)?;
                    for ((&i, p), s) in members.iter().zip(params).zip(states) {
                        self.ranks[i].params = p;
                        self.ranks[i].opt = OptimizerState::Zero1(s);
                    }
                }
            }
            for (&i, g) in members.iter().zip(grads) {
                self.ranks[i].grads = g;
            }
        }
        Ok(())
    }

    /// Runs the configured number of steps and summarizes the run.
    ///
    /// A non-finite loss, or non-finite data hitting a lossy codec, ends the
    /// run early with `diverged` set.
    pub fn run(&mut self) -> Result<RunMetrics, TrainError> {
        let mut train_loss = Vec::with_capacity(self.cfg.steps);
        let mut diverged = false;
        for _ in 0..self.cfg.steps {
            match self.train_step() {
                Ok(loss) if loss.is_finite() => train_loss.push(loss),
                Ok(loss) => {
                    train_loss.push(loss);
                    diverged = true;
                    break;
                }
                Err(e) if e.is_divergence() => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let eval = self.eval_loss();
        let diverged = diverged || !eval.is_finite();
        let seconds = self.sim.clock.elapsed();
        let steps_completed = self.step;
        let samples = (steps_completed * self.cfg.batch_size) as f64;
        Ok(RunMetrics {
            scheme: self.scheme.name().to_string(),
            world_size: self.layout.world_size(),
            train_loss,
            final_eval_loss: if diverged { f64::NAN } else { eval },
            simulated_seconds: seconds,
            samples_per_sec: if seconds > 0.0 { samples / seconds } else { 0.0 },
            paths: path_totals(self.sim.clock.events()),
            diverged,
            steps_completed,
        })
    }
}

/// Builds a trainer and runs it to completion.
pub fn run_experiment(
    cfg: &ToyModelConfig,
    topology: &Topology,
    layout: &ParallelLayout,
    scheme: &SchemeTable,
    zero1: Option<GradientExchange>,
) -> Result<(RunMetrics, Vec<TraceEvent>), TrainError> {
    let mut trainer = Trainer::new(cfg.clone(), topology.clone(), layout.clone(), scheme.clone(), zero1)?;
    let metrics = trainer.run()?;
    let events = trainer.sim.clock.take_events();
    Ok((metrics, events))
}
