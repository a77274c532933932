//! Adam and ZeRO stage 1 optimizer-state sharding.

use serde::{Deserialize, Serialize};

use crate::codec::FloatBuffer;
use crate::collectives::{self, CollectiveError, Communicator};
use crate::netsim::Simulator;
use crate::parallel3d::{CommPath, SchemeTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1.0e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1.0e-8,
        }
    }
}

/// First and second moments for a contiguous range of parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam step; `step` counts from 1.
pub fn adam_update(cfg: &AdamConfig, step: u32, params: &mut [f32], grads: &[f32], state: &mut AdamState) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * (g * g);
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// How gradients reach the optimizer shards under ZeRO-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientExchange {
    /// Reduce-scatter on `zero1-reduce-scatter`; each rank receives only its shard.
    #[default]
    ReduceScatter,
    /// Full all-reduce on `dp-allreduce`; each rank then slices its shard.
    AllReduce,
}

impl GradientExchange {
    pub fn as_str(self) -> &'static str {
        match self {
            GradientExchange::ReduceScatter => "reduce-scatter",
            GradientExchange::AllReduce => "all-reduce",
        }
    }
}

/// A rank's optimizer shard: moments for `padded[offset..offset + len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Zero1State {
    pub offset: usize,
    pub len: usize,
    pub adam: AdamState,
}

impl Zero1State {
    /// Shard for communicator position `pos` of `dp` over `n` parameters.
    pub fn new(n: usize, dp: usize, pos: usize) -> Self {
        let len = padded_len(n, dp) / dp;
        Self {
            offset: pos * len,
            len,
            adam: AdamState::zeros(len),
        }
    }
}

pub fn padded_len(n: usize, parts: usize) -> usize {
    n.div_ceil(parts) * parts
}

pub(crate) fn pad(buf: &[f32], parts: usize) -> Vec<f32> {
    let mut v = buf.to_vec();
    v.resize(padded_len(buf.len(), parts), 0.0);
    v
}

/// ZeRO-1 update across one data-parallel group.
///
/// `grads[i]` and `params[i]` belong to communicator position `i`; gradients
/// are local sums that still need averaging. Gradients are zero padded to a
/// multiple of the group size. Updated parameter shards come back on the
/// `zero1-allgather` path.
#[allow(clippy::too_many_arguments)]
pub fn zero1_update(
    sim: &mut Simulator,
    comm: &Communicator,
    scheme: &SchemeTable,
    exchange: GradientExchange,
    adam: &AdamConfig,
    step: u32,
    grads: &[Vec<f32>],
    params: &mut [Vec<f32>],
    states: &mut [Zero1State],
) -> Result<(), CollectiveError> {
    let dp = comm.size();
    let n = params[0].len();
    let padded: Vec<Vec<f32>> = grads.iter().map(|g| pad(g, dp)).collect();
    let shards: Vec<FloatBuffer> = match exchange {
        GradientExchange::ReduceScatter => {
            let mut s = collectives::ring_reduce_scatter(
                sim,
                CommPath::Zero1ReduceScatter,
                comm,
                &padded,
                scheme.codec(CommPath::Zero1ReduceScatter),
            )?;
            let p = dp as f32;
            for shard in &mut s {
                shard.iter_mut().for_each(|v| *v /= p);
            }
            s
        }
        GradientExchange::AllReduce => {
            let means = collectives::allreduce_mean(sim, CommPath::DpAllreduce, comm, &padded, scheme.codec(CommPath::DpAllreduce))?;
            means
                .iter()
                .zip(states.iter())
                .map(|(m, st)| m[st.offset..st.offset + st.len].into())
                .collect()
        }
    };
    let updated: Vec<Vec<f32>> = params
        .iter()
        .zip(states.iter_mut())
        .zip(&shards)
        .map(|((p, st), g)| {
            let mut local = pad(p, dp)[st.offset..st.offset + st.len].to_vec();
            adam_update(adam, step, &mut local, g, &mut st.adam);
            local
        })
        .collect();
    let gathered = collectives::ring_allgather(sim, CommPath::Zero1Allgather, comm, &updated, scheme.codec(CommPath::Zero1Allgather))?;
    for (p, full) in params.iter_mut().zip(gathered) {
        p.copy_from_slice(&full[..n]);
    }
    Ok(())
}
