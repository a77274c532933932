//! Reference implementations shared by the integration and acceptance tests.
//!
//! Everything here is written from first principles with plain loops and
//! deliberately does not call the library's kernels.

#![allow(dead_code)]

pub mod tables;

use hybridcomm::netsim::Topology;
use hybridcomm::parallel3d::{ParallelLayout, SchemeTable};
use hybridcomm::toymodel::model::ModelParams;
use hybridcomm::toymodel::task::{init_params, ToyTask};
use hybridcomm::toymodel::ToyModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values spread over many binades, with some exact zeros and negatives.
pub fn wide_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.05) {
                0.0
            } else {
                let mag = 10f32.powf(rng.random_range(-6.0..6.0));
                if rng.random_bool(0.5) { mag } else { -mag }
            }
        })
        .collect()
}

// ---------------------------------------------------------------- codecs

/// Payload bytes of fixed-rate coding: a one-byte exponent plus `rate` bits
/// per value for every started block of 64.
pub fn fixed_rate_payload(n: usize, rate: u8) -> usize {
    n.div_ceil(64) * (1 + 8 * rate as usize)
}

/// Quantization step of a block: `2^(E - rate + 2)` with `E` the largest
/// unbiased exponent (subnormals and zero count as the minimum normal one).
pub fn fixed_rate_bound(block: &[f32], rate: u8) -> f64 {
    let biased = block.iter().map(|v| (v.to_bits() >> 23) & 0xff).max().unwrap_or(0).max(1) as i32;
    2f64.powi(biased - 127 - rate as i32 + 2)
}

/// Lossless size ceiling: every chunk of 4096 stored raw behind a 1-bit flag.
pub fn lossless_worst_case(n: usize) -> usize {
    let chunks = n.div_ceil(4096);
    (chunks + 32 * n).div_ceil(8)
}

// ----------------------------------------------------------- collectives

/// Ring reduce-scatter order: position `i` owns chunk `i`, accumulated as
/// `((x[i+1] + x[i+2]) + ...) + x[i]` with indices modulo `p`.
pub fn reduce_scatter_oracle(bufs: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let p = bufs.len();
    let chunk = bufs[0].len() / p;
    (0..p)
        .map(|i| {
            (0..chunk)
                .map(|k| {
                    let idx = i * chunk + k;
                    let mut acc = bufs[(i + 1) % p][idx];
                    for step in 2..=p {
                        acc += bufs[(i + step) % p][idx];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn allgather_oracle(shards: &[Vec<f32>]) -> Vec<f32> {
    shards.concat()
}

pub fn allreduce_oracle(bufs: &[Vec<f32>]) -> Vec<f32> {
    allgather_oracle(&reduce_scatter_oracle(bufs))
}

/// Ring mean of equal-length gradients, zero-padded to a multiple of `p`.
pub fn ring_mean(grads: &[Vec<f32>]) -> Vec<f32> {
    let p = grads.len();
    let n = grads[0].len().div_ceil(p) * p;
    let padded: Vec<Vec<f32>> = grads
        .iter()
        .map(|g| {
            let mut v = g.clone();
            v.resize(n, 0.0);
            v
        })
        .collect();
    allreduce_oracle(&padded).iter().map(|s| s / p as f32).collect()
}

// -------------------------------------------------------------- training

pub struct AdamOracle {
    pub lr: f32,
    pub b1: f32,
    pub b2: f32,
    pub eps: f32,
}

impl AdamOracle {
    pub fn from(cfg: &ToyModelConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            b1: cfg.adam_betas.0,
            b2: cfg.adam_betas.1,
            eps: cfg.adam_epsilon,
        }
    }

    pub fn step(&self, t: u32, p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]) {
        let c1 = 1.0 - self.b1.powi(t as i32);
        let c2 = 1.0 - self.b2.powi(t as i32);
        for i in 0..p.len() {
            m[i] = self.b1 * m[i] + (1.0 - self.b1) * g[i];
            v[i] = self.b2 * v[i] + (1.0 - self.b2) * (g[i] * g[i]);
            p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }
}

fn dot(row: &[f32], x: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..row.len() {
        acc += row[i] * x[i];
    }
    acc
}

fn zeros_like(p: &ModelParams) -> ModelParams {
    let mut z = p.clone();
    for b in &mut z.blocks {
        b.w1.fill(0.0);
        b.b1.fill(0.0);
        b.w2.fill(0.0);
        b.b2.fill(0.0);
    }
    z.head.fill(0.0);
    z
}

fn tensors(p: &mut ModelParams) -> Vec<&mut Vec<f32>> {
    let mut out = Vec::new();
    for b in &mut p.blocks {
        out.push(&mut b.w1);
        out.push(&mut b.b1);
        out.push(&mut b.w2);
        out.push(&mut b.b2);
    }
    out.push(&mut p.head);
    out
}

/// Plain single-process training loop.
///
/// Samples are split into `replicas` contiguous groups; each group's
/// gradient is accumulated sample by sample with the loss scaled by its own
/// size, and the groups are then averaged (exact for one or two groups in any
/// order). This is the summation order data parallelism produces.
pub struct SerialTrainer {
    pub cfg: ToyModelConfig,
    pub params: ModelParams,
    task: ToyTask,
    m: ModelParams,
    v: ModelParams,
    replicas: usize,
    step: usize,
}

impl SerialTrainer {
    pub fn new(cfg: &ToyModelConfig, replicas: usize) -> Self {
        assert!(replicas <= 2, "averaging order is only order-free for up to two groups");
        let params = init_params(cfg);
        Self {
            cfg: cfg.clone(),
            m: zeros_like(&params),
            v: zeros_like(&params),
            params,
            task: ToyTask::new(cfg),
            replicas,
            step: 0,
        }
    }

    /// One step; returns the batch loss (squared error summed in sample
    /// order in f64, divided by the element count).
    pub fn step(&mut self) -> f64 {
        let cfg = &self.cfg;
        let (d, f, o) = (cfg.input_dim, cfg.hidden_dim, cfg.output_dim);
        let n = cfg.batch_size;
        let per = n / self.replicas;
        let scale = 2.0 / (per * o) as f32;
        let batch = self.task.batch(self.step, n);
        let mut grads: Vec<ModelParams> = (0..self.replicas).map(|_| zeros_like(&self.params)).collect();
        let mut sq = 0.0f64;
        for s in 0..n {
            let g = &mut grads[s / per];
            let x0 = &batch.inputs[s * d..(s + 1) * d];
            let target = &batch.targets[s * o..(s + 1) * o];
            // forward, keeping each block's input and hidden activation
            let mut xs = Vec::new();
            let mut hs = Vec::new();
            let mut x = x0.to_vec();
            for b in &self.params.blocks {
                let h: Vec<f32> = (0..f).map(|r| (dot(&b.w1[r * d..(r + 1) * d], &x) + b.b1[r]).tanh()).collect();
                let y: Vec<f32> = (0..d).map(|r| (x[r] + dot(&b.w2[r * f..(r + 1) * f], &h)) + b.b2[r]).collect();
                xs.push(x);
                hs.push(h);
                x = y;
            }
            let out: Vec<f32> = (0..o).map(|r| dot(&self.params.head[r * d..(r + 1) * d], &x)).collect();
            let mut dout = vec![0.0f32; o];
            for j in 0..o {
                let e = out[j] - target[j];
                sq += (e as f64) * (e as f64);
                dout[j] = e * scale;
            }
            // backward
            let mut dy = vec![0.0f32; d];
            for r in 0..o {
                for k in 0..d {
                    g.head[r * d + k] += dout[r] * x[k];
                    dy[k] += self.params.head[r * d + k] * dout[r];
                }
            }
            for (bi, b) in self.params.blocks.iter().enumerate().rev() {
                let gb = &mut g.blocks[bi];
                let (xin, h) = (&xs[bi], &hs[bi]);
                for r in 0..d {
                    gb.b2[r] += dy[r];
                }
                for r in 0..d {
                    for k in 0..f {
                        gb.w2[r * f + k] += dy[r] * h[k];
                    }
                }
                let mut dz = vec![0.0f32; f];
                for r in 0..d {
                    for k in 0..f {
                        dz[k] += b.w2[r * f + k] * dy[r];
                    }
                }
                for k in 0..f {
                    dz[k] *= 1.0 - h[k] * h[k];
                    gb.b1[k] += dz[k];
                }
                for r in 0..f {
                    for k in 0..d {
                        gb.w1[r * d + k] += dz[r] * xin[k];
                    }
                }
                let mut dx = vec![0.0f32; d];
                for r in 0..f {
                    for k in 0..d {
                        dx[k] += b.w1[r * d + k] * dz[r];
                    }
                }
                for k in 0..d {
                    dy[k] += dx[k];
                }
            }
        }
        // average the replica gradients
        let mut mean = grads[0].clone();
        if self.replicas == 2 {
            let mut other = grads[1].clone();
            for (a, b) in tensors(&mut mean).into_iter().zip(tensors(&mut other)) {
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    *x = (*x + *y) / 2.0;
                }
            }
        }
        self.step += 1;
        let adam = AdamOracle::from(cfg);
        let t = self.step as u32;
        let ps = tensors(&mut self.params);
        let ms = tensors(&mut self.m);
        let vs = tensors(&mut self.v);
        for (((p, g), m), v) in ps.into_iter().zip(tensors(&mut mean)).zip(ms).zip(vs) {
            adam.step(t, p, g, m, v);
        }
        sq / (n * o) as f64
    }
}

/// A topology with exactly `world` ranks that keeps `tp` inside a node.
pub fn topology_for(world: usize, tp: usize) -> Topology {
    let gpn = tp.max(2).min(world);
    Topology {
        num_nodes: world / gpn,
        gpus_per_node: gpn,
        ..Topology::desk_2x2()
    }
}

pub fn layout_for(dp: usize, pp: usize, tp: usize) -> (Topology, ParallelLayout) {
    let topo = topology_for(dp * pp * tp, tp);
    let layout = ParallelLayout::build(dp, pp, tp, &topo).expect("valid layout");
    (topo, layout)
}

pub fn baseline() -> SchemeTable {
    SchemeTable::no_compression()
}

/// Relative closeness per element with `|a - b| <= tol * max(|a|, |b|)`.
pub fn max_rel_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let (x, y) = (*x as f64, *y as f64);
            let scale = x.abs().max(y.abs());
            if scale == 0.0 { 0.0 } else { (x - y).abs() / scale }
        })
        .fold(0.0, f64::max)
}

/// Per parameter tensor, the largest element difference relative to the
/// tensor's largest magnitude; returns the worst tensor.
pub fn tensor_rel_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    let mut a = a.clone();
    let mut b = b.clone();
    tensors(&mut a)
        .into_iter()
        .zip(tensors(&mut b))
        .map(|(x, y)| {
            let diff = x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs() as f64).fold(0.0, f64::max);
            let scale = y.iter().map(|q| q.abs() as f64).fold(0.0, f64::max);
            if scale == 0.0 { diff } else { diff / scale }
        })
        .fold(0.0, f64::max)
}
