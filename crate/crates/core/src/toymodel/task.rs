//! Teacher-student regression task and seeded parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::model::{matvec, ModelParams};
use super::ToyModelConfig;

const TEACHER_STREAM: u64 = 1 << 40;
const INIT_STREAM: u64 = 1 << 41;
const EVAL_STREAM: u64 = 1 << 42;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Inputs and targets, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
    pub len: usize,
}

/// A fixed random two-layer tanh network the student learns to imitate.
#[derive(Debug, Clone)]
pub struct ToyTask {
    input_dim: usize,
    output_dim: usize,
    teacher_hidden: usize,
    a1: Vec<f32>,
    c1: Vec<f32>,
    a2: Vec<f32>,
    seed: u64,
    eval: Batch,
}

impl ToyTask {
    pub fn new(cfg: &ToyModelConfig) -> Self {
        let d = cfg.input_dim;
        let th = 2 * d;
        let mut r = rng(cfg.seed, TEACHER_STREAM);
        let a1 = normal_vec(&mut r, th * d, 1.5 / (d as f32).sqrt());
        let c1 = normal_vec(&mut r, th, 0.1);
        let a2 = normal_vec(&mut r, cfg.output_dim * th, 1.0 / (th as f32).sqrt());
        let mut task = Self {
            input_dim: d,
            output_dim: cfg.output_dim,
            teacher_hidden: th,
            a1,
            c1,
            a2,
            seed: cfg.seed,
            eval: Batch {
                inputs: Vec::new(),
                targets: Vec::new(),
                len: 0,
            },
        };
        task.eval = task.sample(EVAL_STREAM, cfg.eval_samples);
        task
    }

    fn teacher(&self, x: &[f32], out: &mut [f32]) {
        let mut hidden = vec![0.0f32; self.teacher_hidden];
        matvec(&self.a1, self.teacher_hidden, self.input_dim, x, &mut hidden);
        for (h, c) in hidden.iter_mut().zip(&self.c1) {
            *h = (*h + c).tanh();
        }
        matvec(&self.a2, self.output_dim, self.teacher_hidden, &hidden, out);
    }

    fn sample(&self, stream: u64, len: usize) -> Batch {
        let mut r = rng(self.seed, stream);
        let inputs = normal_vec(&mut r, len * self.input_dim, 1.0);
        let mut targets = vec![0.0f32; len * self.output_dim];
        for (x, t) in inputs
            .chunks_exact(self.input_dim)
            .zip(targets.chunks_exact_mut(self.output_dim))
        {
            self.teacher(x, t);
        }
        Batch { inputs, targets, len }
    }

    /// The global batch for training step `step`.
    pub fn batch(&self, step: usize, len: usize) -> Batch {
        self.sample(step as u64, len)
    }

    pub fn eval_set(&self) -> &Batch {
        &self.eval
    }
}

/// Seeded student initialization, shared by every layout of the same config.
pub fn init_params(cfg: &ToyModelConfig) -> ModelParams {
    let (d, f, o) = (cfg.input_dim, cfg.hidden_dim, cfg.output_dim);
    let mut r = rng(cfg.seed, INIT_STREAM);
    let blocks = (0..cfg.num_blocks)
        .map(|_| super::model::BlockParams {
            w1: normal_vec(&mut r, f * d, 1.0 / (d as f32).sqrt()),
            b1: vec![0.0; f],
            w2: normal_vec(&mut r, d * f, 0.5 / (f as f32).sqrt()),
            b2: vec![0.0; d],
        })
        .collect();
    let head = normal_vec(&mut r, o * d, 1.0 / (d as f32).sqrt());
    ModelParams { blocks, head }
}
