//! Residual MLP blocks with Megatron-style tensor-parallel sharding.
//!
//! One block computes `y = (x + W2 tanh(W1 x + b1)) + b2`. Under tensor
//! parallelism the rows of `W1`/`b1` and the columns of `W2` are split
//! across ranks, so each rank produces a partial `W2_t h_t` that one
//! all-reduce sums; `b2` is replicated. The head `o = Wh y` is split by
//! output rows and all-gathered.
//!
//! Summation order is fixed: dot products accumulate from `0.0` in
//! ascending index order and bias is added last.

/// `out[r] = sum_k w[r][k] * x[k]` for a row-major `rows x cols` matrix.
pub fn matvec(w: &[f32], rows: usize, cols: usize, x: &[f32], out: &mut [f32]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

/// `out[k] = sum_r w[r][k] * v[r]`, accumulating rows in ascending order.
pub fn matvec_t(w: &[f32], rows: usize, cols: usize, v: &[f32], out: &mut [f32]) {
    debug_assert_eq!(w.len(), rows * cols);
    out.fill(0.0);
    for (row, s) in w.chunks_exact(cols).zip(v.iter().take(rows)) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * s;
        }
    }
}

/// `w[r][k] += u[r] * x[k]`.
pub fn add_outer(w: &mut [f32], u: &[f32], x: &[f32]) {
    for (row, s) in w.chunks_exact_mut(x.len()).zip(u) {
        for (g, a) in row.iter_mut().zip(x) {
            *g += s * a;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// `hidden x input`, row-major.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// `input x hidden`, row-major.
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

/// The unsharded model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<BlockParams>,
    /// `output x input`, row-major.
    pub head: Vec<f32>,
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.b2.len())
    }

    pub fn hidden_dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.b1.len())
    }

    pub fn output_dim(&self) -> usize {
        self.head.len() / self.input_dim().max(1)
    }

    /// All parameters in block order (`w1, b1, w2, b2` each), then the head.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(&b.w1);
            out.extend_from_slice(&b.b1);
            out.extend_from_slice(&b.w2);
            out.extend_from_slice(&b.b2);
        }
        out.extend_from_slice(&self.head);
        out
    }

    /// Serial forward pass for one sample.
    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let (d, f) = (self.input_dim(), self.hidden_dim());
        let mut cur = x.to_vec();
        let mut z = vec![0.0f32; f];
        let mut s = vec![0.0f32; d];
        for b in &self.blocks {
            matvec(&b.w1, f, d, &cur, &mut z);
            for (zi, bi) in z.iter_mut().zip(&b.b1) {
                *zi = (*zi + bi).tanh();
            }
            matvec(&b.w2, d, f, &z, &mut s);
            for ((c, si), bi) in cur.iter_mut().zip(&s).zip(&b.b2) {
                *c = (*c + si) + bi;
            }
        }
        let mut out = vec![0.0f32; self.output_dim()];
        matvec(&self.head, self.output_dim(), d, &cur, &mut out);
        out
    }

    /// Mean squared error over a sample-major batch, accumulated in f64.
    pub fn mse(&self, inputs: &[f32], targets: &[f32]) -> f64 {
        let (d, o) = (self.input_dim(), self.output_dim());
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (x, t) in inputs.chunks_exact(d).zip(targets.chunks_exact(o)) {
            for (y, t) in self.forward(x).iter().zip(t) {
                let e = (*y - *t) as f64;
                total += e * e;
            }
            count += o;
        }
        total / count.max(1) as f64
    }
}

/// Offsets of one block's tensors inside a rank's flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOffsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Shapes of one tensor-parallel shard of a pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardLayout {
    pub input_dim: usize,
    pub hidden_local: usize,
    pub output_local: usize,
    pub blocks: Vec<BlockOffsets>,
    pub head: Option<usize>,
    pub len: usize,
}

impl ShardLayout {
    pub fn new(input_dim: usize, hidden_local: usize, output_local: usize, blocks: usize, with_head: bool) -> Self {
        let (d, f) = (input_dim, hidden_local);
        let mut off = 0;
        let mut offsets = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            let w1 = off;
            let b1 = w1 + f * d;
            let w2 = b1 + f;
            let b2 = w2 + d * f;
            off = b2 + d;
            offsets.push(BlockOffsets { w1, b1, w2, b2 });
        }
        let head = with_head.then_some(off);
        if with_head {
            off += output_local * d;
        }
        Self {
            input_dim,
            hidden_local,
            output_local,
            blocks: offsets,
            head,
            len: off,
        }
    }

    /// Cuts tensor-parallel shard `t` of `tp` for blocks `first..first+n` out of
    /// the full model.
    pub fn extract(&self, full: &ModelParams, first: usize, t: usize) -> Vec<f32> {
        let (d, f) = (self.input_dim, self.hidden_local);
        let f_full = full.hidden_dim();
        let mut flat = vec![0.0f32; self.len];
        for (i, off) in self.blocks.iter().enumerate() {
            let b = &full.blocks[first + i];
            let rows = t * f..(t + 1) * f;
            flat[off.w1..off.b1].copy_from_slice(&b.w1[rows.start * d..rows.end * d]);
            flat[off.b1..off.w2].copy_from_slice(&b.b1[rows.clone()]);
            for r in 0..d {
                flat[off.w2 + r * f..off.w2 + (r + 1) * f]
                    .copy_from_slice(&b.w2[r * f_full + rows.start..r * f_full + rows.end]);
            }
            flat[off.b2..off.b2 + d].copy_from_slice(&b.b2);
        }
        if let Some(h) = self.head {
            let o = self.output_local;
            flat[h..h + o * d].copy_from_slice(&full.head[t * o * d..(t + 1) * o * d]);
        }
        flat
    }

    /// Writes shard `t` back into `full` (inverse of [`ShardLayout::extract`]).
    pub fn scatter_into(&self, flat: &[f32], full: &mut ModelParams, first: usize, t: usize) {
        let (d, f) = (self.input_dim, self.hidden_local);
        let f_full = full.hidden_dim();
        for (i, off) in self.blocks.iter().enumerate() {
            let b = &mut full.blocks[first + i];
            let rows = t * f..(t + 1) * f;
            b.w1[rows.start * d..rows.end * d].copy_from_slice(&flat[off.w1..off.b1]);
            b.b1[rows.clone()].copy_from_slice(&flat[off.b1..off.w2]);
            for r in 0..d {
                b.w2[r * f_full + rows.start..r * f_full + rows.end]
                    .copy_from_slice(&flat[off.w2 + r * f..off.w2 + (r + 1) * f]);
            }
            b.b2.copy_from_slice(&flat[off.b2..off.b2 + d]);
        }
        if let Some(h) = self.head {
            let o = self.output_local;
            full.head[t * o * d..(t + 1) * o * d].copy_from_slice(&flat[h..h + o * d]);
        }
    }
}

/// Activations a block keeps for its backward pass, per sample.
#[derive(Debug, Clone, Default)]
pub struct BlockCache {
    pub inputs: Vec<f32>,
    pub hidden: Vec<f32>,
}

/// First half of a sharded block: caches `x` and `h`, returns `W2_t h_t`
/// per sample (sample-major, `input_dim` each).
pub fn block_forward_partial(params: &[f32], off: BlockOffsets, lay: &ShardLayout, x: &[f32], cache: &mut BlockCache) -> Vec<f32> {
    let (d, f) = (lay.input_dim, lay.hidden_local);
    let n = x.len() / d;
    cache.inputs = x.to_vec();
    cache.hidden = vec![0.0; n * f];
    let mut partial = vec![0.0f32; n * d];
    let w1 = &params[off.w1..off.b1];
    let b1 = &params[off.b1..off.w2];
    let w2 = &params[off.w2..off.b2];
    for ((xs, hs), ps) in x
        .chunks_exact(d)
        .zip(cache.hidden.chunks_exact_mut(f))
        .zip(partial.chunks_exact_mut(d))
    {
        matvec(w1, f, d, xs, hs);
        for (h, b) in hs.iter_mut().zip(b1) {
            *h = (*h + b).tanh();
        }
        matvec(w2, d, f, hs, ps);
    }
    partial
}

/// Second half: `y = (x + sum) + b2`.
pub fn block_forward_finish(params: &[f32], off: BlockOffsets, lay: &ShardLayout, x: &[f32], summed: &[f32]) -> Vec<f32> {
    let d = lay.input_dim;
    let b2 = &params[off.b2..off.b2 + d];
    x.chunks_exact(d)
        .zip(summed.chunks_exact(d))
        .flat_map(|(xs, ss)| xs.iter().zip(ss).zip(b2).map(|((a, s), b)| (a + s) + b))
        .collect()
}

/// Accumulates this shard's gradients for one block and returns the partial
/// input gradient `W1_t^T dz_t` per sample.
pub fn block_backward_partial(
    params: &[f32],
    grads: &mut [f32],
    off: BlockOffsets,
    lay: &ShardLayout,
    cache: &BlockCache,
    dy: &[f32],
) -> Vec<f32> {
    let (d, f) = (lay.input_dim, lay.hidden_local);
    let w1 = &params[off.w1..off.b1];
    let w2 = &params[off.w2..off.b2];
    let mut dh = vec![0.0f32; f];
    let mut partial = vec![0.0f32; dy.len()];
    for (((dys, xs), hs), ps) in dy
        .chunks_exact(d)
        .zip(cache.inputs.chunks_exact(d))
        .zip(cache.hidden.chunks_exact(f))
        .zip(partial.chunks_exact_mut(d))
    {
        for (g, v) in grads[off.b2..off.b2 + d].iter_mut().zip(dys) {
            *g += v;
        }
        add_outer(&mut grads[off.w2..off.b2], dys, hs);
        matvec_t(w2, d, f, dys, &mut dh);
        for (g, h) in dh.iter_mut().zip(hs) {
            *g *= 1.0 - h * h;
        }
        for (g, v) in grads[off.b1..off.w2].iter_mut().zip(&dh) {
            *g += v;
        }
        add_outer(&mut grads[off.w1..off.b1], &dh, xs);
        matvec_t(w1, f, d, &dh, ps);
    }
    partial
}

/// `dx = dy + sum`.
pub fn block_backward_finish(dy: &[f32], summed: &[f32]) -> Vec<f32> {
    dy.iter().zip(summed).map(|(a, b)| a + b).collect()
}

/// This shard's head outputs per sample (`output_local` each).
pub fn head_forward(params: &[f32], lay: &ShardLayout, y: &[f32]) -> Vec<f32> {
    let (d, o) = (lay.input_dim, lay.output_local);
    let h = lay.head.expect("last stage");
    let w = &params[h..h + o * d];
    let mut out = vec![0.0f32; y.len() / d * o];
    for (ys, os) in y.chunks_exact(d).zip(out.chunks_exact_mut(o)) {
        matvec(w, o, d, ys, os);
    }
    out
}

/// Accumulates head gradients from the local slice of `dout` and returns the
/// partial `Wh_t^T dout_t` per sample.
pub fn head_backward_partial(params: &[f32], grads: &mut [f32], lay: &ShardLayout, y: &[f32], dout_local: &[f32]) -> Vec<f32> {
    let (d, o) = (lay.input_dim, lay.output_local);
    let h = lay.head.expect("last stage");
    let mut partial = vec![0.0f32; y.len()];
    for ((ys, ds), ps) in y
        .chunks_exact(d)
        .zip(dout_local.chunks_exact(o))
        .zip(partial.chunks_exact_mut(d))
    {
        add_outer(&mut grads[h..h + o * d], ds, ys);
        matvec_t(&params[h..h + o * d], o, d, ds, ps);
    }
    partial
}
