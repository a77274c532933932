use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{compress, decompress, CodecSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferKind {
    /// Gradient-like: 90% exact zeros, small Gaussian values elsewhere.
    Sparse,
    /// Activation-like: standard Gaussian.
    Dense,
}

impl BufferKind {
    pub fn generate(self, len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            BufferKind::Sparse => {
                let n = Normal::new(0.0f32, 1e-3).expect("valid");
                (0..len)
                    .map(|_| if rng.random_bool(0.9) { 0.0 } else { n.sample(&mut rng) })
                    .collect()
            }
            BufferKind::Dense => {
                let n = Normal::new(0.0f32, 1.0).expect("valid");
                (0..len).map(|_| n.sample(&mut rng)).collect()
            }
        }
    }
}

impl fmt::Display for BufferKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BufferKind::Sparse => "sparse",
            BufferKind::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub buffer: BufferKind,
    pub codec: CodecSpec,
    pub values: usize,
    pub raw_bytes: usize,
    pub wire_bytes: usize,
    pub ratio: f64,
    /// Wall-clock throughput in raw bytes per second.
    pub compress_bps: f64,
    pub decompress_bps: f64,
    pub max_abs_error: f64,
}

pub const BENCH_CODECS: [CodecSpec; 6] = [
    CodecSpec::Identity,
    CodecSpec::Lossless,
    CodecSpec::FixedRate(8),
    CodecSpec::FixedRate(16),
    CodecSpec::FixedRate(24),
    CodecSpec::FixedRate(32),
];

/// Compresses sparse and dense synthetic buffers of each size with every
/// codec and measures ratio, throughput and error.
pub fn codec_bench(sizes: &[usize]) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for &n in sizes {
        for kind in [BufferKind::Sparse, BufferKind::Dense] {
            let data = kind.generate(n, n as u64);
            for codec in BENCH_CODECS {
                let t0 = Instant::now();
                let c = compress(codec, &data).expect("synthetic data is finite");
                let t1 = Instant::now();
                let back = decompress(&c).expect("own output decodes");
                let t2 = Instant::now();
                let raw = n * 4;
                let rate = |d: std::time::Duration| raw as f64 / d.as_secs_f64().max(1e-9);
                let max_abs_error = data
                    .iter()
                    .zip(back.iter())
                    .map(|(a, b)| (*a as f64 - *b as f64).abs())
                    .fold(0.0, f64::max);
                rows.push(BenchRow {
                    buffer: kind,
                    codec,
                    values: n,
                    raw_bytes: raw,
                    wire_bytes: c.wire_bytes(),
                    ratio: if c.wire_bytes() == 0 { 1.0 } else { raw as f64 / c.wire_bytes() as f64 },
                    compress_bps: rate(t1 - t0),
                    decompress_bps: rate(t2 - t1),
                    max_abs_error,
                });
            }
        }
    }
    rows
}

pub fn codec_bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("buffer,codec,values,raw_bytes,wire_bytes,ratio,compress_mb_s,decompress_mb_s,max_abs_error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.1},{:.1},{:e}\n",
            r.buffer,
            r.codec,
            r.values,
            r.raw_bytes,
            r.wire_bytes,
            r.ratio,
            r.compress_bps / 1e6,
            r.decompress_bps / 1e6,
            r.max_abs_error
        ));
    }
    out
}
