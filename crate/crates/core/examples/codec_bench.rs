//! Codec ratio and wall-clock throughput on gradient-like and
//! activation-like buffers.
//!
//! cargo run --release --example codec_bench

use hybridcomm::cli::{codec_bench, codec_bench_csv};

fn main() {
    print!("{}", codec_bench_csv(&codec_bench(&[4096, 1 << 16, 1 << 20])));
}
