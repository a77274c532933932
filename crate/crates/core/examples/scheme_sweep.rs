//! Compare every scheme on throughput and final loss, the same way the
//! `sweep` subcommand does, without touching the filesystem.
//!
//! cargo run --release --example scheme_sweep

use hybridcomm::cli::{cmd_sweep, ExperimentConfig, SweepOptions};

fn main() {
    let text = r#"
seeds = [0, 1]
[topology]
preset = "lassen-like"
[layout]
dp = 2
pp = 2
tp = 2
[model]
steps = 100
[sweep]
schemes = ["baseline", "naive-mpc", "naive-zfp8", "naive-zfp16", "mz-hybrid-8", "z-hybrid-16-8", "z-hybrid-24-8"]
"#;
    let cfg: ExperimentConfig = toml::from_str(text).unwrap();
    let out = std::env::temp_dir().join("hybridcomm-scheme-sweep");
    let rows = cmd_sweep(&cfg, &SweepOptions { out: Some(out.clone()), seeds: None, plots: true }).unwrap();
    let base: f64 = rows.iter().filter(|r| r.scheme == "no-compression").map(|r| r.samples_per_sec).sum::<f64>() / 2.0;
    println!("{:<16} {:>5} {:>14} {:>9} {:>12}", "scheme", "seed", "samples/s", "vs base", "eval loss");
    for r in &rows {
        println!("{:<16} {:>5} {:>14.0} {:>+8.1}% {:>12.5e}", r.scheme, r.seed, r.samples_per_sec, (r.samples_per_sec / base - 1.0) * 100.0, r.final_loss);
    }
    println!("csv and charts in {}", out.display());
}
