//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::tables::{family, fixture, rows, z_label};
use common::SerialTrainer;
use hybridcomm::cli::{cmd_sweep, ExperimentConfig, SweepOptions};
use hybridcomm::codec::{compress, decompress, wire_size_bytes, CodecSpec};
use hybridcomm::collectives::{allreduce, ring_allgather, ring_reduce_scatter, Collective, Communicator, TraceEvent};
use hybridcomm::netsim::{RankId, Simulator, Topology};
use hybridcomm::parallel3d::{CommPath, ParallelLayout, SchemeTable};
use hybridcomm::toymodel::optim::{zero1_update, GradientExchange, Zero1State};
use hybridcomm::toymodel::{run_experiment, RunMetrics, ToyModelConfig, Trainer};
use rand::Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ------------------------------------------------------------------ 1

fn random_patterns(n: usize, seed: u64) -> Vec<f32> {
    let mut r = common::rng(seed);
    let specials = [
        f32::NAN,
        f32::from_bits(0x7fc0_1234),
        f32::from_bits(0xffa0_0001),
        f32::INFINITY,
        f32::NEG_INFINITY,
        0.0,
        -0.0,
        f32::from_bits(1),
        f32::from_bits(0x807f_ffff),
        f32::MIN_POSITIVE,
        f32::MAX,
        f32::MIN,
    ];
    (0..n)
        .map(|_| {
            if r.random_bool(0.02) {
                specials[r.random_range(0..specials.len())]
            } else if r.random_bool(0.02) {
                // subnormal
                f32::from_bits(r.random_range(1..0x0080_0000) | (r.random::<u32>() & 0x8000_0000))
            } else {
                f32::from_bits(r.random())
            }
        })
        .collect()
}

fn random_block(r: &mut impl Rng) -> Vec<f32> {
    let e = r.random_range(-140i32..=127);
    let scale = 2f64.powi(e);
    (0..64)
        .map(|_| {
            if r.random_bool(0.05) {
                0.0
            } else {
                let v = (r.random::<f64>() * 2.0 - 1.0) * scale;
                v.clamp(f32::MIN as f64, f32::MAX as f64) as f32
            }
        })
        .collect()
}

fn codec_soundness() -> Outcome {
    let values = random_patterns(1_000_000, 1);
    let packed = compress(CodecSpec::Lossless, &values).map_err(|e| e.to_string())?;
    let back = decompress(&packed).map_err(|e| e.to_string())?;
    ensure!(back.bit_eq(&values), "lossless round trip differs");
    let mut checked = 0;
    for n in [0usize, 1, 63, 64, 65, 1_000_000] {
        for rate in [8u8, 16, 24, 32] {
            let v: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
            let got = compress(CodecSpec::FixedRate(rate), &v).map_err(|e| e.to_string())?.wire_bytes();
            let want = common::fixed_rate_payload(n, rate);
            ensure!(got == want, "n {n} rate {rate}: {got} bytes, expected {want}");
            ensure!(wire_size_bytes(CodecSpec::FixedRate(rate), n).unwrap() == want, "wire_size_bytes n {n} rate {rate}");
            checked += 1;
        }
    }
    let mut r = common::rng(2);
    let mut worst = 0.0f64;
    for rate in [8u8, 16, 24, 32] {
        for i in 0..10_000 {
            let block = random_block(&mut r);
            let out = decompress(&compress(CodecSpec::FixedRate(rate), &block).unwrap()).unwrap();
            let bound = common::fixed_rate_bound(&block, rate);
            for (a, b) in block.iter().zip(out.iter()) {
                let err = (*a as f64 - *b as f64).abs();
                ensure!(err <= bound, "rate {rate} block {i}: error {err:e} > bound {bound:e}");
                worst = worst.max(err / bound);
            }
        }
    }
    Ok(format!("1e6 patterns bit-exact, {checked} size cases exact, 4x1e4 blocks within bound (worst err/bound {worst:.3})"))
}

// ------------------------------------------------------------------ 2

fn collective_correctness() -> Outcome {
    let topo = Topology::lassen_like().with_nodes(2);
    let mut r = common::rng(3);
    let mut cases = 0;
    for p in [2usize, 4, 8] {
        let comm = Communicator::new((0..p).map(RankId).collect()).unwrap();
        for case in 0..100 {
            let chunk = r.random_range(1..200);
            let bufs: Vec<Vec<f32>> = (0..p).map(|_| common::wide_values(&mut r, chunk * p)).collect();
            let shards: Vec<Vec<f32>> = bufs.iter().map(|b| b[..chunk].to_vec()).collect();
            let mut results = Vec::new();
            for spec in [CodecSpec::Identity, CodecSpec::Lossless] {
                let mut sim = Simulator::new(topo.clone());
                let rs = ring_reduce_scatter(&mut sim, CommPath::DpAllreduce, &comm, &bufs, spec).unwrap();
                let ag = ring_allgather(&mut sim, CommPath::DpAllreduce, &comm, &shards, spec).unwrap();
                let ar = allreduce(&mut sim, CommPath::DpAllreduce, &comm, &bufs, spec).unwrap();
                results.push((rs, ag, ar));
            }
            let rs_want = common::reduce_scatter_oracle(&bufs);
            let ag_want = common::allgather_oracle(&shards);
            let ar_want = common::allreduce_oracle(&bufs);
            let (rs, ag, ar) = &results[0];
            for i in 0..p {
                ensure!(rs[i].bit_eq(&rs_want[i]), "p {p} case {case}: reduce-scatter position {i}");
                ensure!(ag[i].bit_eq(&ag_want), "p {p} case {case}: all-gather position {i}");
                ensure!(ar[i].bit_eq(&ar_want), "p {p} case {case}: all-reduce position {i}");
            }
            ensure!(results[0] == results[1], "p {p} case {case}: lossless differs from identity");
            cases += 1;
        }
    }
    Ok(format!("{cases} buffers x 3 collectives bit-equal the oracles, lossless == identity"))
}

// ------------------------------------------------------------------ 3

fn scheme_tables() -> Outcome {
    let mz = fixture("mz_hybrid_table.csv");
    let z = fixture("z_hybrid_table.csv");
    for rate in [4u8, 8, 16, 24] {
        let got = rows(&SchemeTable::mz_hybrid(rate).unwrap(), family);
        ensure!(got == mz, "mz-hybrid-{rate}: {got:?}");
    }
    for (mp, dp) in [(16u8, 8u8), (24, 8), (32, 16)] {
        let got = rows(&SchemeTable::z_hybrid(mp, dp).unwrap(), z_label(mp, dp));
        ensure!(got == z, "z-hybrid-{mp}-{dp}: {got:?}");
    }
    Ok(format!("{} + {} rows match", mz.len(), z.len()))
}

// ------------------------------------------------------------------ 4

fn zero1_equivalence() -> Outcome {
    let cfg = ToyModelConfig::default();
    let adam = cfg.adam();
    let oracle = common::AdamOracle::from(&cfg);
    for dp in [2usize, 4] {
        for exchange in [GradientExchange::ReduceScatter, GradientExchange::AllReduce] {
            let n = 4099;
            let mut r = common::rng(10 + dp as u64);
            let comm = Communicator::new((0..dp).map(RankId).collect()).unwrap();
            let mut sim = Simulator::new(common::topology_for(dp, 1));
            let init: Vec<f32> = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
            let mut params = vec![init.clone(); dp];
            let mut states: Vec<Zero1State> = (0..dp).map(|i| Zero1State::new(n, dp, i)).collect();
            let (mut reference, mut m, mut v) = (init, vec![0.0f32; n], vec![0.0f32; n]);
            for step in 1..=50u32 {
                let grads: Vec<Vec<f32>> = (0..dp).map(|_| (0..n).map(|_| r.random_range(-0.1f32..0.1)).collect()).collect();
                zero1_update(&mut sim, &comm, &SchemeTable::no_compression(), exchange, &adam, step, &grads, &mut params, &mut states)
                    .map_err(|e| e.to_string())?;
                let mean = common::ring_mean(&grads);
                oracle.step(step, &mut reference, &mean[..n], &mut m, &mut v);
                for (i, p) in params.iter().enumerate() {
                    ensure!(p.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits()), "dp {dp} {exchange:?} step {step} rank {i}");
                }
            }
        }
        // and inside training: sharded vs unsharded optimizer
        let model = ToyModelConfig { steps: 50, ..cfg.clone() };
        let (topo, layout) = common::layout_for(dp, 1, 1);
        let mut plain = Trainer::new(model.clone(), topo.clone(), layout.clone(), SchemeTable::no_compression(), None).unwrap();
        let mut sharded = Trainer::new(model, topo, layout, SchemeTable::no_compression(), Some(GradientExchange::ReduceScatter)).unwrap();
        for step in 0..50 {
            plain.train_step().map_err(|e| e.to_string())?;
            sharded.train_step().map_err(|e| e.to_string())?;
            for d in 0..dp {
                ensure!(plain.model(d) == sharded.model(d), "training dp {dp} step {step} replica {d}");
            }
        }
    }
    Ok("dp 2 and 4, both gradient exchanges, 50 steps bit-identical (optimizer and full training)".into())
}

// ------------------------------------------------------------------ 5

fn parallel_serial() -> Outcome {
    let cfg = ToyModelConfig { steps: 20, ..ToyModelConfig::default() };
    let mut details = Vec::new();
    for (dp, pp, tp) in [(2usize, 1usize, 1usize), (1, 2, 1), (1, 1, 2), (2, 2, 2)] {
        let (topo, layout) = common::layout_for(dp, pp, tp);
        let mut t = Trainer::new(cfg.clone(), topo, layout, SchemeTable::no_compression(), None).unwrap();
        let mut oracle = SerialTrainer::new(&cfg, dp);
        let (mut worst, mut worst_elem) = (0.0f64, 0.0f64);
        for step in 0..cfg.steps {
            oracle.step();
            t.train_step().map_err(|e| e.to_string())?;
            for d in 0..dp {
                let got = t.model(d);
                if tp == 1 {
                    ensure!(got == oracle.params, "{dp}x{pp}x{tp} step {step} replica {d}: not bit-exact");
                } else {
                    let diff = common::tensor_rel_diff(&got, &oracle.params);
                    ensure!(diff <= 1e-5, "{dp}x{pp}x{tp} step {step} replica {d}: relative difference {diff:e}");
                    worst = worst.max(diff);
                    worst_elem = worst_elem.max(common::max_rel_diff(&got.flatten(), &oracle.params.flatten()));
                }
            }
        }
        if tp == 1 {
            details.push(format!("{dp}{pp}{tp} exact"));
        } else {
            details.push(format!("{dp}{pp}{tp} {worst:.1e} (elementwise {worst_elem:.1e})"));
        }
    }
    Ok(details.join(", "))
}

// ------------------------------------------------------------------ 6

fn count(events: &[TraceEvent], path: CommPath, coll: Collective) -> usize {
    events.iter().filter(|e| e.path == path && e.collective == coll).count()
}

fn event_census() -> Outcome {
    let (dp, pp, tp) = (2usize, 2usize, 2usize);
    let cfg = ToyModelConfig { steps: 1, ..ToyModelConfig::default() };
    let m = cfg.microbatches;
    let blocks_per_stage = cfg.num_blocks / pp;
    let (topo, layout) = common::layout_for(dp, pp, tp);
    let mut t = Trainer::new(cfg, topo, layout, SchemeTable::no_compression(), None).unwrap();
    t.train_step().map_err(|e| e.to_string())?;
    let ev = t.events();
    // forward and backward activation/gradient hand-offs on each pipeline chain
    let p2p = dp * tp * 2 * m * (pp - 1);
    // two per block per microbatch (row-parallel output forward, input
    // gradient backward), plus the head's input gradient on the last stage
    let tp_ar = dp * pp * m * 2 * blocks_per_stage + dp * m;
    // the column-split head's logits
    let tp_ag = dp * m;
    // one gradient all-reduce per data-parallel group
    let dp_ar = pp * tp;
    let expect = [
        (CommPath::PpP2p, Collective::P2P, p2p),
        (CommPath::TpAllreduce, Collective::AllReduce, tp_ar),
        (CommPath::TpAllgather, Collective::AllGather, tp_ag),
        (CommPath::DpAllreduce, Collective::AllReduce, dp_ar),
    ];
    for (path, coll, want) in expect {
        let got = count(ev, path, coll);
        ensure!(got == want, "{path} {coll:?}: {got} events, expected {want}");
    }
    ensure!(ev.len() == p2p + tp_ar + tp_ag + dp_ar, "{} events in total, expected {}", ev.len(), p2p + tp_ar + tp_ag + dp_ar);
    Ok(format!("pp-p2p {p2p}, tp-allreduce {tp_ar}, tp-allgather {tp_ag}, dp-allreduce {dp_ar}"))
}

// ------------------------------------------------------------------ 7

fn throughput(scheme: &str) -> f64 {
    let topo = Topology::lassen_like().with_nodes(2);
    let layout = ParallelLayout::build(2, 2, 2, &topo).unwrap();
    let cfg = ToyModelConfig {
        num_blocks: 4,
        input_dim: 128,
        hidden_dim: 512,
        output_dim: 16,
        batch_size: 64,
        microbatches: 4,
        steps: 3,
        ..ToyModelConfig::default()
    };
    let (m, _) = run_experiment(&cfg, &topo, &layout, &SchemeTable::by_name(scheme).unwrap(), None).unwrap();
    m.samples_per_sec
}

fn throughput_ordering() -> Outcome {
    let names = ["no-compression", "naive-mpc", "naive-zfp8", "naive-zfp16", "z-hybrid-16-8", "z-hybrid-24-8"];
    let s: Vec<f64> = names.par_iter().map(|n| throughput(n)).collect();
    let [base, mpc, zfp8, zfp16, zh16, zh24] = s[..] else { unreachable!() };
    let rel = |v: f64| v / base;
    let summary = format!(
        "relative to baseline: zfp8 {:.3}, zfp16 {:.3}, zh16-8 {:.3}, zh24-8 {:.3}, mpc {:.4}",
        rel(zfp8),
        rel(zfp16),
        rel(zh16),
        rel(zh24),
        rel(mpc)
    );
    ensure!(zfp8 > zfp16, "zfp8 !> zfp16; {summary}");
    ensure!(zfp8 > zh16 && zh16 > zh24 && zh24 > base, "zfp8 > zh16-8 > zh24-8 > baseline fails; {summary}");
    ensure!((rel(mpc) - 1.0).abs() <= 0.02, "mpc outside 2% of baseline; {summary}");
    Ok(summary)
}

// ------------------------------------------------------------------ 8

fn loss_ordering() -> Outcome {
    let names = ["no-compression", "naive-mpc", "mz-hybrid-8", "z-hybrid-24-8", "z-hybrid-16-8", "naive-zfp8"];
    let topo = Topology::lassen_like().with_nodes(2);
    let layout = ParallelLayout::build(2, 2, 2, &topo).unwrap();
    let seeds = [0u64, 1, 2];
    let jobs: Vec<(u64, &str)> = seeds.iter().flat_map(|&s| names.iter().map(move |&n| (s, n))).collect();
    let runs: Vec<RunMetrics> = jobs
        .par_iter()
        .map(|&(seed, name)| {
            let cfg = ToyModelConfig { steps: 500, seed, ..ToyModelConfig::default() };
            run_experiment(&cfg, &topo, &layout, &SchemeTable::by_name(name).unwrap(), None).unwrap().0
        })
        .collect();
    let mut holds = 0;
    let mut lines = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        let r = &runs[k * names.len()..(k + 1) * names.len()];
        ensure!(
            r[0].final_eval_loss.to_bits() == r[1].final_eval_loss.to_bits() && r[0].train_loss == r[1].train_loss,
            "seed {seed}: naive-mpc is not bit-identical to baseline"
        );
        let loss: Vec<f64> = r.iter().map(RunMetrics::comparable_loss).collect();
        let tol = 0.05 * loss[0];
        let ok = loss.windows(2).skip(1).all(|w| w[0] <= w[1] + tol);
        holds += ok as usize;
        lines.push(format!(
            "seed {seed} {}: {}",
            if ok { "ok" } else { "violated" },
            loss.iter().map(|l| format!("{l:.4e}")).collect::<Vec<_>>().join(" ")
        ));
    }
    ensure!(holds * 2 > seeds.len(), "ordering holds on {holds}/3 seeds; {}", lines.join("; "));
    Ok(format!("ordering holds on {holds}/3 seeds; {}", lines.join("; ")))
}

// ------------------------------------------------------------------ 9

fn determinism() -> Outcome {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sweep.toml");
    let cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let opts = SweepOptions { out: Some(dir.clone()), seeds: None, plots: true };
        cmd_sweep(&cfg, &opts).map_err(|e| e.to_string())?;
        outputs.push(dir);
    }
    let mut bytes = 0;
    for f in ["sweep.csv", "sweep_loss.csv", "loss_vs_step.svg", "samples_per_sec.svg"] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        let b = std::fs::read(outputs[1].join(f)).unwrap();
        ensure!(a == b, "{f} differs between invocations");
        bytes += a.len();
    }
    Ok(format!("two sweeps of configs/sweep.toml byte-identical ({bytes} bytes over 4 files)"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 9] = [
        ("codec soundness", codec_soundness, Some(Duration::from_secs(60))),
        ("collective correctness", collective_correctness, Some(Duration::from_secs(60))),
        ("scheme-table fidelity", scheme_tables, None),
        ("ZeRO-1 equivalence", zero1_equivalence, None),
        ("parallel-serial equivalence", parallel_serial, None),
        ("event census", event_census, None),
        ("throughput ordering", throughput_ordering, Some(Duration::from_secs(300))),
        ("loss ordering", loss_ordering, Some(Duration::from_secs(600))),
        ("determinism", determinism, None),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let mut outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        if let (Ok(detail), Some(limit)) = (&outcome, limit) {
            if took > limit {
                outcome = Err(format!("took longer than {}s; {detail}", limit.as_secs()));
            }
        }
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{}] {name} ({:.2}s): {detail}", i + 1, took.as_secs_f64());
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
