//! Train the toy model on 8 simulated ranks (dp 2, pp 2, tp 2) with a chosen
//! scheme and print the loss curve and per-path traffic.
//!
//! cargo run --release --example train_toy -- z-hybrid-16-8

use hybridcomm::netsim::Topology;
use hybridcomm::parallel3d::{ParallelLayout, SchemeTable};
use hybridcomm::toymodel::{run_experiment, ToyModelConfig};

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "z-hybrid-16-8".into());
    let scheme = SchemeTable::by_name(&name).expect("known scheme");
    let topo = Topology::lassen_like();
    let layout = ParallelLayout::build(2, 2, 2, &topo).unwrap();
    let cfg = ToyModelConfig { steps: 300, ..ToyModelConfig::default() };
    let (m, _events) = run_experiment(&cfg, &topo, &layout, &scheme, None).unwrap();
    for (step, loss) in m.train_loss.iter().enumerate().step_by(25) {
        println!("step {step:>4}  loss {loss:.5e}");
    }
    println!("final eval loss {:.5e}, {:.0} samples/s simulated, diverged: {}", m.final_eval_loss, m.samples_per_sec, m.diverged);
    for (path, t) in &m.paths {
        println!("{:<22} {:>6} events  {:>10} -> {:>10} bytes  {:.3e} s", path.as_str(), t.events, t.raw_bytes, t.wire_bytes, t.seconds);
    }
}
