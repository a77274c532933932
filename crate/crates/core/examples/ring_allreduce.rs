//! Ring all-reduce across the two nodes of the lassen-like preset, with and
//! without compression, and the simulated time each one takes.
//!
//! cargo run --example ring_allreduce

use hybridcomm::codec::CodecSpec;
use hybridcomm::collectives::{allreduce, trace_csv, Communicator};
use hybridcomm::netsim::{RankId, Simulator, Topology};
use hybridcomm::parallel3d::CommPath;

fn main() {
    let topo = Topology::lassen_like();
    let ranks: Vec<RankId> = (0..topo.world_size()).map(RankId).collect();
    let comm = Communicator::new(ranks.clone()).unwrap();
    let len = 1 << 20;
    let bufs: Vec<Vec<f32>> = ranks
        .iter()
        .map(|r| (0..len).map(|i| ((i * 7 + r.0 * 13) % 101) as f32 / 101.0 - 0.5).collect())
        .collect();
    let exact: Vec<f32> = (0..len).map(|i| bufs.iter().map(|b| b[i]).sum()).collect();

    for spec in [CodecSpec::Identity, CodecSpec::Lossless, CodecSpec::FixedRate(16), CodecSpec::FixedRate(8)] {
        let mut sim = Simulator::new(topo.clone());
        let out = allreduce(&mut sim, CommPath::DpAllreduce, &comm, &bufs, spec).unwrap();
        let err = out[0].iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        let agree = out.iter().all(|o| o.bit_eq(&out[0]));
        let ev = &sim.clock.events()[0];
        println!(
            "{:<7} {:>9.3} ms  wire {:>10} / raw {:>10}  max err {:.2e}  ranks agree: {agree}",
            spec.to_string(),
            sim.clock.elapsed() * 1e3,
            ev.wire_bytes,
            ev.raw_bytes,
            err
        );
        if spec == CodecSpec::FixedRate(8) {
            print!("{}", trace_csv(sim.clock.events()));
        }
    }
}
