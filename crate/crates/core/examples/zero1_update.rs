//! One ZeRO stage 1 optimizer step over four data-parallel ranks, next to
//! the plain all-reduce + Adam step it replaces.
//!
//! cargo run --example zero1_update

use hybridcomm::collectives::{allreduce_mean, Communicator};
use hybridcomm::netsim::{RankId, Simulator, Topology};
use hybridcomm::parallel3d::{CommPath, SchemeTable};
use hybridcomm::toymodel::optim::{adam_update, padded_len, zero1_update, AdamConfig, AdamState, GradientExchange, Zero1State};

fn main() {
    let topo = Topology::desk_2x2();
    let comm = Communicator::new((0..4).map(RankId).collect()).unwrap();
    let n = 1000;
    let params: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).cos()).collect();
    let grads: Vec<Vec<f32>> = (0..4).map(|r| (0..n).map(|i| ((i + 31 * r) % 17) as f32 * 1e-3 - 8e-3).collect()).collect();
    let adam = AdamConfig::default();

    // Unsharded: average gradients, every rank runs Adam on everything.
    let mut sim = Simulator::new(topo.clone());
    let padded: Vec<Vec<f32>> = grads
        .iter()
        .map(|g| {
            let mut v = g.clone();
            v.resize(padded_len(n, 4), 0.0);
            v
        })
        .collect();
    let mean = allreduce_mean(&mut sim, CommPath::DpAllreduce, &comm, &padded, SchemeTable::no_compression().codec(CommPath::DpAllreduce)).unwrap();
    let mut reference = params.clone();
    adam_update(&adam, 1, &mut reference, &mean[0][..n], &mut AdamState::zeros(n));
    println!("all-reduce + Adam: {:.3} us", sim.clock.elapsed() * 1e6);

    for scheme in [SchemeTable::no_compression(), SchemeTable::z_hybrid(16, 8).unwrap()] {
        let mut sim = Simulator::new(topo.clone());
        let mut replicas = vec![params.clone(); 4];
        let mut states: Vec<Zero1State> = (0..4).map(|i| Zero1State::new(n, 4, i)).collect();
        zero1_update(&mut sim, &comm, &scheme, GradientExchange::ReduceScatter, &adam, 1, &grads, &mut replicas, &mut states).unwrap();
        let diff = replicas[0].iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        println!("ZeRO-1 with {:<15} {:.3} us, max |param - reference| = {diff:.3e}", scheme.name(), sim.clock.elapsed() * 1e6);
        for e in sim.clock.events() {
            println!("    {:<22} {:<14} wire {:>6} raw {:>6}", e.path.as_str(), e.collective.as_str(), e.wire_bytes, e.raw_bytes);
        }
        let shards: Vec<(usize, usize)> = states.iter().map(|s| (s.offset, s.len)).collect();
        println!("    optimizer shards (offset, len): {shards:?}");
    }
}
