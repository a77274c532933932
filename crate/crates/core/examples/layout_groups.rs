//! Show how ranks map onto data, pipeline and tensor parallel groups.
//!
//! cargo run --example layout_groups -- 24

use hybridcomm::netsim::Topology;
use hybridcomm::parallel3d::ParallelLayout;

fn main() {
    let world: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let topo = Topology::lassen_like().with_nodes(world / 4);
    let (pp, tp) = (2, 2);
    let layout = ParallelLayout::build(world / (pp * tp), pp, tp, &topo).unwrap();
    println!("{} ranks on {} nodes: dp {} pp {} tp {}", layout.world_size(), topo.num_nodes, layout.dp, pp, tp);
    for r in layout.ranks() {
        let c = layout.coords(r);
        println!("rank {:>2} node {} -> d {} p {} t {}", r.0, topo.node_of(r), c.d, c.p, c.t);
    }
    let show = |label: &str, groups: Vec<hybridcomm::collectives::Communicator>| {
        for g in groups {
            let ids: Vec<usize> = g.ranks().iter().map(|r| r.0).collect();
            println!("{label} {ids:?}");
        }
    };
    show("tp group", layout.tp_groups());
    show("dp group", layout.dp_groups());
    for d in 0..layout.dp {
        for t in 0..tp {
            let first = layout.rank_at(hybridcomm::parallel3d::Coords { d, p: 0, t });
            let chain: Vec<usize> = layout.pp_chain(first).iter().map(|r| r.0).collect();
            println!("pp chain {chain:?}");
        }
    }
    println!("tp=3 on 4-GPU nodes: {}", ParallelLayout::build(4, 1, 3, &topo.clone().with_nodes(3)).unwrap_err());
}
