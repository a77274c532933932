//! Rendering scheme tables in the row layout of the golden fixtures.

use hybridcomm::codec::CodecSpec;
use hybridcomm::collectives::Collective;
use hybridcomm::parallel3d::{CommPath, SchemeTable};

fn collective_label(c: Collective) -> &'static str {
    match c {
        Collective::AllReduce => "All-reduce",
        Collective::AllGather => "All-gather",
        Collective::ReduceScatter => "Reduce-Scatter",
        Collective::P2P => "Point-to-point",
    }
}

/// Table rows in the fixture's order: stage, then collective.
pub fn rows(scheme: &SchemeTable, codec_label: impl Fn(CodecSpec) -> String) -> Vec<String> {
    let order = [
        CommPath::DpAllreduce,
        CommPath::PpP2p,
        CommPath::TpAllreduce,
        CommPath::TpAllgather,
        CommPath::Zero1Allgather,
        CommPath::Zero1ReduceScatter,
    ];
    order
        .iter()
        .map(|p| format!("{},{},{}", p.stage(), collective_label(p.collective()), codec_label(scheme.codec(*p))))
        .collect()
}

pub fn fixture(name: &str) -> Vec<String> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

pub fn family(spec: CodecSpec) -> String {
    match spec {
        CodecSpec::Identity => "none".into(),
        CodecSpec::Lossless => "MPC".into(),
        CodecSpec::FixedRate(_) => "ZFP".into(),
    }
}

/// The high/low-rate labelling used by the z-hybrid fixture.
pub fn z_label(mp: u8, dp: u8) -> impl Fn(CodecSpec) -> String {
    move |c| match c {
        CodecSpec::FixedRate(r) if r == dp => "low-rate ZFP".to_string(),
        CodecSpec::FixedRate(r) if r == mp => "high-rate ZFP".to_string(),
        other => other.to_string(),
    }
}
