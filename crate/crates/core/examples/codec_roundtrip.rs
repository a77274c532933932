//! Compress a smooth signal with every codec and report size and error.
//!
//! cargo run --example codec_roundtrip

use hybridcomm::codec::{compress, decompress, fixed_rate_error_bound, CodecSpec, CompressedBuffer};

fn main() {
    let signal: Vec<f32> = (0..10_000).map(|i| (i as f32 * 0.01).sin() * 3.0 + 0.5).collect();
    println!("{:<8} {:>10} {:>8} {:>14} {:>14}", "codec", "wire", "ratio", "max error", "bound");
    for spec in ["none", "mpc", "zfp:8", "zfp:16", "zfp:24", "zfp:32"] {
        let spec: CodecSpec = spec.parse().expect("known codec");
        let packed = compress(spec, &signal).expect("finite input");
        let back = decompress(&packed).expect("round trip");
        let err = signal.iter().zip(back.iter()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        let bound = match spec {
            CodecSpec::FixedRate(r) => signal.chunks(64).map(|b| fixed_rate_error_bound(b, r)).fold(0.0, f64::max),
            _ => 0.0,
        };
        println!(
            "{:<8} {:>10} {:>8.3} {:>14.3e} {:>14.3e}",
            spec.to_string(),
            packed.wire_bytes(),
            (signal.len() * 4) as f64 / packed.wire_bytes() as f64,
            err,
            bound
        );
    }

    // The container format survives a trip through bytes.
    let packed = compress(CodecSpec::Lossless, &signal).unwrap();
    let bytes = packed.to_bytes();
    let again = CompressedBuffer::from_bytes(&bytes).unwrap();
    assert!(decompress(&again).unwrap().bit_eq(&signal));
    println!("container: {} bytes ({} header + {} payload)", bytes.len(), bytes.len() - packed.wire_bytes(), packed.wire_bytes());
}
