//! Print the codec routing of every built-in scheme.
//!
//! cargo run --example scheme_tables

use hybridcomm::parallel3d::SchemeTable;

fn main() {
    for name in ["baseline", "naive-mpc", "naive-zfp8", "naive-zfp16", "mz-hybrid-8", "mz-hybrid-16", "z-hybrid-16-8", "z-hybrid-24-8"] {
        let scheme = SchemeTable::by_name(name).unwrap();
        println!("== {}", scheme.name());
        print!("{}", scheme.to_table_string());
    }
    // Model-parallel paths may not be compressed harder than data-parallel ones.
    println!("z-hybrid-8-16: {}", SchemeTable::z_hybrid(8, 16).unwrap_err());
}
