//! Paired tracked/untracked read throughput.

use hades_bench::overhead::{measure, OverheadConfig};

fn main() {
    let r = measure(&OverheadConfig::default()).expect("overhead run");
    println!(
        "{}",
        serde_json::to_string_pretty(&r).expect("report serializes")
    );
}
