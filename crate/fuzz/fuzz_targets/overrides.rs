#![no_main]

use ismoe_cli::{parse_overrides, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // NUL separates argv entries
    let args: Vec<String> = data
        .split(|&b| b == 0)
        .map(|a| String::from_utf8_lossy(a).into_owned())
        .collect();
    if let Ok(table) = parse_overrides(&args) {
        let _ = RunConfig::from_table(table);
    }
});
