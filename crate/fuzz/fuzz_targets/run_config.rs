#![no_main]

use ismoe_cli::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = RunConfig::from_toml_str(text) {
            let _ = config.optim();
            let _ = config.ismoe(100);
        }
    }
});
