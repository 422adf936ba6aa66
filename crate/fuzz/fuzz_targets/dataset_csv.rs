#![no_main]

use ismoe::data::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // anything that parses must survive a write/read cycle unchanged
    if let Ok(ds) = Dataset::read_csv(data) {
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.inputs(), ds.inputs());
        assert_eq!(back.outputs(), ds.outputs());
    }
});
