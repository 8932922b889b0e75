#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = tlsloss::pipeline::io::parse_sweep_csv(text, "fuzz");
    }
});
