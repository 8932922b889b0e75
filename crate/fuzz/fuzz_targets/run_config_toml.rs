#![no_main]

use libfuzzer_sys::fuzz_target;

// Parse only: validate() resolves globs against the filesystem.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = toml::from_str::<tlsloss::pipeline::RunConfig>(text);
    }
});
