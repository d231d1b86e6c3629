#![no_main]

use libfuzzer_sys::fuzz_target;
use scaa_core::memest::{estimate, ArchSpec};

fuzz_target!(|text: &str| {
    if let Ok(spec) = ArchSpec::parse("fuzz", text) {
        let _ = estimate(&spec);
        let _ = ArchSpec::parse("fuzz", &spec.to_text());
    }
});
