#![no_main]

use libfuzzer_sys::fuzz_target;
use scaa_core::io::{decode_payload, parse_header};

// Header JSON, a NUL byte, then the raw payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    if let Ok(header) = parse_header(text) {
        let _ = decode_payload(&header, data.get(split + 1..).unwrap_or(&[]));
    }
});
