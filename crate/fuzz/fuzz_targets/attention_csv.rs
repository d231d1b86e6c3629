#![no_main]

use libfuzzer_sys::fuzz_target;
use scaa_core::io::{attention_csv, parse_attention};

fuzz_target!(|text: &str| {
    if let Ok(records) = parse_attention(text) {
        let again = parse_attention(&attention_csv(&records)).expect("printed table must parse");
        assert_eq!(again.len(), records.len());
    }
});
