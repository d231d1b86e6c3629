#![no_main]

use libfuzzer_sys::fuzz_target;
use scaa_core::io::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        if let Ok(bytes) = encode_checkpoint(&ckpt) {
            decode_checkpoint(&bytes).expect("re-encoded checkpoint must decode");
        }
    }
});
