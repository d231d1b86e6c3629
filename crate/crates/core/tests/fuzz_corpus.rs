//! Replays the checked-in fuzz corpus through the same entry points as the
//! fuzz targets.

use std::fs;
use std::path::PathBuf;

use scaa_core::io::{
    attention_csv, decode_checkpoint, decode_payload, encode_checkpoint, parse_attention,
    parse_header,
};
use scaa_core::memest::{estimate, ArchSpec};
use scaa_core::synth::PhantomSpec;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn arch_spec_seeds() {
    for (name, bytes) in seeds("arch_spec") {
        let text = String::from_utf8(bytes).unwrap();
        let spec = ArchSpec::parse("seed", &text).unwrap_or_else(|e| panic!("{name}: {e}"));
        estimate(&spec).unwrap_or_else(|e| panic!("{name}: {e}"));
        ArchSpec::parse("seed", &spec.to_text()).unwrap();
    }
}

#[test]
fn phantom_config_seeds() {
    for (name, bytes) in seeds("phantom_config") {
        let spec = PhantomSpec::parse(std::str::from_utf8(&bytes).unwrap())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        let again = PhantomSpec::parse(&spec.to_config()).unwrap();
        assert_eq!(again.to_config(), spec.to_config());
    }
}

#[test]
fn volume_seeds() {
    for (name, data) in seeds("volume") {
        let split = data.iter().position(|&b| b == 0).unwrap();
        let header = parse_header(std::str::from_utf8(&data[..split]).unwrap())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        let payload = decode_payload(&header, &data[split + 1..]);
        assert_eq!(payload.is_ok(), name != "truncated", "{name}");
    }
}

#[test]
fn checkpoint_seeds() {
    for (name, data) in seeds("checkpoint") {
        match decode_checkpoint(&data) {
            Ok(ckpt) => {
                assert_ne!(name, "truncated");
                assert_eq!(encode_checkpoint(&ckpt).unwrap(), data);
            }
            Err(_) => assert_eq!(name, "truncated"),
        }
    }
}

#[test]
fn attention_csv_seeds() {
    for (name, bytes) in seeds("attention_csv") {
        let records = parse_attention(std::str::from_utf8(&bytes).unwrap())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(parse_attention(&attention_csv(&records)).unwrap(), records);
    }
}
