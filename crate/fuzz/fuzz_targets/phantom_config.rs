#![no_main]

use libfuzzer_sys::fuzz_target;
use scaa_core::synth::PhantomSpec;

fuzz_target!(|text: &str| {
    if let Ok(spec) = PhantomSpec::parse(text) {
        let again = PhantomSpec::parse(&spec.to_config()).expect("printed config must parse");
        assert_eq!(again.to_config(), spec.to_config());
    }
});
