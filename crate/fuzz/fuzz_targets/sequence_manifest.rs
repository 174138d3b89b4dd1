#![no_main]

use libfuzzer_sys::fuzz_target;
use lmtrack::dataio::{format_manifest, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_manifest(text) {
        assert_eq!(parse_manifest(&format_manifest(&m)).expect("formatted manifest parses"), m);
    }
});
