#![no_main]

use libfuzzer_sys::fuzz_target;
use lmtrack::dataio::{format_annotation_csv, parse_annotation_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(points) = parse_annotation_csv("fuzz.csv", text) {
        let back = parse_annotation_csv("fuzz.csv", &format_annotation_csv(&points)).expect("formatted annotations parse");
        assert_eq!(back, points);
    }
});
