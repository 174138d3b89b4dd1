#![no_main]

use libfuzzer_sys::fuzz_target;
use lmtrack::evalbench::{format_track_csv, parse_track_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_track_csv(text) {
        assert_eq!(parse_track_csv(&format_track_csv(&rows)).expect("formatted rows parse"), rows);
    }
});
