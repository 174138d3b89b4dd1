#![no_main]

use libfuzzer_sys::fuzz_target;
use lmtrack::dataio::{decode_frame, encode_frame};

fuzz_target!(|data: &[u8]| {
    if let Ok((frame, depth)) = decode_frame(data) {
        let png = encode_frame(&frame, depth).expect("decoded frame re-encodes");
        assert_eq!(decode_frame(&png).unwrap(), (frame, depth));
    }
});
