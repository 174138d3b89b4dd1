#![no_main]

use libfuzzer_sys::fuzz_target;
use lmtrack::ndtensor::ParamSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = ParamSet::from_bytes(data) {
        let bytes = set.to_bytes();
        assert_eq!(bytes, data);
        assert_eq!(ParamSet::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
});
