#![no_main]

use libfuzzer_sys::fuzz_target;
use lmtrack::cascade::CascadeModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = CascadeModel::from_bytes(data) {
        let again = CascadeModel::from_bytes(&model.to_bytes()).expect("re-encoded checkpoint parses");
        assert_eq!(again.to_bytes(), model.to_bytes());
    }
});
