#![no_main]

use libfuzzer_sys::fuzz_target;
use lmtrack::cascade::ArchConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(arch) = ArchConfig::from_manifest(text) {
        assert_eq!(ArchConfig::from_manifest(&arch.to_manifest()).unwrap(), arch);
    }
});
