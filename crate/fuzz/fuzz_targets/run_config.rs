#![no_main]

use libfuzzer_sys::fuzz_target;
use lmtrack_cli::config::parse_config_text;
use lmtrack_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(entries) = parse_config_text(text) else { return };
    let pairs: Vec<(String, String)> = entries.into_iter().map(|(_, k, v)| (k, v)).collect();
    if let Ok(cfg) = RunConfig::build(&pairs, 0) {
        let dumped: Vec<(String, String)> = parse_config_text(&cfg.to_text())
            .expect("dumped config parses")
            .into_iter()
            .map(|(_, k, v)| (k, v))
            .collect();
        assert_eq!(RunConfig::build(&dumped, 0).expect("dumped config validates"), cfg);
    }
});
