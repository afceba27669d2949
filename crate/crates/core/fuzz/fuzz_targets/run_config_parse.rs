#![no_main]

use autoprosam::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse(text) {
            assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        }
    }
});
