#![no_main]
use hsn_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = RunConfig::parse_toml(text) {
            let _ = config.train.validate();
            // NaN fields never compare equal; skip the round-trip check then.
            if config != config {
                return;
            }
            let back = RunConfig::parse_toml(&config.to_toml()).expect("printed config parses");
            assert_eq!(back, config);
        }
    }
});
